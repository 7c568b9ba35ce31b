#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "msq/tensor.hpp"

namespace msq {

// ---------------------------------------------------------------------------
// Desk-scale classification data: MNIST IDX files, CIFAR-10 binary batches,
// and a deterministic synthetic task for dataset-free testing.
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<std::uint8_t> images;  // N*C*H*W, row-major
  std::vector<int> labels;
  std::int64_t n = 0, c = 0, h = 0, w = 0;
  int num_classes = 10;
  std::string split;
  std::vector<float> mean, stdev;  // per channel, in raw u8 units

  std::int64_t image_size() const { return c * h * w; }

  std::uint64_t content_hash() const {
    std::uint64_t hsh = fnv1a_span(images);
    hsh = fnv1a_span(labels, hsh);
    return hsh;
  }

  Dataset subset(std::int64_t start, std::int64_t count) const {
    if (start < 0 || start + count > n)
      throw DataError("subset range out of bounds");
    Dataset d = *this;
    d.n = count;
    d.images.assign(images.begin() + start * image_size(),
                    images.begin() + (start + count) * image_size());
    d.labels.assign(labels.begin() + start, labels.begin() + start + count);
    return d;
  }

  // Deterministic stratified subset: the first per_class examples of each
  // class in file order, interleaved by class.
  Dataset balanced_subset(std::int64_t per_class) const {
    auto by_class =
        std::vector<std::vector<std::int64_t>>(std::size_t(num_classes));
    for (std::int64_t i = 0; i < n; ++i) {
      auto& v = by_class[std::size_t(labels[std::size_t(i)])];
      if (std::int64_t(v.size()) < per_class) v.push_back(i);
    }
    Dataset d = *this;
    d.images.clear();
    d.labels.clear();
    d.n = 0;
    for (std::int64_t j = 0; j < per_class; ++j)
      for (int cls = 0; cls < num_classes; ++cls) {
        const auto& v = by_class[std::size_t(cls)];
        if (j >= std::int64_t(v.size()))
          throw DataError("class " + std::to_string(cls) +
                          " has fewer than " + std::to_string(per_class) +
                          " examples");
        const std::int64_t i = v[std::size_t(j)];
        d.images.insert(d.images.end(), images.begin() + i * image_size(),
                        images.begin() + (i + 1) * image_size());
        d.labels.push_back(labels[std::size_t(i)]);
        ++d.n;
      }
    return d;
  }
};

namespace detail {

inline std::uint32_t read_be32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw IntegrityError("truncated file while reading " + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

inline std::ifstream open_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return in;
}

}  // namespace detail

// IDX pair (big-endian magic 0x803 for ubyte images, 0x801 for labels).
inline Dataset load_idx(const std::string& images_path,
                        const std::string& labels_path) {
  auto img = detail::open_binary(images_path);
  const auto img_magic = detail::read_be32(img, "image magic");
  if (img_magic != 0x803)
    throw FormatError(images_path + ": bad IDX image magic " +
                      std::to_string(img_magic));
  const std::int64_t n = detail::read_be32(img, "image count");
  const std::int64_t rows = detail::read_be32(img, "rows");
  const std::int64_t cols = detail::read_be32(img, "cols");

  auto lab = detail::open_binary(labels_path);
  const auto lab_magic = detail::read_be32(lab, "label magic");
  if (lab_magic != 0x801)
    throw FormatError(labels_path + ": bad IDX label magic " +
                      std::to_string(lab_magic));
  const std::int64_t ln = detail::read_be32(lab, "label count");
  if (ln != n)
    throw DataError("image/label count mismatch: " + std::to_string(n) +
                    " images vs " + std::to_string(ln) + " labels");

  Dataset d;
  d.n = n;
  d.c = 1;
  d.h = rows;
  d.w = cols;
  d.num_classes = 10;
  d.mean = {0.1307f * 255.0f};
  d.stdev = {0.3081f * 255.0f};
  d.images.resize(std::size_t(n * rows * cols));
  if (!img.read(reinterpret_cast<char*>(d.images.data()),
                std::streamsize(d.images.size())))
    throw IntegrityError(images_path + ": truncated image payload");

  auto raw = std::vector<std::uint8_t>(std::size_t(n));
  if (!lab.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size())))
    throw IntegrityError(labels_path + ": truncated label payload");
  d.labels.assign(raw.begin(), raw.end());
  for (int v : d.labels)
    if (v < 0 || v >= d.num_classes)
      throw IntegrityError(labels_path + ": label out of range");
  return d;
}

// CIFAR-10 binary layout: 10000 records of 3073 bytes per batch file.
inline Dataset load_cifar10(const std::string& dir, const std::string& split) {
  constexpr std::int64_t kRecord = 3073;
  constexpr std::int64_t kPerFile = 10000;
  std::vector<std::string> files;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i)
      files.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
  } else if (split == "test") {
    files.push_back(dir + "/test_batch.bin");
  } else {
    throw DomainError("cifar10 split must be train or test");
  }

  Dataset d;
  d.c = 3;
  d.h = 32;
  d.w = 32;
  d.num_classes = 10;
  d.split = split;
  d.mean = {0.4914f * 255.0f, 0.4822f * 255.0f, 0.4465f * 255.0f};
  d.stdev = {0.2470f * 255.0f, 0.2435f * 255.0f, 0.2616f * 255.0f};

  for (const auto& path : files) {
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    if (ec) throw DataError("missing CIFAR-10 batch " + path);
    if (std::int64_t(size) != kRecord * kPerFile)
      throw IntegrityError(path + ": expected " +
                           std::to_string(kRecord * kPerFile) + " bytes, got " +
                           std::to_string(size));
    auto in = detail::open_binary(path);
    auto rec = std::vector<std::uint8_t>(std::size_t(kRecord));
    for (std::int64_t r = 0; r < kPerFile; ++r) {
      if (!in.read(reinterpret_cast<char*>(rec.data()), kRecord))
        throw IntegrityError(path + ": truncated record");
      if (rec[0] > 9) throw IntegrityError(path + ": label byte out of range");
      d.labels.push_back(int(rec[0]));
      d.images.insert(d.images.end(), rec.begin() + 1, rec.end());
      ++d.n;
    }
  }
  return d;
}

// Deterministic class-conditional Gaussian blobs, linearly separable at full
// precision. Class i%num_classes sits at a fixed angular position; each
// sample adds small positional jitter plus pixel noise.
inline Dataset synthetic_task(std::uint64_t seed, std::int64_t n,
                              int num_classes, std::int64_t hw = 16) {
  if (num_classes < 2) throw DomainError("synthetic_task: need >= 2 classes");
  if (n < num_classes)
    throw DomainError("synthetic_task: n must be >= num_classes");
  Dataset d;
  d.n = n;
  d.c = 1;
  d.h = hw;
  d.w = hw;
  d.num_classes = num_classes;
  d.split = "synthetic";
  d.images.resize(std::size_t(n * hw * hw));
  d.labels.resize(std::size_t(n));

  Rng rng(seed);
  const double r = 0.30 * double(hw);
  const double cx0 = 0.5 * double(hw - 1), cy0 = 0.5 * double(hw - 1);
  const double sigma = double(hw) / 7.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const int cls = int(i % num_classes);
    d.labels[std::size_t(i)] = cls;
    const double ang = 6.283185307179586 * double(cls) / double(num_classes);
    const double cx = cx0 + r * std::cos(ang) + rng.uniform(-0.5, 0.5);
    const double cy = cy0 + r * std::sin(ang) + rng.uniform(-0.5, 0.5);
    for (std::int64_t y = 0; y < hw; ++y)
      for (std::int64_t x = 0; x < hw; ++x) {
        const double dx = double(x) - cx, dy = double(y) - cy;
        double v = 185.0 * std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
        v += 12.0 * rng.gaussian() + 24.0;
        v = std::min(255.0, std::max(0.0, v));
        d.images[std::size_t((i * hw + y) * hw + x)] =
            std::uint8_t(std::lround(v));
      }
  }
  double m = 0.0;
  for (auto px : d.images) m += px;
  m /= double(d.images.size());
  double var = 0.0;
  for (auto px : d.images) var += (double(px) - m) * (double(px) - m);
  var /= double(d.images.size());
  d.mean = {float(m)};
  d.stdev = {float(std::sqrt(var) + 1e-6)};
  return d;
}

inline float normalize_pixel(std::uint8_t raw, float mean, float stdev) {
  return (float(raw) - mean) / stdev;
}

inline float denormalize_pixel(float v, float mean, float stdev) {
  return v * stdev + mean;
}

// ---------------------------------------------------------------------------
// Deterministic batch stream: optional Fisher-Yates shuffle and CIFAR-style
// augmentation (pad-4 random crop + horizontal flip), both driven by the
// stream seed, then per-channel normalization into a float tensor.
// ---------------------------------------------------------------------------

class BatchStream {
 public:
  BatchStream(const Dataset& data, std::int64_t batch_size, std::uint64_t seed,
              bool shuffle, bool augment)
      : data_(&data),
        batch_(batch_size),
        rng_(seed),
        augment_(augment) {
    if (batch_size < 1) throw DomainError("batch_size must be >= 1");
    if (data.n == 0) throw DataError("empty dataset");
    order_.resize(std::size_t(data.n));
    for (std::int64_t i = 0; i < data.n; ++i) order_[std::size_t(i)] = i;
    if (shuffle) rng_.shuffle(order_);
  }

  std::int64_t batches_per_epoch() const {
    return (data_->n + batch_ - 1) / batch_;
  }

  bool next(Tensor& out, std::vector<int>& labels) {
    if (cursor_ >= data_->n) return false;
    const std::int64_t count = std::min(batch_, data_->n - cursor_);
    const std::int64_t C = data_->c, H = data_->h, W = data_->w;
    std::vector<float> buf(std::size_t(count * C * H * W));
    labels.resize(std::size_t(count));
    for (std::int64_t b = 0; b < count; ++b) {
      const std::int64_t idx = order_[std::size_t(cursor_ + b)];
      labels[std::size_t(b)] = data_->labels[std::size_t(idx)];
      const std::uint8_t* src = data_->images.data() + idx * C * H * W;

      int dy = 0, dx = 0;
      bool flip = false;
      if (augment_) {
        dy = int(rng_.bounded(9)) - 4;  // pad-4 random crop
        dx = int(rng_.bounded(9)) - 4;
        flip = rng_.uniform() < 0.5;
      }
      for (std::int64_t c = 0; c < C; ++c) {
        const float mean = data_->mean[std::size_t(c)];
        const float stdev = data_->stdev[std::size_t(c)];
        for (std::int64_t y = 0; y < H; ++y)
          for (std::int64_t x = 0; x < W; ++x) {
            const std::int64_t sy = y + dy;
            std::int64_t sx = flip ? (W - 1 - x) : x;
            sx += dx;
            float v = 0.0f;
            if (sy >= 0 && sy < H && sx >= 0 && sx < W)
              v = (float(src[(c * H + sy) * W + sx]) - mean) / stdev;
            else
              v = (0.0f - mean) / stdev;  // pad with black
            buf[std::size_t(((b * C + c) * H + y) * W + x)] = v;
          }
      }
    }
    cursor_ += count;
    out = Tensor::from_data({count, C, H, W}, std::move(buf));
    return true;
  }

 private:
  const Dataset* data_;
  std::int64_t batch_;
  Rng rng_;
  bool augment_;
  std::vector<std::int64_t> order_;
  std::int64_t cursor_ = 0;
};

}  // namespace msq
