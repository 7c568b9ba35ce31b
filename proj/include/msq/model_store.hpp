#pragma once

#include <bit>
#include <chrono>
#include <fstream>

#include <json.hpp>

#include "msq/net.hpp"

namespace msq {

static_assert(std::endian::native == std::endian::little,
              "bundle payloads are little-endian");

// ---------------------------------------------------------------------------
// .msq container: "MSQ1" magic, u32 version, u32 header length, JSON header
// (architecture, candidate set, tensor table), zero padding, then raw f32 /
// packed-code payload blobs at 64-byte-aligned offsets.
// ---------------------------------------------------------------------------

constexpr char kBundleMagic[4] = {'M', 'S', 'Q', '1'};
constexpr std::uint32_t kBundleVersion = 1;
constexpr std::int64_t kPayloadAlign = 64;

namespace storedetail {

struct TensorRecord {
  std::string name;
  std::string dtype;  // "f32" or "codes<k>"
  Shape shape;
  std::int64_t offset = 0;  // relative to payload base
  std::int64_t bytes = 0;
};

inline nlohmann::json flags_to_json(const FeatureFlags& f) {
  return {{"per_k_act_quant", f.per_k_act_quant},
          {"per_k_bn", f.per_k_bn},
          {"per_k_weight_quant", f.per_k_weight_quant},
          {"subband_scales", f.subband_scales}};
}

inline FeatureFlags flags_from_json(const nlohmann::json& j) {
  FeatureFlags f;
  f.per_k_act_quant = j.at("per_k_act_quant").get<bool>();
  f.per_k_bn = j.at("per_k_bn").get<bool>();
  f.per_k_weight_quant = j.at("per_k_weight_quant").get<bool>();
  f.subband_scales = j.at("subband_scales").get<bool>();
  return f;
}

inline nlohmann::json arch_to_json(const ModelConfig& cfg) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : cfg.stages)
    stages.push_back({{"channels", s.channels}, {"stride", s.stride}});
  return {{"in_channels", cfg.in_channels},
          {"image_hw", cfg.image_hw},
          {"num_classes", cfg.num_classes},
          {"stem_channels", cfg.stem_channels},
          {"stages", stages},
          {"candidates", cfg.candidates.bits},
          {"flags", flags_to_json(cfg.flags)},
          {"bn_momentum", cfg.bn_momentum},
          {"bn_eps", cfg.bn_eps},
          {"init_seed", cfg.init_seed}};
}

inline ModelConfig arch_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.in_channels = j.at("in_channels").get<std::int64_t>();
  cfg.image_hw = j.at("image_hw").get<std::int64_t>();
  cfg.num_classes = j.at("num_classes").get<std::int64_t>();
  cfg.stem_channels = j.at("stem_channels").get<std::int64_t>();
  cfg.stages.clear();
  for (const auto& s : j.at("stages"))
    cfg.stages.push_back(
        {s.at("channels").get<std::int64_t>(), s.at("stride").get<int>()});
  cfg.candidates = CandidateSet::make(j.at("candidates").get<std::vector<int>>());
  cfg.flags = flags_from_json(j.at("flags"));
  cfg.bn_momentum = j.at("bn_momentum").get<float>();
  cfg.bn_eps = j.at("bn_eps").get<float>();
  cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  return cfg;
}

// (name, live data view) pairs in a fixed deterministic order. Running BN
// statistics ride along as ordinary f32 tensors.
struct NamedBlob {
  std::string name;
  Shape shape;
  const float* data;
  std::int64_t count;
  float* mutable_data;  // set on the load side
};

template <typename Model>
std::vector<NamedBlob> enumerate_tensors(Model& model) {
  std::vector<NamedBlob> out;
  auto add_tensor = [&out](const std::string& name, const Tensor& t) {
    auto* node = t.node();
    out.push_back({name, node->shape, node->data.data(),
                   std::int64_t(node->data.size()), node->data.data()});
  };
  auto add_vec = [&out](const std::string& name, std::vector<float>& v) {
    out.push_back({name, {std::int64_t(v.size())}, v.data(),
                   std::int64_t(v.size()), v.data()});
  };

  add_tensor("stem.W", model.stem_W);
  add_tensor("stem.wq_beta", model.stem_wq.beta);
  const auto& K = model.cfg.candidates.bits;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    auto& blk = model.blocks[i];
    const std::string base = "block" + std::to_string(i);
    add_tensor(base + ".W", blk.W);
    for (std::size_t ti = 0; ti < K.size(); ++ti) {
      const std::string kb = base + ".k" + std::to_string(K[ti]);
      for (int b = 0; b < 4; ++b)
        add_tensor(kb + ".alpha" + std::to_string(b), blk.alpha[ti][std::size_t(b)]);
      add_tensor(kb + ".wq_beta", blk.wq[ti].beta);
      add_tensor(kb + ".aq_clip", blk.aq[ti].clip);
      auto& bank = blk.bn.bank(ti);
      add_tensor(kb + ".bn.gamma", bank.gamma);
      add_tensor(kb + ".bn.shift", bank.shift);
      add_vec(kb + ".bn.run_mean", bank.run_mean);
      add_vec(kb + ".bn.run_var", bank.run_var);
    }
  }
  for (std::size_t ti = 0; ti < K.size(); ++ti) {
    const std::string kb = "head.k" + std::to_string(K[ti]);
    auto& bank = model.head_bn.bank(ti);
    add_tensor(kb + ".bn.gamma", bank.gamma);
    add_tensor(kb + ".bn.shift", bank.shift);
    add_vec(kb + ".bn.run_mean", bank.run_mean);
    add_vec(kb + ".bn.run_var", bank.run_var);
  }
  add_tensor("head.aq_clip", model.head_aq.clip);
  add_tensor("fc.W", model.fc_W);
  add_tensor("fc.b", model.fc_b);
  add_tensor("fc.wq_beta", model.fc_wq.beta);
  return out;
}

inline std::int64_t align_up(std::int64_t v, std::int64_t a) {
  return (v + a - 1) / a * a;
}

inline void write_file(const std::string& path, const nlohmann::json& header,
                       const std::vector<std::pair<TensorRecord,
                                                   std::vector<std::uint8_t>>>& blobs) {
  nlohmann::json h = header;
  h["tensors"] = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& [rec, bytes] : blobs) {
    nlohmann::json t = {{"name", rec.name},
                        {"dtype", rec.dtype},
                        {"shape", rec.shape},
                        {"offset", offset},
                        {"bytes", std::int64_t(bytes.size())}};
    h["tensors"].push_back(t);
    offset = align_up(offset + std::int64_t(bytes.size()), kPayloadAlign);
  }

  const std::string htext = h.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write(kBundleMagic, 4);
  const std::uint32_t version = kBundleVersion;
  const std::uint32_t hlen = std::uint32_t(htext.size());
  out.write(reinterpret_cast<const char*>(&version), 4);
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(htext.data(), std::streamsize(htext.size()));

  const std::int64_t payload_base = align_up(12 + std::int64_t(htext.size()),
                                             kPayloadAlign);
  std::int64_t pos = 12 + std::int64_t(htext.size());
  auto pad_to = [&](std::int64_t target) {
    static const char zeros[kPayloadAlign] = {};
    while (pos < target) {
      const std::int64_t n = std::min<std::int64_t>(kPayloadAlign, target - pos);
      out.write(zeros, n);
      pos += n;
    }
  };
  std::int64_t rel = 0;
  for (const auto& [rec, bytes] : blobs) {
    pad_to(payload_base + rel);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              std::streamsize(bytes.size()));
    pos += std::int64_t(bytes.size());
    rel = align_up(rel + std::int64_t(bytes.size()), kPayloadAlign);
  }
  if (!out) throw DataError("write failure on " + path);
}

struct RawFile {
  nlohmann::json header;
  std::vector<TensorRecord> tensors;
  std::vector<std::uint8_t> payload;  // from payload base to EOF

  const TensorRecord& find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw IntegrityError("bundle is missing tensor " + name);
  }

  const std::uint8_t* bytes_of(const TensorRecord& rec) const {
    if (rec.offset < 0 || rec.offset + rec.bytes > std::int64_t(payload.size()))
      throw IntegrityError("tensor " + rec.name + " extends past end of file");
    return payload.data() + rec.offset;
  }
};

inline RawFile read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4)) throw FormatError(path + ": file too short for magic");
  if (std::memcmp(magic, kBundleMagic, 4) != 0)
    throw FormatError(path + ": bad magic, not an .msq bundle");
  std::uint32_t version = 0, hlen = 0;
  if (!in.read(reinterpret_cast<char*>(&version), 4) ||
      !in.read(reinterpret_cast<char*>(&hlen), 4))
    throw FormatError(path + ": truncated fixed header");
  if (version != kBundleVersion)
    throw FormatError(path + ": unsupported bundle version " +
                      std::to_string(version));
  std::string htext(hlen, '\0');
  if (!in.read(htext.data(), hlen))
    throw FormatError(path + ": truncated JSON header");

  RawFile f;
  try {
    f.header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed header: " + e.what());
  }
  try {
    for (const auto& t : f.header.at("tensors")) {
      TensorRecord rec;
      rec.name = t.at("name").get<std::string>();
      rec.dtype = t.at("dtype").get<std::string>();
      rec.shape = t.at("shape").get<Shape>();
      rec.offset = t.at("offset").get<std::int64_t>();
      rec.bytes = t.at("bytes").get<std::int64_t>();
      f.tensors.push_back(std::move(rec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed tensor table: " + e.what());
  }

  const std::int64_t payload_base = align_up(12 + std::int64_t(hlen),
                                             kPayloadAlign);
  in.seekg(0, std::ios::end);
  const std::int64_t fsize = in.tellg();
  if (fsize < payload_base)
    throw IntegrityError(path + ": payload missing");
  f.payload.resize(std::size_t(fsize - payload_base));
  in.seekg(payload_base);
  if (!f.payload.empty() &&
      !in.read(reinterpret_cast<char*>(f.payload.data()),
               std::streamsize(f.payload.size())))
    throw IntegrityError(path + ": truncated payload");
  return f;
}

}  // namespace storedetail

// ---------------------------------------------------------------------------
// Training-bundle save/load (bit-exact round trip)
// ---------------------------------------------------------------------------

inline void save_bundle(const ModelGraph& model, const std::string& path,
                        nlohmann::json meta = {}, bool with_checksum = false) {
  auto& mutable_model = const_cast<ModelGraph&>(model);  // read-only access
  auto blobs_view = storedetail::enumerate_tensors(mutable_model);
  std::vector<std::pair<storedetail::TensorRecord, std::vector<std::uint8_t>>> blobs;
  std::uint64_t payload_hash = 0xcbf29ce484222325ull;
  for (const auto& b : blobs_view) {
    storedetail::TensorRecord rec;
    rec.name = b.name;
    rec.dtype = "f32";
    rec.shape = b.shape;
    std::vector<std::uint8_t> bytes(std::size_t(b.count) * 4);
    std::memcpy(bytes.data(), b.data, bytes.size());
    payload_hash = fnv1a(bytes.data(), bytes.size(), payload_hash);
    blobs.emplace_back(std::move(rec), std::move(bytes));
  }
  nlohmann::json header = {{"format", "msq-bundle"},
                           {"kind", "train"},
                           {"arch", storedetail::arch_to_json(model.cfg)},
                           {"meta", std::move(meta)}};
  if (with_checksum) header["payload_fnv1a"] = payload_hash;
  storedetail::write_file(path, header, blobs);
}

struct LoadedBundle {
  ModelGraph model;
  nlohmann::json meta;
};

inline LoadedBundle load_bundle(const std::string& path) {
  auto f = storedetail::read_file(path);
  if (!f.header.contains("kind") || f.header.at("kind") != "train")
    throw ContractError(path + ": not a training bundle");
  ModelConfig cfg;
  try {
    cfg = storedetail::arch_from_json(f.header.at("arch"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed arch: " + e.what());
  }

  LoadedBundle out{ModelGraph(cfg), f.header.value("meta", nlohmann::json{})};
  auto blobs = storedetail::enumerate_tensors(out.model);
  std::uint64_t payload_hash = 0xcbf29ce484222325ull;
  for (auto& b : blobs) {
    const auto& rec = f.find(b.name);
    if (rec.dtype != "f32")
      throw IntegrityError(path + ": tensor " + b.name + " has dtype " + rec.dtype);
    if (rec.shape != b.shape)
      throw IntegrityError(path + ": tensor " + b.name + " has shape " +
                           shape_str(rec.shape) + ", expected " +
                           shape_str(b.shape));
    if (rec.bytes != b.count * 4)
      throw IntegrityError(path + ": tensor " + b.name + " byte count mismatch");
    const auto* src = f.bytes_of(rec);
    payload_hash = fnv1a(src, std::size_t(rec.bytes), payload_hash);
    std::memcpy(b.mutable_data, src, std::size_t(rec.bytes));
  }
  if (f.header.contains("payload_fnv1a") &&
      f.header.at("payload_fnv1a").get<std::uint64_t>() != payload_hash)
    throw IntegrityError(path + ": payload checksum mismatch");
  return out;
}

// ---------------------------------------------------------------------------
// Hot swap: load -> DWT -> scale -> IDWT -> quantize, materialized into a
// fixed-bit-width inference model (integer codes + scales, folded BN).
// ---------------------------------------------------------------------------

struct MaterializedConv {
  std::vector<std::int8_t> codes;
  Shape wshape;
  float step = 1.0f;
  int weight_bits = 8;
  int stride = 1, pad = 0;
  bool has_bn = false;
  std::vector<float> bn_a, bn_b;
  bool has_act = false;
  float act_clip = 1.0f;
  int act_bits = 8;
};

struct MaterializedModel {
  int bits = 8;
  std::int64_t in_channels = 1, image_hw = 28, num_classes = 10;
  std::vector<MaterializedConv> convs;  // stem first
  std::vector<float> head_a, head_b;
  float head_clip = 1.0f;
  std::vector<std::int8_t> fc_codes;
  Shape fc_shape;  // (Out, In)
  float fc_step = 1.0f;
  std::vector<float> fc_bias;

  EvalPipeline pipeline;  // dequantized weights, built once

  Tensor eval(const Tensor& x) const { return pipeline.run(x); }

  void rebuild_pipeline() {
    pipeline = EvalPipeline{};
    for (const auto& mc : convs) {
      EvalConvStep step;
      std::vector<float> w(mc.codes.size());
      for (std::size_t i = 0; i < w.size(); ++i)
        w[i] = float(mc.codes[i]) * mc.step;
      step.W = Tensor::from_data(mc.wshape, std::move(w));
      step.stride = mc.stride;
      step.pad = mc.pad;
      step.has_bn = mc.has_bn;
      if (mc.has_bn) {
        step.bn_a = std::make_shared<std::vector<float>>(mc.bn_a);
        step.bn_b = std::make_shared<std::vector<float>>(mc.bn_b);
      }
      step.has_act_quant = mc.has_act;
      step.act_clip = Tensor::scalar(mc.act_clip);
      step.act_bits = mc.act_bits;
      pipeline.convs.push_back(std::move(step));
    }
    pipeline.head_a = std::make_shared<std::vector<float>>(head_a);
    pipeline.head_b = std::make_shared<std::vector<float>>(head_b);
    pipeline.head_quant = true;
    pipeline.head_clip = Tensor::scalar(head_clip);
    std::vector<float> fw(fc_codes.size());
    for (std::size_t i = 0; i < fw.size(); ++i)
      fw[i] = float(fc_codes[i]) * fc_step;
    pipeline.fc_W =
        transpose2d(Tensor::from_data(fc_shape, std::move(fw))).detached_copy();
    pipeline.fc_b = Tensor::from_data({std::int64_t(fc_bias.size())}, fc_bias);
  }
};

namespace storedetail {

inline void extract_codes(const std::vector<float>& w, float beta, int bits,
                          std::vector<std::int8_t>& codes, float& step) {
  codes.resize(w.size());
  if (bits == 1) {
    step = beta;
    for (std::size_t i = 0; i < w.size(); ++i)
      codes[i] = w[i] < 0.0f ? std::int8_t(-1) : std::int8_t(1);
    return;
  }
  const float q = float(weight_levels(bits));
  step = beta / q;
  for (std::size_t i = 0; i < w.size(); ++i) {
    float c = w[i];
    if (c > beta) c = beta;
    if (c < -beta) c = -beta;
    codes[i] = std::int8_t(std::lround(c * q / beta));
  }
}

}  // namespace storedetail

// Materializes candidate k. Returns the model and the transform wall time in
// seconds. Reads only {W} + theta_k; never mutates the source model.
inline std::pair<MaterializedModel, double> hot_swap(const ModelGraph& model,
                                                     int k) {
  const auto t0 = std::chrono::steady_clock::now();
  NoGradGuard ng;
  const std::size_t ti = model.cfg.candidates.index_of(k);

  MaterializedModel mat;
  mat.bits = k;
  mat.in_channels = model.cfg.in_channels;
  mat.image_hw = model.cfg.image_hw;
  mat.num_classes = model.cfg.num_classes;

  MaterializedConv stem;
  storedetail::extract_codes(model.stem_W.data(), model.stem_wq.beta.item(), 8,
                             stem.codes, stem.step);
  stem.wshape = model.stem_W.shape();
  stem.weight_bits = 8;
  stem.stride = 1;
  stem.pad = 1;
  mat.convs.push_back(std::move(stem));

  for (const auto& blk : model.blocks) {
    MaterializedConv mc;
    Tensor recon = blk.reconstruct(ti);
    storedetail::extract_codes(recon.data(), blk.wq[ti].beta.item(), k, mc.codes,
                               mc.step);
    mc.wshape = blk.W.shape();
    mc.weight_bits = k;
    mc.stride = blk.stride;
    mc.pad = blk.pad;
    mc.has_bn = true;
    const auto& bank = blk.bn.bank(ti);
    bn_fold(bank.gamma.data(), bank.shift.data(), bank.run_mean, bank.run_var,
            blk.bn.eps, mc.bn_a, mc.bn_b);
    mc.has_act = true;
    mc.act_clip = blk.aq[ti].clip.item();
    mc.act_bits = k;
    mat.convs.push_back(std::move(mc));
  }

  const auto& hb = model.head_bn.bank(ti);
  bn_fold(hb.gamma.data(), hb.shift.data(), hb.run_mean, hb.run_var,
          model.head_bn.eps, mat.head_a, mat.head_b);
  mat.head_clip = model.head_aq.clip.item();
  storedetail::extract_codes(model.fc_W.data(), model.fc_wq.beta.item(), 8,
                             mat.fc_codes, mat.fc_step);
  mat.fc_shape = model.fc_W.shape();
  mat.fc_bias = model.fc_b.data();

  mat.rebuild_pipeline();
  const auto t1 = std::chrono::steady_clock::now();
  return {std::move(mat),
          std::chrono::duration<double>(t1 - t0).count()};
}

// ---------------------------------------------------------------------------
// Materialized export/import: integer codes bit-packed k to the byte, plus
// scales and folded-BN affine parameters, in the same container with the
// "materialized" kind flag.
// ---------------------------------------------------------------------------

namespace storedetail {

// Unsigned on-disk encoding: u = m + q for k >= 2 (q = 2^(k-1)-1), u = (m+1)/2
// for k = 1. Bits laid out LSB-first at position index*k.
inline std::vector<std::uint8_t> pack_codes(const std::vector<std::int8_t>& codes,
                                            int bits) {
  const std::int64_t total_bits = std::int64_t(codes.size()) * bits;
  std::vector<std::uint8_t> out(std::size_t((total_bits + 7) / 8), 0);
  const int q = bits == 1 ? 0 : weight_levels(bits);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const std::uint32_t u = bits == 1 ? std::uint32_t((codes[i] + 1) / 2)
                                      : std::uint32_t(int(codes[i]) + q);
    const std::int64_t bit = std::int64_t(i) * bits;
    for (int b = 0; b < bits; ++b)
      if (u & (1u << b))
        out[std::size_t((bit + b) / 8)] |= std::uint8_t(1u << ((bit + b) % 8));
  }
  return out;
}

inline std::vector<std::int8_t> unpack_codes(const std::uint8_t* bytes,
                                             std::int64_t nbytes,
                                             std::int64_t count, int bits) {
  if ((count * bits + 7) / 8 != nbytes)
    throw IntegrityError("packed code payload has wrong size");
  auto out = std::vector<std::int8_t>(std::size_t(count));
  const int q = bits == 1 ? 0 : weight_levels(bits);
  for (std::int64_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    const std::int64_t bit = i * bits;
    for (int b = 0; b < bits; ++b)
      if (bytes[(bit + b) / 8] & (1u << ((bit + b) % 8))) u |= 1u << b;
    out[std::size_t(i)] =
        bits == 1 ? std::int8_t(int(u) * 2 - 1) : std::int8_t(int(u) - q);
  }
  return out;
}

inline std::vector<std::uint8_t> f32_bytes(const std::vector<float>& v) {
  std::vector<std::uint8_t> out(v.size() * 4);
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

}  // namespace storedetail

inline void export_quantized(const MaterializedModel& mat, const std::string& path) {
  using storedetail::TensorRecord;
  std::vector<std::pair<TensorRecord, std::vector<std::uint8_t>>> blobs;
  auto add = [&blobs](const std::string& name, const std::string& dtype,
                      Shape shape, std::vector<std::uint8_t> bytes) {
    TensorRecord rec;
    rec.name = name;
    rec.dtype = dtype;
    rec.shape = std::move(shape);
    blobs.emplace_back(std::move(rec), std::move(bytes));
  };

  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t i = 0; i < mat.convs.size(); ++i) {
    const auto& mc = mat.convs[i];
    const std::string base = "layer" + std::to_string(i);
    add(base + ".codes", "codes" + std::to_string(mc.weight_bits), mc.wshape,
        storedetail::pack_codes(mc.codes, mc.weight_bits));
    add(base + ".step", "f32", {1}, storedetail::f32_bytes({mc.step}));
    if (mc.has_bn) {
      add(base + ".bn_a", "f32", {std::int64_t(mc.bn_a.size())},
          storedetail::f32_bytes(mc.bn_a));
      add(base + ".bn_b", "f32", {std::int64_t(mc.bn_b.size())},
          storedetail::f32_bytes(mc.bn_b));
    }
    if (mc.has_act)
      add(base + ".act_clip", "f32", {1}, storedetail::f32_bytes({mc.act_clip}));
    layers.push_back({{"weight_bits", mc.weight_bits},
                      {"stride", mc.stride},
                      {"pad", mc.pad},
                      {"has_bn", mc.has_bn},
                      {"has_act", mc.has_act},
                      {"act_bits", mc.act_bits}});
  }
  add("head.bn_a", "f32", {std::int64_t(mat.head_a.size())},
      storedetail::f32_bytes(mat.head_a));
  add("head.bn_b", "f32", {std::int64_t(mat.head_b.size())},
      storedetail::f32_bytes(mat.head_b));
  add("head.act_clip", "f32", {1}, storedetail::f32_bytes({mat.head_clip}));
  add("fc.codes", "codes8", mat.fc_shape,
      storedetail::pack_codes(mat.fc_codes, 8));
  add("fc.step", "f32", {1}, storedetail::f32_bytes({mat.fc_step}));
  add("fc.b", "f32", {std::int64_t(mat.fc_bias.size())},
      storedetail::f32_bytes(mat.fc_bias));

  nlohmann::json header = {{"format", "msq-bundle"},
                           {"kind", "materialized"},
                           {"materialized_bits", mat.bits},
                           {"in_channels", mat.in_channels},
                           {"image_hw", mat.image_hw},
                           {"num_classes", mat.num_classes},
                           {"layers", layers}};
  storedetail::write_file(path, header, blobs);
}

inline MaterializedModel import_materialized(const std::string& path) {
  auto f = storedetail::read_file(path);
  if (!f.header.contains("kind") || f.header.at("kind") != "materialized")
    throw ContractError(path + ": not a materialized bundle");

  MaterializedModel mat;
  mat.bits = f.header.at("materialized_bits").get<int>();
  mat.in_channels = f.header.at("in_channels").get<std::int64_t>();
  mat.image_hw = f.header.at("image_hw").get<std::int64_t>();
  mat.num_classes = f.header.at("num_classes").get<std::int64_t>();

  auto read_f32 = [&f](const std::string& name) {
    const auto& rec = f.find(name);
    std::vector<float> out(std::size_t(rec.bytes / 4));
    std::memcpy(out.data(), f.bytes_of(rec), std::size_t(rec.bytes));
    return out;
  };

  const auto& layers = f.header.at("layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& lj = layers[i];
    const std::string base = "layer" + std::to_string(i);
    MaterializedConv mc;
    mc.weight_bits = lj.at("weight_bits").get<int>();
    mc.stride = lj.at("stride").get<int>();
    mc.pad = lj.at("pad").get<int>();
    mc.has_bn = lj.at("has_bn").get<bool>();
    mc.has_act = lj.at("has_act").get<bool>();
    mc.act_bits = lj.at("act_bits").get<int>();
    const auto& rec = f.find(base + ".codes");
    mc.wshape = rec.shape;
    mc.codes = storedetail::unpack_codes(f.bytes_of(rec), rec.bytes,
                                         shape_numel(rec.shape), mc.weight_bits);
    mc.step = read_f32(base + ".step").at(0);
    if (mc.has_bn) {
      mc.bn_a = read_f32(base + ".bn_a");
      mc.bn_b = read_f32(base + ".bn_b");
    }
    if (mc.has_act) mc.act_clip = read_f32(base + ".act_clip").at(0);
    mat.convs.push_back(std::move(mc));
  }
  mat.head_a = read_f32("head.bn_a");
  mat.head_b = read_f32("head.bn_b");
  mat.head_clip = read_f32("head.act_clip").at(0);
  const auto& fcrec = f.find("fc.codes");
  mat.fc_shape = fcrec.shape;
  mat.fc_codes = storedetail::unpack_codes(f.bytes_of(fcrec), fcrec.bytes,
                                           shape_numel(fcrec.shape), 8);
  mat.fc_step = read_f32("fc.step").at(0);
  mat.fc_bias = read_f32("fc.b");
  mat.rebuild_pipeline();
  return mat;
}

}  // namespace msq
