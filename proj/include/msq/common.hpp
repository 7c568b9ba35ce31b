#pragma once

#include <cstdint>
#include <cstddef>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace msq {

// ---------------------------------------------------------------------------
// Error taxonomy. Every failure mode the library reports maps onto one of
// these; the CLI translates them to process exit codes.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape/dimension mismatch between tensors.
struct DimensionError : Error { using Error::Error; };
// Impossible geometry (non-integral conv output, odd extents for DWT).
struct GeometryError : Error { using Error::Error; };
// Argument outside its admissible domain (bit-width, non-positive clip).
struct DomainError : Error { using Error::Error; };
// API misuse (non-scalar loss, missing gradient, wrong bundle kind).
struct ContractError : Error { using Error::Error; };
// Unparseable file: bad magic, bad version, malformed header/config.
struct FormatError : Error { using Error::Error; };
// Structurally valid file with inconsistent content (truncation, size lies).
struct IntegrityError : Error { using Error::Error; };
// Requested bit-width not in the model's candidate set.
struct CandidateError : Error { using Error::Error; };
// Dataset-level problems (missing files, count mismatches).
struct DataError : Error { using Error::Error; };
// NaN/Inf encountered where finite values are guaranteed.
struct NumericalError : Error { using Error::Error; };

// ---------------------------------------------------------------------------
// Deterministic RNG. xoshiro256** with splitmix64 seeding; all distributions
// are hand-rolled so draw sequences are identical across compilers (std::
// distributions are implementation-defined).
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) {
      x += 0x9e3779b97f4a7c15ull;
      std::uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
      s = z ^ (z >> 31);
    }
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  float uniform_float() { return float(uniform()); }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection-sampled, unbiased.
  std::uint64_t bounded(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller (one value per call; cached pair unused
  // on purpose so the draw count is predictable).
  double gaussian() {
    double u1 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[bounded(i)]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }
  std::uint64_t state_[4];
};

// ---------------------------------------------------------------------------
// FNV-1a 64-bit, used for state-isolation checks and content hashes.
// ---------------------------------------------------------------------------

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

template <typename T>
std::uint64_t fnv1a_span(const std::vector<T>& v, std::uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a(v.data(), v.size() * sizeof(T), h);
}

inline std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

}  // namespace msq
