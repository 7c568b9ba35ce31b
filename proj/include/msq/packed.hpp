#pragma once

#include <bit>

#include "msq/tensor.hpp"

namespace msq {

// ---------------------------------------------------------------------------
// Bit-packed low-bit linear algebra. Weights carry signed codes (k=1: {-1,+1},
// k=2: {-1,0,+1}) stored as a positive/negative plane pair; activations carry
// unsigned codes {0..2^k-1} stored as one bit-plane per bit. Rows are packed
// along the reduction dimension into 64-bit words with zeroed padding, so a
// dot product is a handful of AND + popcount word operations:
//
//   acc(i,j) = sum_p 2^p * (popcount(pos_i & a_pj) - popcount(neg_i & a_pj))
//
// All arithmetic stays in integers until the single final scale multiply:
//   value = scale_w * scale_a * acc.
//
// PACT activations are unsigned, which is why the kernel is AND/popcount
// rather than the XNOR form used when both operands are +-1.
// ---------------------------------------------------------------------------

enum class PackKind { weights, activations };

struct PackedMatrix {
  std::int64_t rows = 0, cols = 0;
  int bits = 1;
  PackKind kind = PackKind::weights;
  std::int64_t words_per_row = 0;
  // plane-major: planes[p * rows * words_per_row + r * words_per_row + w]
  std::vector<std::uint64_t> planes;
  float scale = 1.0f;

  int plane_count() const { return kind == PackKind::weights ? 2 : bits; }

  const std::uint64_t* plane_row(int plane, std::int64_t row) const {
    return planes.data() + (std::int64_t(plane) * rows + row) * words_per_row;
  }
  std::uint64_t* plane_row(int plane, std::int64_t row) {
    return planes.data() + (std::int64_t(plane) * rows + row) * words_per_row;
  }
};

inline PackedMatrix pack(const std::vector<int>& codes, std::int64_t rows,
                         std::int64_t cols, int bits, PackKind kind,
                         float scale = 1.0f) {
  if (bits != 1 && bits != 2)
    throw DomainError("pack: packed kernels support k in {1,2}, got " +
                      std::to_string(bits));
  if (std::int64_t(codes.size()) != rows * cols)
    throw DimensionError("pack: code count != rows*cols");

  PackedMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.bits = bits;
  m.kind = kind;
  m.scale = scale;
  m.words_per_row = (cols + 63) / 64;
  m.planes.assign(std::size_t(m.plane_count() * rows * m.words_per_row), 0);

  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      const int v = codes[std::size_t(r * cols + c)];
      const std::int64_t word = c / 64;
      const std::uint64_t bit = 1ull << (c % 64);
      if (kind == PackKind::weights) {
        if (bits == 1) {
          if (v != -1 && v != 1)
            throw DomainError("pack: 1-bit weight code must be +-1, got " +
                              std::to_string(v));
          if (v > 0) m.plane_row(0, r)[word] |= bit;  // pos
          else m.plane_row(1, r)[word] |= bit;        // neg
        } else {
          if (v < -1 || v > 1)
            throw DomainError("pack: 2-bit weight code must be in {-1,0,1}, got " +
                              std::to_string(v));
          if (v > 0) m.plane_row(0, r)[word] |= bit;
          if (v < 0) m.plane_row(1, r)[word] |= bit;
        }
      } else {
        if (v < 0 || v >= (1 << bits))
          throw DomainError("pack: activation code out of range, got " +
                            std::to_string(v));
        for (int p = 0; p < bits; ++p)
          if (v & (1 << p)) m.plane_row(p, r)[word] |= bit;
      }
    }
  }
  return m;
}

inline std::vector<int> unpack(const PackedMatrix& m) {
  std::vector<int> codes(std::size_t(m.rows * m.cols), 0);
  for (std::int64_t r = 0; r < m.rows; ++r)
    for (std::int64_t c = 0; c < m.cols; ++c) {
      const std::int64_t word = c / 64;
      const std::uint64_t bit = 1ull << (c % 64);
      int v = 0;
      if (m.kind == PackKind::weights) {
        if (m.plane_row(0, r)[word] & bit) v = 1;
        else if (m.plane_row(1, r)[word] & bit) v = -1;
        else v = 0;  // only reachable for 2-bit weights
        if (m.bits == 1 && v == 0)
          throw ContractError("unpack: 1-bit weight plane pair is inconsistent");
      } else {
        for (int p = 0; p < m.bits; ++p)
          if (m.plane_row(p, r)[word] & bit) v |= 1 << p;
      }
      codes[std::size_t(r * m.cols + c)] = v;
    }
  return codes;
}

// The literal 1-bit formulation: acc = popcount(w_pos AND a) -
// popcount(NOT(w_pos) AND a). Relies on zeroed padding in `a` to neutralize
// the complemented tail bits.
inline std::vector<std::int32_t> packed_dot_1bit(const PackedMatrix& w,
                                                 const PackedMatrix& a) {
  if (w.kind != PackKind::weights || w.bits != 1)
    throw DomainError("packed_dot_1bit: first operand must be 1-bit weights");
  if (a.kind != PackKind::activations || a.bits != 1)
    throw DomainError("packed_dot_1bit: second operand must be 1-bit activations");
  if (w.cols != a.cols)
    throw DimensionError("packed_dot_1bit: inner dimensions differ");
  std::vector<std::int32_t> acc(std::size_t(w.rows * a.rows), 0);
  const std::int64_t words = w.words_per_row;
  for (std::int64_t i = 0; i < w.rows; ++i) {
    const std::uint64_t* pos = w.plane_row(0, i);
    for (std::int64_t j = 0; j < a.rows; ++j) {
      const std::uint64_t* av = a.plane_row(0, j);
      std::int32_t s = 0;
      for (std::int64_t t = 0; t < words; ++t)
        s += std::int32_t(std::popcount(pos[t] & av[t])) -
             std::int32_t(std::popcount(~pos[t] & av[t]));
      acc[std::size_t(i * a.rows + j)] = s;
    }
  }
  return acc;
}

// General k in {1,2} integer kernel. Both operands are packed along their
// cols (the reduction dimension); the output is [w.rows, a.rows].
//
// 1-bit weights have neg == ~pos on the valid bits, so popcount(neg & a) ==
// popcount(a) - popcount(pos & a); per-row activation popcounts amortize over
// all weight rows and the inner loop drops to one AND+popcount per word.
MSQ_NOINLINE inline void packed_matmul_acc_kernel(const PackedMatrix& w,
                                                  const PackedMatrix& a,
                                                  std::int32_t* acc) {
  const std::int64_t words = w.words_per_row;
  if (w.bits == 1) {
    std::vector<std::int32_t> row_pc(std::size_t(a.rows * a.bits));
    for (std::int64_t j = 0; j < a.rows; ++j)
      for (int p = 0; p < a.bits; ++p) {
        const std::uint64_t* av = a.plane_row(p, j);
        std::int32_t s = 0;
        for (std::int64_t t = 0; t < words; ++t)
          s += std::int32_t(std::popcount(av[t]));
        row_pc[std::size_t(j * a.bits + p)] = s;
      }
    for (std::int64_t i = 0; i < w.rows; ++i) {
      const std::uint64_t* pos = w.plane_row(0, i);
      for (std::int64_t j = 0; j < a.rows; ++j) {
        std::int32_t s = 0;
        for (int p = 0; p < a.bits; ++p) {
          const std::uint64_t* av = a.plane_row(p, j);
          std::int32_t pos_sum = 0;
          for (std::int64_t t = 0; t < words; ++t)
            pos_sum += std::int32_t(std::popcount(pos[t] & av[t]));
          s += (2 * pos_sum - row_pc[std::size_t(j * a.bits + p)]) << p;
        }
        acc[i * a.rows + j] = s;
      }
    }
    return;
  }
  for (std::int64_t i = 0; i < w.rows; ++i) {
    const std::uint64_t* pos = w.plane_row(0, i);
    const std::uint64_t* neg = w.plane_row(1, i);
    for (std::int64_t j = 0; j < a.rows; ++j) {
      std::int32_t s = 0;
      for (int p = 0; p < a.bits; ++p) {
        const std::uint64_t* av = a.plane_row(p, j);
        std::int32_t plane_sum = 0;
        for (std::int64_t t = 0; t < words; ++t)
          plane_sum += std::int32_t(std::popcount(pos[t] & av[t])) -
                       std::int32_t(std::popcount(neg[t] & av[t]));
        s += plane_sum << p;
      }
      acc[i * a.rows + j] = s;
    }
  }
}

inline std::vector<std::int32_t> packed_matmul_acc(const PackedMatrix& w,
                                                   const PackedMatrix& a) {
  if (w.kind != PackKind::weights || a.kind != PackKind::activations)
    throw DomainError("packed_matmul: want (weights, activations)");
  if (w.cols != a.cols)
    throw DimensionError("packed_matmul: inner dimensions differ, " +
                         std::to_string(w.cols) + " vs " + std::to_string(a.cols));
  std::vector<std::int32_t> acc(std::size_t(w.rows * a.rows));
  packed_matmul_acc_kernel(w, a, acc.data());
  return acc;
}

// Scaled result: out[i,j] = scale_w * scale_a * acc[i,j].
inline Tensor packed_matmul(const PackedMatrix& w, const PackedMatrix& a) {
  auto acc = packed_matmul_acc(w, a);
  const float s = w.scale * a.scale;
  std::vector<float> out(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = s * float(acc[i]);
  return Tensor::from_data({w.rows, a.rows}, std::move(out));
}

}  // namespace msq
