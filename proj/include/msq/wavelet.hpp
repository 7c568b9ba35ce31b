#pragma once

#include <array>
#include <string>

#include "msq/tensor.hpp"

namespace msq {

// ---------------------------------------------------------------------------
// Single-level 2D wavelet block transform over the leading two extents of a
// weight tensor (output-channel x input-channel plane). Trailing extents are
// carried along as independent lanes, so a (Cout,Cin,Kh,Kw) conv weight
// decomposes into four (Cout/2,Cin/2,Kh,Kw) subbands and an (Out,In) linear
// weight into four (Out/2,In/2) subbands.
// ---------------------------------------------------------------------------

// Four 2x2 analysis kernels, stored [band][u*2+v] with band order ll,lh,hl,hh.
struct FilterBank {
  std::array<std::array<float, 4>, 4> f;

  // 2D Haar: every entry +-1/2; orthonormal, so synthesis reuses the same
  // kernels and idwt2(dwt2(x)) reconstructs exactly.
  static FilterBank haar() {
    FilterBank b;
    b.f[0] = {0.5f, 0.5f, 0.5f, 0.5f};    // ll
    b.f[1] = {0.5f, 0.5f, -0.5f, -0.5f};  // lh
    b.f[2] = {0.5f, -0.5f, 0.5f, -0.5f};  // hl
    b.f[3] = {0.5f, -0.5f, -0.5f, 0.5f};  // hh
    return b;
  }
};

struct SubbandSet {
  Tensor ll, lh, hl, hh;

  Tensor& band(int i) {
    switch (i) {
      case 0: return ll;
      case 1: return lh;
      case 2: return hl;
      default: return hh;
    }
  }
  const Tensor& band(int i) const {
    return const_cast<SubbandSet*>(this)->band(i);
  }
};

namespace detail {

struct DwtGeom {
  std::int64_t d0, d1, lanes;  // source extents and trailing-lane count
  Shape sub_shape;
};

inline DwtGeom dwt_geometry(const Shape& shape) {
  if (shape.size() < 2)
    throw GeometryError("dwt2: tensor rank must be >= 2, got " + shape_str(shape));
  DwtGeom g;
  g.d0 = shape[0];
  g.d1 = shape[1];
  if (g.d0 < 2 || g.d1 < 2 || g.d0 % 2 != 0 || g.d1 % 2 != 0)
    throw GeometryError("dwt2: leading extents must be even and >= 2, got " +
                        shape_str(shape));
  g.lanes = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) g.lanes *= shape[i];
  g.sub_shape = shape;
  g.sub_shape[0] = g.d0 / 2;
  g.sub_shape[1] = g.d1 / 2;
  return g;
}

// out(i,j,l) = sum_{u,v} f[u*2+v] * x(2i+u, 2j+v, l)
MSQ_NOINLINE inline void analyze_band(const float* x, const DwtGeom& g,
                                      const std::array<float, 4>& f, float* out) {
  const std::int64_t h0 = g.d0 / 2, h1 = g.d1 / 2, L = g.lanes;
  for (std::int64_t i = 0; i < h0; ++i)
    for (std::int64_t j = 0; j < h1; ++j) {
      const float* a = x + ((2 * i) * g.d1 + 2 * j) * L;
      const float* b = a + L;
      const float* c = x + ((2 * i + 1) * g.d1 + 2 * j) * L;
      const float* d = c + L;
      float* o = out + (i * h1 + j) * L;
      for (std::int64_t l = 0; l < L; ++l)
        o[l] = f[0] * a[l] + f[1] * b[l] + f[2] * c[l] + f[3] * d[l];
    }
}

// x(2i+u, 2j+v, l) += f[u*2+v] * s(i,j,l)
MSQ_NOINLINE inline void synthesize_band_acc(const float* s, const DwtGeom& g,
                                             const std::array<float, 4>& f,
                                             float* x) {
  const std::int64_t h0 = g.d0 / 2, h1 = g.d1 / 2, L = g.lanes;
  for (std::int64_t i = 0; i < h0; ++i)
    for (std::int64_t j = 0; j < h1; ++j) {
      float* a = x + ((2 * i) * g.d1 + 2 * j) * L;
      float* b = a + L;
      float* c = x + ((2 * i + 1) * g.d1 + 2 * j) * L;
      float* d = c + L;
      const float* o = s + (i * h1 + j) * L;
      for (std::int64_t l = 0; l < L; ++l) {
        a[l] += f[0] * o[l];
        b[l] += f[1] * o[l];
        c[l] += f[2] * o[l];
        d[l] += f[3] * o[l];
      }
    }
}

inline Tensor dwt_band(const Tensor& x, const FilterBank& bank, int band) {
  const auto g = dwt_geometry(x.shape());
  std::vector<float> out(std::size_t(shape_numel(g.sub_shape)));
  analyze_band(x.data().data(), g, bank.f[band], out.data());
  const auto f = bank.f[band];
  return make_op("dwt_band", {x}, g.sub_shape, std::move(out),
                 [g, f](TensorNode& n) {
                   // adjoint of the band analysis: scatter with the same kernel
                   synthesize_band_acc(n.grad.data(), g, f,
                                       n.inputs[0]->ensure_grad().data());
                 });
}

}  // namespace detail

inline SubbandSet dwt2(const Tensor& w, const FilterBank& bank = FilterBank::haar()) {
  SubbandSet s;
  for (int b = 0; b < 4; ++b) s.band(b) = detail::dwt_band(w, bank, b);
  return s;
}

inline Tensor idwt2(const SubbandSet& s, const FilterBank& bank = FilterBank::haar()) {
  for (int b = 1; b < 4; ++b)
    if (s.band(b).shape() != s.ll.shape())
      throw DimensionError("idwt2: subband shapes differ, " +
                           shape_str(s.ll.shape()) + " vs " +
                           shape_str(s.band(b).shape()));
  Shape out_shape = s.ll.shape();
  out_shape[0] *= 2;
  out_shape[1] *= 2;
  const auto g = detail::dwt_geometry(out_shape);
  std::vector<float> out(std::size_t(shape_numel(out_shape)), 0.0f);
  for (int b = 0; b < 4; ++b)
    detail::synthesize_band_acc(s.band(b).data().data(), g, bank.f[b], out.data());
  const auto f = bank.f;
  return make_op("idwt2", {s.ll, s.lh, s.hl, s.hh}, out_shape, std::move(out),
                 [g, f](TensorNode& n) {
                   for (int b = 0; b < 4; ++b) {
                     TensorNode* in = n.inputs[b].get();
                     if (!in->requires_grad) continue;
                     detail::analyze_band(n.grad.data(), g, f[b],
                                          in->ensure_grad().data());
                   }
                 });
}

// Per-band scaling with learnable one-element tensors (Eq. alpha^1..alpha^4);
// differentiable in both the subbands and the scales.
inline SubbandSet scale_subbands(const SubbandSet& s, const std::array<Tensor, 4>& alpha) {
  SubbandSet out;
  for (int b = 0; b < 4; ++b) out.band(b) = scale(s.band(b), alpha[b]);
  return out;
}

inline SubbandSet scale_subbands(const SubbandSet& s, const std::array<float, 4>& alpha) {
  SubbandSet out;
  for (int b = 0; b < 4; ++b) out.band(b) = scale(s.band(b), alpha[b]);
  return out;
}

}  // namespace msq
