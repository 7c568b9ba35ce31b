#pragma once

#include <cmath>

#include "msq/tensor.hpp"

namespace msq {

// ---------------------------------------------------------------------------
// Uniform quantizers with per-candidate learnable clipping.
//
// Weights: symmetric grid. For k >= 2,
//     w_hat = round(clip(w,-beta,beta) * q / beta) * beta / q,  q = 2^(k-1)-1,
// giving at most 2^k - 1 distinct values with 0 on the grid. k = 1 is the
// binary-network special case w_hat = beta * sign(w), sign(0) := +1.
//
// Activations: PACT. y = clip(x, 0, a); x_hat = round(y*q/a) * a/q, q = 2^k-1.
//
// round() is round-half-away-from-zero (std::round), so the weight grid is
// symmetric about zero and oracles can match bit-exactly.
//
// Gradients are straight-through: the round() residual is dropped entirely.
//   weights:      dw straight-through for |w| <= beta, zero outside;
//                 dbeta = sign(w) where |w| > beta, zero inside.
//   activations:  dx straight-through on (0, clip);
//                 dclip = 1 where x >= clip, zero elsewhere.
// ---------------------------------------------------------------------------

struct WeightQuantParams {
  Tensor beta;  // one-element tensor, > 0

  static WeightQuantParams init(float value, bool trainable = true) {
    return {Tensor::scalar(value, trainable)};
  }
};

struct ActQuantParams {
  Tensor clip;  // one-element tensor, > 0

  static ActQuantParams init(float value, bool trainable = true) {
    return {Tensor::scalar(value, trainable)};
  }
};

namespace detail {

inline void check_bits(int bits) {
  if (bits < 1 || bits > 8)
    throw DomainError("quantizer bit-width must be in [1,8], got " +
                      std::to_string(bits));
}

}  // namespace detail

inline int weight_levels(int bits) { return (1 << (bits - 1)) - 1; }  // q
inline int act_levels(int bits) { return (1 << bits) - 1; }           // q

// Forward value of the weight quantizer for one element.
MSQ_NOINLINE inline void quantize_weights_forward(const float* w, std::size_t n,
                                                  float beta, int bits, float* out) {
  if (bits == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = w[i] < 0.0f ? -beta : beta;
    return;
  }
  const float q = float(weight_levels(bits));
  const float step = beta / q;
  for (std::size_t i = 0; i < n; ++i) {
    float c = w[i];
    if (c > beta) c = beta;
    if (c < -beta) c = -beta;
    out[i] = std::round(c * q / beta) * step;
  }
}

MSQ_NOINLINE inline void quantize_acts_forward(const float* x, std::size_t n,
                                               float clip, int bits, float* out) {
  const float q = float(act_levels(bits));
  const float step = clip / q;
  for (std::size_t i = 0; i < n; ++i) {
    float y = x[i];
    if (y < 0.0f) y = 0.0f;
    if (y > clip) y = clip;
    out[i] = std::round(y * q / clip) * step;
  }
}

inline Tensor quantize_weights(const Tensor& w, const Tensor& beta, int bits) {
  detail::check_bits(bits);
  if (beta.numel() != 1) throw DimensionError("quantize_weights: beta must be scalar");
  const float b = beta.data()[0];
  if (!(b > 0.0f)) throw DomainError("quantize_weights: beta must be > 0");
  std::vector<float> out(w.data().size());
  quantize_weights_forward(w.data().data(), out.size(), b, bits, out.data());
  return make_op("quantize_weights", {w, beta}, w.shape(), std::move(out),
                 [b](TensorNode& n) {
                   TensorNode* W = n.inputs[0].get();
                   TensorNode* B = n.inputs[1].get();
                   if (W->requires_grad) {
                     auto& g = W->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i)
                       if (std::abs(W->data[i]) <= b) g[i] += n.grad[i];
                   }
                   if (B->requires_grad) {
                     float acc = 0.0f;
                     for (std::size_t i = 0; i < n.grad.size(); ++i) {
                       const float w = W->data[i];
                       if (w > b) acc += n.grad[i];
                       else if (w < -b) acc -= n.grad[i];
                     }
                     B->ensure_grad()[0] += acc;
                   }
                 });
}

inline Tensor quantize_acts(const Tensor& x, const Tensor& clip, int bits) {
  detail::check_bits(bits);
  if (clip.numel() != 1) throw DimensionError("quantize_acts: clip must be scalar");
  const float a = clip.data()[0];
  if (!(a > 0.0f)) throw DomainError("quantize_acts: clip must be > 0");
  std::vector<float> out(x.data().size());
  quantize_acts_forward(x.data().data(), out.size(), a, bits, out.data());
  return make_op("quantize_acts", {x, clip}, x.shape(), std::move(out),
                 [a](TensorNode& n) {
                   TensorNode* X = n.inputs[0].get();
                   TensorNode* C = n.inputs[1].get();
                   if (X->requires_grad) {
                     auto& g = X->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       const float x = X->data[i];
                       if (x > 0.0f && x < a) g[i] += n.grad[i];
                     }
                   }
                   if (C->requires_grad) {
                     float acc = 0.0f;
                     for (std::size_t i = 0; i < n.grad.size(); ++i)
                       if (X->data[i] >= a) acc += n.grad[i];
                     C->ensure_grad()[0] += acc;
                   }
                 });
}

// ---------------------------------------------------------------------------
// STE contract validation. Compares the analytic gradient of the quantizer
// (as autodiff reports it) against central finite differences of the
// clip-only surrogate (clip without round), evaluated in double. Probes too
// close to a grid or clip kink are reported unusable rather than compared.
// ---------------------------------------------------------------------------

struct SteProbe {
  bool usable = false;
  double analytic = 0.0;
  double numeric = 0.0;

  bool agrees(double rel_tol = 1e-3) const {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-9});
    return usable && std::abs(analytic - numeric) / denom <= rel_tol;
  }
};

enum class SteWrt { input, clip_param };

namespace detail {

inline bool near_kink_weight(double w, double beta, int bits, double margin) {
  if (std::abs(std::abs(w) - beta) < margin) return true;  // clip boundary
  if (bits >= 2 && std::abs(w) < beta) {
    const double q = double(weight_levels(bits));
    const double t = w * q / beta;
    if (std::abs(t - std::round(t)) > 0.5 - margin * q / beta) return true;
  }
  if (bits == 1 && std::abs(w) < margin) return true;  // sign flip at 0
  return false;
}

inline bool near_kink_act(double x, double clip, int bits, double margin) {
  if (std::abs(x) < margin || std::abs(x - clip) < margin) return true;
  if (x > 0.0 && x < clip) {
    const double q = double(act_levels(bits));
    const double t = x * q / clip;
    if (std::abs(t - std::round(t)) > 0.5 - margin * q / clip) return true;
  }
  return false;
}

}  // namespace detail

inline SteProbe ste_check_weight(float w, float beta, int bits, SteWrt wrt,
                                 double eps = 1e-3) {
  detail::check_bits(bits);
  SteProbe p;
  if (detail::near_kink_weight(w, beta, bits, 3.0 * eps)) return p;  // skip signal
  p.usable = true;

  auto wt = Tensor::scalar(w, true);
  auto bt = Tensor::scalar(beta, true);
  backward(sum(quantize_weights(wt, bt, bits)));
  p.analytic = wrt == SteWrt::input
                   ? double(wt.has_grad() ? wt.grad()[0] : 0.0f)
                   : double(bt.has_grad() ? bt.grad()[0] : 0.0f);

  auto surrogate = [&](double wv, double bv) {
    return std::min(std::max(wv, -bv), bv);  // clip-only
  };
  if (wrt == SteWrt::input)
    p.numeric = (surrogate(w + eps, beta) - surrogate(w - eps, beta)) / (2 * eps);
  else
    p.numeric = (surrogate(w, beta + eps) - surrogate(w, beta - eps)) / (2 * eps);
  return p;
}

inline SteProbe ste_check_act(float x, float clip, int bits, SteWrt wrt,
                              double eps = 1e-3) {
  detail::check_bits(bits);
  SteProbe p;
  if (detail::near_kink_act(x, clip, bits, 3.0 * eps)) return p;
  p.usable = true;

  auto xt = Tensor::scalar(x, true);
  auto ct = Tensor::scalar(clip, true);
  backward(sum(quantize_acts(xt, ct, bits)));
  p.analytic = wrt == SteWrt::input
                   ? double(xt.has_grad() ? xt.grad()[0] : 0.0f)
                   : double(ct.has_grad() ? ct.grad()[0] : 0.0f);

  auto surrogate = [&](double xv, double cv) {
    return std::min(std::max(xv, 0.0), cv);
  };
  if (wrt == SteWrt::input)
    p.numeric = (surrogate(x + eps, clip) - surrogate(x - eps, clip)) / (2 * eps);
  else
    p.numeric = (surrogate(x, clip + eps) - surrogate(x, clip - eps)) / (2 * eps);
  return p;
}

}  // namespace msq
