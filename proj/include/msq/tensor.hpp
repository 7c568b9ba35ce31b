#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "msq/common.hpp"

#if defined(__GNUC__)
#define MSQ_NOINLINE __attribute__((noinline))
#else
#define MSQ_NOINLINE
#endif

namespace msq {

using Shape = std::vector<std::int64_t>;

// ---------------------------------------------------------------------------
// Graph node. Tensors are cheap handles onto shared nodes; ops append nodes
// eagerly while gradient mode is on, backward() consumes the graph and frees
// it. Leaves (parameters) survive because their owners hold handles.
// ---------------------------------------------------------------------------

struct TensorNode {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward_fn;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

  std::vector<float>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
    return grad;
  }
};

using NodeRef = std::shared_ptr<TensorNode>;

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// RAII guard that disables graph recording (evaluation paths).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodeRef n) : node_(std::move(n)) {}

  static Tensor from_data(Shape shape, std::vector<float> data,
                          bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<float> d(static_cast<std::size_t>(shape_numel(shape)), 0.0f);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor full(Shape shape, float v, bool requires_grad = false) {
    std::vector<float> d(static_cast<std::size_t>(shape_numel(shape)), v);
    return from_data(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(float v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t rank() const { return node_->shape.size(); }
  std::int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }

  std::vector<float>& data() { return node_->data; }
  const std::vector<float>& data() const { return node_->data; }
  std::vector<float>& grad() { return node_->grad; }
  const std::vector<float>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  float item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor");
    return node_->data[0];
  }

  TensorNode* node() const { return node_.get(); }
  const NodeRef& ref() const { return node_; }

  // Detached copy of the values (fresh leaf, no graph history).
  Tensor detached_copy() const {
    return from_data(node_->shape, node_->data, false);
  }

 private:
  NodeRef node_;
};

// ---------------------------------------------------------------------------
// Op construction. make_op is the single graph hook: any op, including ones
// with non-true (straight-through) gradients, is a forward value plus a
// backward rule. Quantizers register their STE rules through exactly this.
// ---------------------------------------------------------------------------

inline void check_finite(const TensorNode& n, const char* op) {
#if !defined(NDEBUG) || defined(MSQ_FORCE_FINITE_CHECKS)
  for (float v : n.data) {
    if (!std::isfinite(v))
      throw NumericalError(std::string("non-finite value produced by op ") + op);
  }
#else
  (void)n;
  (void)op;
#endif
}

inline Tensor make_op(const char* name, std::vector<Tensor> inputs, Shape out_shape,
                      std::vector<float> out_data,
                      std::function<void(TensorNode&)> backward) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(out_shape);
  n->data = std::move(out_data);
  n->op = name;
  bool track = false;
  if (grad_enabled()) {
    for (const auto& t : inputs)
      if (t.requires_grad()) track = true;
  }
  if (track) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& t : inputs) n->inputs.push_back(t.ref());
    n->backward_fn = std::move(backward);
  }
  check_finite(*n, name);
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// backward: reverse topological sweep. Each node is visited exactly once;
// the graph (edges + closures + intermediate grads) is freed afterwards.
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() requires a scalar loss");
  TensorNode* root = loss.node();
  if (!root->requires_grad) return;  // constant graph, nothing to do

  // Iterative post-order DFS -> topological order.
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      TensorNode* next = node->inputs[idx++].get();
      if (next->requires_grad && !visited.count(next)) {
        visited.insert(next);
        stack.push_back({next, 0});
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = 1.0f;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
  // Free the tape: drop edges, closures and intermediate grads. Leaves keep
  // their accumulated grads.
  for (TensorNode* n : topo) {
    if (!n->inputs.empty()) {
      n->inputs.clear();
      n->backward_fn = nullptr;
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---------------------------------------------------------------------------
// GEMM kernels. Row-parallelizable in principle; here single-threaded with
// sequential reductions so results are bit-deterministic. noinline keeps one
// code instance so identical inputs give identical floats from every caller.
// ---------------------------------------------------------------------------

// C[M,N] += A[M,K] * B[K,N]
MSQ_NOINLINE inline void gemm_nn(const float* A, const float* B, float* C,
                                 std::int64_t M, std::int64_t K, std::int64_t N) {
  for (std::int64_t i = 0; i < M; ++i) {
    float* c = C + i * N;
    const float* a = A + i * K;
    std::int64_t k = 0;
    for (; k + 4 <= K; k += 4) {
      const float a0 = a[k], a1 = a[k + 1], a2 = a[k + 2], a3 = a[k + 3];
      const float* b0 = B + k * N;
      const float* b1 = b0 + N;
      const float* b2 = b1 + N;
      const float* b3 = b2 + N;
      for (std::int64_t j = 0; j < N; ++j)
        c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; k < K; ++k) {
      const float ak = a[k];
      const float* b = B + k * N;
      for (std::int64_t j = 0; j < N; ++j) c[j] += ak * b[j];
    }
  }
}

// C[M,N] += A[M,T] * B[N,T]^T   (dot products along T)
MSQ_NOINLINE inline void gemm_abt(const float* A, const float* B, float* C,
                                  std::int64_t M, std::int64_t T, std::int64_t N) {
  for (std::int64_t i = 0; i < M; ++i) {
    const float* a = A + i * T;
    for (std::int64_t j = 0; j < N; ++j) {
      const float* b = B + j * T;
      float acc = 0.0f;
      for (std::int64_t t = 0; t < T; ++t) acc += a[t] * b[t];
      C[i * N + j] += acc;
    }
  }
}

// C[R,T] += A[I,R]^T * B[I,T]
MSQ_NOINLINE inline void gemm_atb(const float* A, const float* B, float* C,
                                  std::int64_t I, std::int64_t R, std::int64_t T) {
  for (std::int64_t i = 0; i < I; ++i) {
    const float* a = A + i * R;
    const float* b = B + i * T;
    for (std::int64_t r = 0; r < R; ++r) {
      const float ar = a[r];
      if (ar == 0.0f) continue;
      float* c = C + r * T;
      for (std::int64_t t = 0; t < T; ++t) c[t] += ar * b[t];
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise / reduction ops
// ---------------------------------------------------------------------------

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<float> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op("add", {a, b}, a.shape(), std::move(out), [](TensorNode& n) {
    for (int s = 0; s < 2; ++s) {
      TensorNode* in = n.inputs[s].get();
      if (!in->requires_grad) continue;
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<float> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op("sub", {a, b}, a.shape(), std::move(out), [](TensorNode& n) {
    if (n.inputs[0]->requires_grad) {
      auto& g = n.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (n.inputs[1]->requires_grad) {
      auto& g = n.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<float> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op("mul", {a, b}, a.shape(), std::move(out), [](TensorNode& n) {
    TensorNode* A = n.inputs[0].get();
    TensorNode* B = n.inputs[1].get();
    if (A->requires_grad) {
      auto& g = A->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * B->data[i];
    }
    if (B->requires_grad) {
      auto& g = B->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * A->data[i];
    }
  });
}

// x * s with s a one-element tensor; differentiable in both.
inline Tensor scale(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("scale: scale factor must be scalar");
  const float sv = s.data()[0];
  std::vector<float> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * sv;
  return make_op("scale", {x, s}, x.shape(), std::move(out), [sv](TensorNode& n) {
    TensorNode* X = n.inputs[0].get();
    TensorNode* S = n.inputs[1].get();
    if (X->requires_grad) {
      auto& g = X->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * sv;
    }
    if (S->requires_grad) {
      float acc = 0.0f;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * X->data[i];
      S->ensure_grad()[0] += acc;
    }
  });
}

inline Tensor scale(const Tensor& x, float c) {
  std::vector<float> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
  return make_op("scale_const", {x}, x.shape(), std::move(out), [c](TensorNode& n) {
    auto& g = n.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * c;
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<float> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0f, x.data()[i]);
  return make_op("relu", {x}, x.shape(), std::move(out), [](TensorNode& n) {
    TensorNode* X = n.inputs[0].get();
    auto& g = X->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (X->data[i] > 0.0f) g[i] += n.grad[i];
  });
}

inline Tensor sum(const Tensor& x) {
  float acc = 0.0f;
  for (float v : x.data()) acc += v;
  return make_op("sum", {x}, {1}, {acc}, [](TensorNode& n) {
    auto& g = n.inputs[0]->ensure_grad();
    const float gv = n.grad[0];
    for (auto& v : g) v += gv;
  });
}

inline Tensor mean(const Tensor& x) {
  float acc = 0.0f;
  for (float v : x.data()) acc += v;
  const float inv = 1.0f / float(x.numel());
  return make_op("mean", {x}, {1}, {acc * inv}, [inv](TensorNode& n) {
    auto& g = n.inputs[0]->ensure_grad();
    const float gv = n.grad[0] * inv;
    for (auto& v : g) v += gv;
  });
}

inline Tensor transpose2d(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose2d: rank-2 tensor required");
  const std::int64_t M = x.dim(0), N = x.dim(1);
  std::vector<float> out(std::size_t(M * N));
  for (std::int64_t i = 0; i < M; ++i)
    for (std::int64_t j = 0; j < N; ++j) out[j * M + i] = x.data()[i * N + j];
  return make_op("transpose2d", {x}, {N, M}, std::move(out), [M, N](TensorNode& n) {
    auto& g = n.inputs[0]->ensure_grad();
    for (std::int64_t i = 0; i < M; ++i)
      for (std::int64_t j = 0; j < N; ++j) g[i * N + j] += n.grad[j * M + i];
  });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: rank-2 tensors required");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions differ, " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<float> out(std::size_t(M * N), 0.0f);
  gemm_nn(a.data().data(), b.data().data(), out.data(), M, K, N);
  return make_op("matmul", {a, b}, {M, N}, std::move(out), [M, K, N](TensorNode& n) {
    TensorNode* A = n.inputs[0].get();
    TensorNode* B = n.inputs[1].get();
    if (A->requires_grad)  // dA += g * B^T
      gemm_abt(n.grad.data(), B->data.data(), A->ensure_grad().data(), M, N, K);
    if (B->requires_grad)  // dB += A^T * g
      gemm_atb(A->data.data(), n.grad.data(), B->ensure_grad().data(), M, K, N);
  });
}

// y[i,:] = x[i,:] + bias
inline Tensor add_bias_rows(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0))
    throw DimensionError("add_bias_rows: want [M,N] + [N]");
  const std::int64_t M = x.dim(0), N = x.dim(1);
  std::vector<float> out(x.data());
  for (std::int64_t i = 0; i < M; ++i)
    for (std::int64_t j = 0; j < N; ++j) out[i * N + j] += bias.data()[j];
  return make_op("add_bias_rows", {x, bias}, x.shape(), std::move(out),
                 [M, N](TensorNode& n) {
                   TensorNode* X = n.inputs[0].get();
                   TensorNode* Bi = n.inputs[1].get();
                   if (X->requires_grad) {
                     auto& g = X->ensure_grad();
                     for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
                   }
                   if (Bi->requires_grad) {
                     auto& g = Bi->ensure_grad();
                     for (std::int64_t i = 0; i < M; ++i)
                       for (std::int64_t j = 0; j < N; ++j)
                         g[j] += n.grad[i * N + j];
                   }
                 });
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, NCHW, via per-image im2col + GEMM.
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeom {
  std::int64_t N, Cin, H, W, Cout, Kh, Kw, Ho, Wo;
  int stride, pad;
};

inline ConvGeom conv_geometry(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4)
    throw DimensionError("conv2d: input and weight must be rank-4 (NCHW)");
  if (stride < 1) throw DomainError("conv2d: stride must be >= 1");
  if (pad < 0) throw DomainError("conv2d: pad must be >= 0");
  ConvGeom g;
  g.N = x.dim(0); g.Cin = x.dim(1); g.H = x.dim(2); g.W = x.dim(3);
  g.Cout = w.dim(0); g.Kh = w.dim(2); g.Kw = w.dim(3);
  g.stride = stride; g.pad = pad;
  if (w.dim(1) != g.Cin)
    throw DimensionError("conv2d: weight Cin " + std::to_string(w.dim(1)) +
                         " != input Cin " + std::to_string(g.Cin));
  const std::int64_t eh = g.H + 2 * pad - g.Kh;
  const std::int64_t ew = g.W + 2 * pad - g.Kw;
  if (eh < 0 || ew < 0 || eh % stride != 0 || ew % stride != 0)
    throw GeometryError("conv2d: output extent not integral for H=" +
                        std::to_string(g.H) + " W=" + std::to_string(g.W) +
                        " K=" + std::to_string(g.Kh) + "x" + std::to_string(g.Kw) +
                        " stride=" + std::to_string(stride) +
                        " pad=" + std::to_string(pad));
  g.Ho = eh / stride + 1;
  g.Wo = ew / stride + 1;
  return g;
}

// cols[(c*Kh+kh)*Kw+kw, oy*Wo+ox] = x[c, oy*s-p+kh, ox*s-p+kw]
MSQ_NOINLINE inline void im2col(const float* x, const ConvGeom& g, float* cols) {
  const std::int64_t T = g.Ho * g.Wo;
  for (std::int64_t c = 0; c < g.Cin; ++c) {
    const float* xc = x + c * g.H * g.W;
    for (std::int64_t kh = 0; kh < g.Kh; ++kh) {
      for (std::int64_t kw = 0; kw < g.Kw; ++kw) {
        float* row = cols + ((c * g.Kh + kh) * g.Kw + kw) * T;
        for (std::int64_t oy = 0; oy < g.Ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + kh;
          float* dst = row + oy * g.Wo;
          if (iy < 0 || iy >= g.H) {
            std::fill(dst, dst + g.Wo, 0.0f);
            continue;
          }
          const float* xrow = xc + iy * g.W;
          for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kw;
            dst[ox] = (ix >= 0 && ix < g.W) ? xrow[ix] : 0.0f;
          }
        }
      }
    }
  }
}

// Transposed layout: colsT[oy*Wo+ox, (c*Kh+kh)*Kw+kw]. Feeds the dW GEMM in
// axpy form (contiguous rows on both sides), which vectorizes without float
// reassociation; the dot-product form would not.
MSQ_NOINLINE inline void im2col_t(const float* x, const ConvGeom& g, float* colsT) {
  const std::int64_t CKK = g.Cin * g.Kh * g.Kw;
  for (std::int64_t c = 0; c < g.Cin; ++c) {
    const float* xc = x + c * g.H * g.W;
    for (std::int64_t kh = 0; kh < g.Kh; ++kh) {
      for (std::int64_t kw = 0; kw < g.Kw; ++kw) {
        const std::int64_t col = (c * g.Kh + kh) * g.Kw + kw;
        for (std::int64_t oy = 0; oy < g.Ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + kh;
          float* dst = colsT + (oy * g.Wo) * CKK + col;
          if (iy < 0 || iy >= g.H) {
            for (std::int64_t ox = 0; ox < g.Wo; ++ox) dst[ox * CKK] = 0.0f;
            continue;
          }
          const float* xrow = xc + iy * g.W;
          for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kw;
            dst[ox * CKK] = (ix >= 0 && ix < g.W) ? xrow[ix] : 0.0f;
          }
        }
      }
    }
  }
}

MSQ_NOINLINE inline void col2im_acc(const float* cols, const ConvGeom& g, float* x) {
  const std::int64_t T = g.Ho * g.Wo;
  for (std::int64_t c = 0; c < g.Cin; ++c) {
    float* xc = x + c * g.H * g.W;
    for (std::int64_t kh = 0; kh < g.Kh; ++kh) {
      for (std::int64_t kw = 0; kw < g.Kw; ++kw) {
        const float* row = cols + ((c * g.Kh + kh) * g.Kw + kw) * T;
        for (std::int64_t oy = 0; oy < g.Ho; ++oy) {
          const std::int64_t iy = oy * g.stride - g.pad + kh;
          if (iy < 0 || iy >= g.H) continue;
          float* xrow = xc + iy * g.W;
          const float* src = row + oy * g.Wo;
          for (std::int64_t ox = 0; ox < g.Wo; ++ox) {
            const std::int64_t ix = ox * g.stride - g.pad + kw;
            if (ix >= 0 && ix < g.W) xrow[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  const auto g = detail::conv_geometry(x, w, stride, pad);
  const std::int64_t CKK = g.Cin * g.Kh * g.Kw;
  const std::int64_t T = g.Ho * g.Wo;
  std::vector<float> out(std::size_t(g.N * g.Cout * T), 0.0f);
  std::vector<float> cols(std::size_t(CKK * T));
  for (std::int64_t n = 0; n < g.N; ++n) {
    detail::im2col(x.data().data() + n * g.Cin * g.H * g.W, g, cols.data());
    gemm_nn(w.data().data(), cols.data(), out.data() + n * g.Cout * T,
            g.Cout, CKK, T);
  }
  return make_op(
      "conv2d", {x, w}, {g.N, g.Cout, g.Ho, g.Wo}, std::move(out),
      [g, CKK, T](TensorNode& n) {
        TensorNode* X = n.inputs[0].get();
        TensorNode* W = n.inputs[1].get();
        std::vector<float> colsT;
        if (W->requires_grad) colsT.resize(std::size_t(T * CKK));
        std::vector<float> dcols;
        if (X->requires_grad) dcols.assign(std::size_t(CKK * T), 0.0f);
        for (std::int64_t i = 0; i < g.N; ++i) {
          const float* gn = n.grad.data() + i * g.Cout * T;
          if (W->requires_grad) {
            detail::im2col_t(X->data.data() + i * g.Cin * g.H * g.W, g,
                             colsT.data());
            gemm_nn(gn, colsT.data(), W->ensure_grad().data(), g.Cout, T, CKK);
          }
          if (X->requires_grad) {
            std::fill(dcols.begin(), dcols.end(), 0.0f);
            gemm_atb(W->data.data(), gn, dcols.data(), g.Cout, CKK, T);
            detail::col2im_acc(dcols.data(), g,
                               X->ensure_grad().data() + i * g.Cin * g.H * g.W);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling / head ops
// ---------------------------------------------------------------------------

inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("global_avg_pool: NCHW input required");
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<float> out(std::size_t(N * C));
  const float inv = 1.0f / float(HW);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const float* p = x.data().data() + (n * C + c) * HW;
      float acc = 0.0f;
      for (std::int64_t i = 0; i < HW; ++i) acc += p[i];
      out[n * C + c] = acc * inv;
    }
  return make_op("global_avg_pool", {x}, {N, C}, std::move(out),
                 [N, C, HW, inv](TensorNode& n) {
                   auto& g = n.inputs[0]->ensure_grad();
                   for (std::int64_t i = 0; i < N * C; ++i) {
                     const float gv = n.grad[i] * inv;
                     float* p = g.data() + i * HW;
                     for (std::int64_t j = 0; j < HW; ++j) p[j] += gv;
                   }
                 });
}

inline Tensor softmax_cross_entropy(const Tensor& logits,
                                    const std::vector<int>& labels) {
  if (logits.rank() != 2) throw DimensionError("softmax_cross_entropy: [N,C] required");
  const std::int64_t N = logits.dim(0), C = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != N)
    throw DimensionError("softmax_cross_entropy: label count != batch size");
  auto probs = std::make_shared<std::vector<float>>(std::size_t(N * C));
  double loss = 0.0;
  for (std::int64_t i = 0; i < N; ++i) {
    const float* z = logits.data().data() + i * C;
    if (labels[i] < 0 || labels[i] >= C)
      throw DomainError("softmax_cross_entropy: label out of range");
    float m = z[0];
    for (std::int64_t j = 1; j < C; ++j) m = std::max(m, z[j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < C; ++j) s += std::exp(double(z[j] - m));
    for (std::int64_t j = 0; j < C; ++j)
      (*probs)[i * C + j] = float(std::exp(double(z[j] - m)) / s);
    loss += std::log(s) - double(z[labels[i]] - m);
  }
  const float out = float(loss / double(N));
  auto labels_copy = labels;
  return make_op("softmax_cross_entropy", {logits}, {1}, {out},
                 [N, C, probs, labels_copy](TensorNode& n) {
                   auto& g = n.inputs[0]->ensure_grad();
                   const float gv = n.grad[0] / float(N);
                   for (std::int64_t i = 0; i < N; ++i)
                     for (std::int64_t j = 0; j < C; ++j) {
                       float p = (*probs)[i * C + j];
                       if (j == labels_copy[i]) p -= 1.0f;
                       g[i * C + j] += gv * p;
                     }
                 });
}

// ---------------------------------------------------------------------------
// Batch normalization.
//   Training: batch statistics, differentiable in x/gamma/shift, updates the
//   bank's running stats in place (biased variance, EMA with `momentum`).
//   Eval: folded per-channel affine computed by bn_fold; the same fold is
//   used by hot-swap materialization so both paths are bit-identical.
// ---------------------------------------------------------------------------

inline void bn_fold(const std::vector<float>& gamma, const std::vector<float>& shift,
                    const std::vector<float>& run_mean, const std::vector<float>& run_var,
                    float eps, std::vector<float>& a, std::vector<float>& b) {
  const std::size_t C = gamma.size();
  a.resize(C);
  b.resize(C);
  for (std::size_t c = 0; c < C; ++c) {
    a[c] = gamma[c] / std::sqrt(run_var[c] + eps);
    b[c] = shift[c] - run_mean[c] * a[c];
  }
}

// y[n,c,h,w] = a[c]*x + b[c]; differentiable in x only (a,b are folded state).
inline Tensor affine_channels(const Tensor& x, std::shared_ptr<std::vector<float>> a,
                              std::shared_ptr<std::vector<float>> b) {
  if (x.rank() != 4) throw DimensionError("affine_channels: NCHW input required");
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (static_cast<std::int64_t>(a->size()) != C ||
      static_cast<std::int64_t>(b->size()) != C)
    throw DimensionError("affine_channels: per-channel params mismatch");
  std::vector<float> out(x.data().size());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const float ac = (*a)[c], bc = (*b)[c];
      const float* src = x.data().data() + (n * C + c) * HW;
      float* dst = out.data() + (n * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) dst[i] = ac * src[i] + bc;
    }
  return make_op("affine_channels", {x}, x.shape(), std::move(out),
                 [N, C, HW, a](TensorNode& n) {
                   auto& g = n.inputs[0]->ensure_grad();
                   for (std::int64_t i = 0; i < N * C; ++i) {
                     const float ac = (*a)[i % C];
                     const float* gp = n.grad.data() + i * HW;
                     float* dp = g.data() + i * HW;
                     for (std::int64_t j = 0; j < HW; ++j) dp[j] += ac * gp[j];
                   }
                 });
}

inline Tensor batch_norm_train(const Tensor& x, const Tensor& gamma,
                               const Tensor& shift, std::vector<float>& run_mean,
                               std::vector<float>& run_var, float momentum,
                               float eps) {
  if (x.rank() != 4) throw DimensionError("batch_norm: NCHW input required");
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || shift.numel() != C ||
      static_cast<std::int64_t>(run_mean.size()) != C ||
      static_cast<std::int64_t>(run_var.size()) != C)
    throw DimensionError("batch_norm: per-channel parameter size mismatch");
  const std::int64_t m = N * HW;
  if (m < 1) throw DimensionError("batch_norm: empty batch");

  auto xhat = std::make_shared<std::vector<float>>(x.data().size());
  auto invstd = std::make_shared<std::vector<float>>(std::size_t(C));
  std::vector<float> out(x.data().size());
  for (std::int64_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
      const float* p = x.data().data() + (n * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) s += p[i];
    }
    const float mu = float(s / double(m));
    double v = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
      const float* p = x.data().data() + (n * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) {
        const double d = double(p[i]) - double(mu);
        v += d * d;
      }
    }
    const float var = float(v / double(m));
    const float is = 1.0f / std::sqrt(var + eps);
    (*invstd)[c] = is;
    const float gc = gamma.data()[c], sc = shift.data()[c];
    for (std::int64_t n = 0; n < N; ++n) {
      const float* p = x.data().data() + (n * C + c) * HW;
      float* xh = xhat->data() + (n * C + c) * HW;
      float* o = out.data() + (n * C + c) * HW;
      for (std::int64_t i = 0; i < HW; ++i) {
        xh[i] = (p[i] - mu) * is;
        o[i] = gc * xh[i] + sc;
      }
    }
    run_mean[c] = (1.0f - momentum) * run_mean[c] + momentum * mu;
    run_var[c] = (1.0f - momentum) * run_var[c] + momentum * var;
  }

  return make_op(
      "batch_norm", {x, gamma, shift}, x.shape(), std::move(out),
      [N, C, HW, m, xhat, invstd](TensorNode& n) {
        TensorNode* X = n.inputs[0].get();
        TensorNode* G = n.inputs[1].get();
        TensorNode* S = n.inputs[2].get();
        for (std::int64_t c = 0; c < C; ++c) {
          double dg = 0.0, ds = 0.0;
          for (std::int64_t b = 0; b < N; ++b) {
            const float* gp = n.grad.data() + (b * C + c) * HW;
            const float* xh = xhat->data() + (b * C + c) * HW;
            for (std::int64_t i = 0; i < HW; ++i) {
              dg += double(gp[i]) * double(xh[i]);
              ds += double(gp[i]);
            }
          }
          if (G->requires_grad) G->ensure_grad()[c] += float(dg);
          if (S->requires_grad) S->ensure_grad()[c] += float(ds);
          if (X->requires_grad) {
            const float gc = G->data[c];
            const float is = (*invstd)[c];
            const float mean_dxhat = float(ds / double(m)) * gc;
            const float mean_dxhat_xhat = float(dg / double(m)) * gc;
            auto& gx = X->ensure_grad();
            for (std::int64_t b = 0; b < N; ++b) {
              const float* gp = n.grad.data() + (b * C + c) * HW;
              const float* xh = xhat->data() + (b * C + c) * HW;
              float* dst = gx.data() + (b * C + c) * HW;
              for (std::int64_t i = 0; i < HW; ++i)
                dst[i] += is * (gp[i] * gc - mean_dxhat - xh[i] * mean_dxhat_xhat);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// SGD with momentum and weight decay:
//   v <- momentum*v + grad + wd*p ;  p <- p - lr*v ;  grad cleared.
// ---------------------------------------------------------------------------

struct SgdState {
  std::unordered_map<const TensorNode*, std::vector<float>> velocity;
};

inline void sgd_step(const std::vector<Tensor>& params, SgdState& state, float lr,
                     float weight_decay, float momentum) {
  for (const auto& p : params) {
    TensorNode* n = p.node();
    if (n->grad.empty())
      throw ContractError(std::string("sgd_step: parameter (op=") + n->op +
                          ", shape " + shape_str(n->shape) + ") has no gradient");
    auto& v = state.velocity[n];
    if (v.empty()) v.assign(n->data.size(), 0.0f);
    for (std::size_t i = 0; i < n->data.size(); ++i) {
      v[i] = momentum * v[i] + n->grad[i] + weight_decay * n->data[i];
      n->data[i] -= lr * v[i];
    }
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

inline void zero_grad(const std::vector<Tensor>& params) {
  for (const auto& p : params) {
    p.node()->grad.clear();
  }
}

}  // namespace msq
