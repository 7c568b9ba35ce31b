#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>

#include "msq/quantizers.hpp"
#include "msq/wavelet.hpp"

namespace msq {

// ---------------------------------------------------------------------------
// Candidate bit-widths
// ---------------------------------------------------------------------------

struct CandidateSet {
  std::vector<int> bits;  // sorted descending, distinct, each in [1,8]

  static CandidateSet make(std::vector<int> v) {
    if (v.empty()) throw DomainError("candidate set must be non-empty");
    std::sort(v.begin(), v.end(), std::greater<int>());
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] < 1 || v[i] > 8)
        throw DomainError("candidate bit-width " + std::to_string(v[i]) +
                          " outside [1,8]");
      if (i > 0 && v[i] == v[i - 1])
        throw DomainError("duplicate candidate bit-width " + std::to_string(v[i]));
    }
    return CandidateSet{std::move(v)};
  }

  bool contains(int k) const {
    return std::find(bits.begin(), bits.end(), k) != bits.end();
  }

  std::size_t index_of(int k) const {
    for (std::size_t i = 0; i < bits.size(); ++i)
      if (bits[i] == k) return i;
    throw CandidateError("bit-width " + std::to_string(k) +
                         " is not a trained candidate");
  }

  // Closest trained candidate to k; ties break toward the larger bit-width.
  int nearest(int k) const {
    int best = bits.front();
    int best_d = std::abs(best - k);
    for (int b : bits) {
      const int d = std::abs(b - k);
      if (d < best_d || (d == best_d && b > best)) {
        best = b;
        best_d = d;
      }
    }
    return best;
  }

  std::size_t size() const { return bits.size(); }
  int largest() const { return bits.front(); }
};

// Ablation switches. The full method has all four on; the E-series turns
// them on cumulatively (E2 none, E3 act, E4 +bn, E5 +weight, E6 +subband).
struct FeatureFlags {
  bool per_k_act_quant = true;
  bool per_k_bn = true;
  bool per_k_weight_quant = true;
  bool subband_scales = true;  // wavelet reconstruction with per-k scales
};

// ---------------------------------------------------------------------------
// Per-candidate batch-norm banks. Banks never share storage unless the
// ablation explicitly collapses them (then every index aliases bank 0).
// ---------------------------------------------------------------------------

struct BnBank {
  Tensor gamma, shift;
  std::vector<float> run_mean, run_var;

  static std::shared_ptr<BnBank> fresh(std::int64_t channels) {
    auto b = std::make_shared<BnBank>();
    b->gamma = Tensor::full({channels}, 1.0f, true);
    b->shift = Tensor::zeros({channels}, true);
    b->run_mean.assign(std::size_t(channels), 0.0f);
    b->run_var.assign(std::size_t(channels), 1.0f);
    return b;
  }
};

struct MultiBN {
  std::vector<std::shared_ptr<BnBank>> banks;  // index = candidate index
  float momentum = 0.1f;
  float eps = 1e-5f;

  static MultiBN create(std::int64_t channels, std::size_t candidates,
                        bool per_candidate, float momentum, float eps) {
    MultiBN m;
    m.momentum = momentum;
    m.eps = eps;
    m.banks.resize(candidates);
    if (per_candidate) {
      for (auto& b : m.banks) b = BnBank::fresh(channels);
    } else {
      auto shared = BnBank::fresh(channels);
      for (auto& b : m.banks) b = shared;
    }
    return m;
  }

  BnBank& bank(std::size_t idx) { return *banks[idx]; }
  const BnBank& bank(std::size_t idx) const { return *banks[idx]; }
};

// ---------------------------------------------------------------------------
// Forward specification: which candidate's hyper-parameters to use, at which
// quantization bit-width (they differ only in force-bits probes), training
// vs eval statistics, optional full-precision mode and subband masking.
// ---------------------------------------------------------------------------

struct ForwardSpec {
  int theta_k;
  int quant_bits;
  bool training = false;
  bool quantize = true;
  std::array<bool, 4> mask{true, true, true, true};

  static ForwardSpec train(int k) { return {k, k, true, true, {1, 1, 1, 1}}; }
  static ForwardSpec eval(int k) { return {k, k, false, true, {1, 1, 1, 1}}; }
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

namespace detail {

inline std::array<Tensor, 4> fresh_alpha() {
  return {Tensor::scalar(1.0f, true), Tensor::scalar(1.0f, true),
          Tensor::scalar(1.0f, true), Tensor::scalar(1.0f, true)};
}

inline float mean_abs(const std::vector<float>& v) {
  double s = 0.0;
  for (float x : v) s += std::abs(double(x));
  return v.empty() ? 0.0f : float(s / double(v.size()));
}

template <typename T>
std::vector<T> replicate_or_fresh(std::size_t n, bool per_candidate,
                                  const std::function<T()>& fresh) {
  std::vector<T> out;
  out.reserve(n);
  if (per_candidate) {
    for (std::size_t i = 0; i < n; ++i) out.push_back(fresh());
  } else {
    T shared = fresh();
    for (std::size_t i = 0; i < n; ++i) out.push_back(shared);
  }
  return out;
}

}  // namespace detail

// Convolution layer with wavelet-reconstructed per-candidate weights and the
// Eq. (7) input pipeline: BN_k -> ReLU -> Q_a -> conv(Q_w(W_hat_k)).
struct MsConvLayer {
  Tensor W;  // [Cout, Cin, Kh, Kw], shared across candidates
  int stride = 1, pad = 1;
  bool multiscale = true;  // wavelet path; off when channel extents are odd
  std::vector<std::array<Tensor, 4>> alpha;  // per candidate, 4 scales each
  std::vector<WeightQuantParams> wq;
  std::vector<ActQuantParams> aq;
  MultiBN bn;  // normalizes the layer input (Cin channels)

  static MsConvLayer create(std::int64_t cout, std::int64_t cin, std::int64_t k,
                            int stride, int pad, const CandidateSet& K,
                            const FeatureFlags& flags, float bn_momentum,
                            float bn_eps, Rng& rng) {
    MsConvLayer l;
    l.stride = stride;
    l.pad = pad;
    const float stdev = std::sqrt(2.0f / float(cin * k * k));
    std::vector<float> w(std::size_t(cout * cin * k * k));
    for (auto& v : w) v = float(rng.gaussian()) * stdev;
    l.W = Tensor::from_data({cout, cin, k, k}, std::move(w), true);
    l.multiscale = flags.subband_scales && cout % 2 == 0 && cin % 2 == 0;

    const std::size_t n = K.size();
    l.alpha = detail::replicate_or_fresh<std::array<Tensor, 4>>(
        n, flags.subband_scales, [] { return detail::fresh_alpha(); });
    const float beta0 = std::max(1e-3f, 3.0f * detail::mean_abs(l.W.data()));
    l.wq = detail::replicate_or_fresh<WeightQuantParams>(
        n, flags.per_k_weight_quant,
        [beta0] { return WeightQuantParams::init(beta0); });
    l.aq = detail::replicate_or_fresh<ActQuantParams>(
        n, flags.per_k_act_quant, [] { return ActQuantParams::init(8.0f); });
    l.bn = MultiBN::create(cin, n, flags.per_k_bn, bn_momentum, bn_eps);
    return l;
  }

  // W_hat_k = idwt2(alpha_k . dwt2(W)), Eq. (4)-(5); identity path when the
  // layer is excluded from wavelet treatment.
  Tensor reconstruct(std::size_t theta_idx,
                     const std::array<bool, 4>& mask = {true, true, true,
                                                        true}) const {
    if (!multiscale) return W;
    auto bands = dwt2(W);
    SubbandSet scaled;
    for (int b = 0; b < 4; ++b)
      scaled.band(b) = mask[std::size_t(b)] ? scale(bands.band(b), alpha[theta_idx][std::size_t(b)])
                                            : scale(bands.band(b), 0.0f);
    return idwt2(scaled);
  }

  Tensor quantized_weight(const ForwardSpec& spec, std::size_t theta_idx) const {
    Tensor w = reconstruct(theta_idx, spec.mask);
    if (!spec.quantize) return w;
    return quantize_weights(w, wq[theta_idx].beta, spec.quant_bits);
  }
};

// Linear layer with the same multiscale treatment over the (Out, In) plane.
// The desk architecture keeps its final classifier at fixed 8-bit instead,
// but the layer is part of the library surface and unit-tested.
struct MsLinearLayer {
  Tensor W;  // [Out, In]
  bool multiscale = true;
  std::vector<std::array<Tensor, 4>> alpha;
  std::vector<WeightQuantParams> wq;
  std::vector<ActQuantParams> aq;

  static MsLinearLayer create(std::int64_t out, std::int64_t in,
                              const CandidateSet& K, const FeatureFlags& flags,
                              Rng& rng) {
    MsLinearLayer l;
    const float stdev = std::sqrt(2.0f / float(in));
    std::vector<float> w(std::size_t(out * in));
    for (auto& v : w) v = float(rng.gaussian()) * stdev;
    l.W = Tensor::from_data({out, in}, std::move(w), true);
    l.multiscale = flags.subband_scales && out % 2 == 0 && in % 2 == 0;
    const std::size_t n = K.size();
    l.alpha = detail::replicate_or_fresh<std::array<Tensor, 4>>(
        n, flags.subband_scales, [] { return detail::fresh_alpha(); });
    const float beta0 = std::max(1e-3f, 3.0f * detail::mean_abs(l.W.data()));
    l.wq = detail::replicate_or_fresh<WeightQuantParams>(
        n, flags.per_k_weight_quant,
        [beta0] { return WeightQuantParams::init(beta0); });
    l.aq = detail::replicate_or_fresh<ActQuantParams>(
        n, flags.per_k_act_quant, [] { return ActQuantParams::init(8.0f); });
    return l;
  }

  Tensor reconstruct(std::size_t theta_idx,
                     const std::array<bool, 4>& mask = {true, true, true,
                                                        true}) const {
    if (!multiscale) return W;
    auto bands = dwt2(W);
    SubbandSet scaled;
    for (int b = 0; b < 4; ++b)
      scaled.band(b) = mask[std::size_t(b)] ? scale(bands.band(b), alpha[theta_idx][std::size_t(b)])
                                            : scale(bands.band(b), 0.0f);
    return idwt2(scaled);
  }

  // y = Q_a(relu(x)) * Q_w(W_hat)^T
  Tensor forward(const Tensor& x, const ForwardSpec& spec,
                 std::size_t theta_idx) const {
    Tensor h = relu(x);
    Tensor w = reconstruct(theta_idx, spec.mask);
    if (spec.quantize) {
      h = quantize_acts(h, aq[theta_idx].clip, spec.quant_bits);
      w = quantize_weights(w, wq[theta_idx].beta, spec.quant_bits);
    }
    return matmul(h, transpose2d(w));
  }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct ConvStage {
  std::int64_t channels;
  int stride;  // 1 -> 3x3/pad1, 2 -> 2x2/pad0 downsample
};

struct ModelConfig {
  std::int64_t in_channels = 1;
  std::int64_t image_hw = 28;
  std::int64_t num_classes = 10;
  std::int64_t stem_channels = 16;
  std::vector<ConvStage> stages = {{16, 1}, {32, 2}, {32, 1},
                                   {64, 2}, {64, 1}, {64, 1}};
  CandidateSet candidates = CandidateSet::make({8, 4, 2, 1});
  FeatureFlags flags;
  float bn_momentum = 0.1f;
  float bn_eps = 1e-5f;
  std::uint64_t init_seed = 1;
};

// Evaluation pipeline: weights and folded BN materialized per candidate so a
// sweep streams batches without re-running DWT/quantization, and so bundle
// eval and hot-swapped eval share one arithmetic path, bit for bit.
struct EvalConvStep {
  Tensor W;
  int stride, pad;
  bool has_bn = false;
  std::shared_ptr<std::vector<float>> bn_a, bn_b;
  bool has_act_quant = false;
  Tensor act_clip;
  int act_bits = 8;
};

struct EvalPipeline {
  std::vector<EvalConvStep> convs;  // stem first, then the multiscale blocks
  std::shared_ptr<std::vector<float>> head_a, head_b;
  bool head_quant = true;
  Tensor head_clip;
  Tensor fc_W;  // [C, classes], already transposed (and quantized)
  Tensor fc_b;

  Tensor run(const Tensor& x) const {
    NoGradGuard ng;
    Tensor h = x;
    for (const auto& step : convs) {
      if (step.has_bn) {
        h = affine_channels(h, step.bn_a, step.bn_b);
        h = relu(h);
      }
      if (step.has_act_quant) h = quantize_acts(h, step.act_clip, step.act_bits);
      h = conv2d(h, step.W, step.stride, step.pad);
    }
    h = affine_channels(h, head_a, head_b);
    h = relu(h);
    if (head_quant) h = quantize_acts(h, head_clip, 8);
    Tensor p = global_avg_pool(h);
    return add_bias_rows(matmul(p, fc_W), fc_b);
  }
};

class ModelGraph {
 public:
  ModelConfig cfg;

  // fixed 8-bit stem and classifier, single quant params, shared across k
  Tensor stem_W;
  WeightQuantParams stem_wq;
  std::vector<MsConvLayer> blocks;
  MultiBN head_bn;
  ActQuantParams head_aq;  // shared; the head always quantizes at 8-bit
  Tensor fc_W;             // [num_classes, C_last], (Out, In) convention
  Tensor fc_b;
  WeightQuantParams fc_wq;

  explicit ModelGraph(ModelConfig config) : cfg(std::move(config)) {
    Rng rng(cfg.init_seed);
    const auto& K = cfg.candidates;

    const float stem_std = std::sqrt(2.0f / float(cfg.in_channels * 9));
    std::vector<float> sw(std::size_t(cfg.stem_channels * cfg.in_channels * 9));
    for (auto& v : sw) v = float(rng.gaussian()) * stem_std;
    stem_W = Tensor::from_data({cfg.stem_channels, cfg.in_channels, 3, 3},
                               std::move(sw), true);
    stem_wq = WeightQuantParams::init(
        std::max(1e-3f, 3.0f * detail::mean_abs(stem_W.data())));

    std::int64_t cin = cfg.stem_channels;
    for (const auto& stage : cfg.stages) {
      const std::int64_t ksize = stage.stride == 2 ? 2 : 3;
      const int pad = stage.stride == 2 ? 0 : 1;
      blocks.push_back(MsConvLayer::create(stage.channels, cin, ksize,
                                           stage.stride, pad, K, cfg.flags,
                                           cfg.bn_momentum, cfg.bn_eps, rng));
      cin = stage.channels;
    }

    head_bn = MultiBN::create(cin, K.size(), cfg.flags.per_k_bn, cfg.bn_momentum,
                              cfg.bn_eps);
    head_aq = ActQuantParams::init(8.0f);

    const float fc_std = std::sqrt(2.0f / float(cin));
    std::vector<float> fw(std::size_t(cfg.num_classes * cin));
    for (auto& v : fw) v = float(rng.gaussian()) * fc_std;
    fc_W = Tensor::from_data({cfg.num_classes, cin}, std::move(fw), true);
    fc_b = Tensor::zeros({cfg.num_classes}, true);
    fc_wq = WeightQuantParams::init(
        std::max(1e-3f, 3.0f * detail::mean_abs(fc_W.data())));

    active_k_ = cfg.candidates.largest();
  }

  int active_candidate() const { return active_k_; }

  void set_active_candidate(int k) {
    cfg.candidates.index_of(k);  // throws CandidateError if absent
    active_k_ = k;
  }

  std::size_t theta_index(int k) const { return cfg.candidates.index_of(k); }

  // --- training-mode forward (autodiff graph) --------------------------------

  Tensor forward(const Tensor& x, const ForwardSpec& spec) {
    validate_input(x);
    const std::size_t ti = theta_index(spec.theta_k);
    if (spec.quantize) detail::check_bits(spec.quant_bits);
    if (!spec.training) {
      auto pipe = build_eval_pipeline(spec);
      return pipe.run(x);
    }

    Tensor h = conv2d(x, stem_weight(spec), 1, 1);
    for (auto& blk : blocks) {
      auto& bank = blk.bn.bank(ti);
      h = batch_norm_train(h, bank.gamma, bank.shift, bank.run_mean,
                           bank.run_var, blk.bn.momentum, blk.bn.eps);
      h = relu(h);
      if (spec.quantize)
        h = quantize_acts(h, blk.aq[ti].clip, spec.quant_bits);
      h = conv2d(h, blk.quantized_weight(spec, ti), blk.stride, blk.pad);
    }
    auto& hb = head_bn.bank(ti);
    h = batch_norm_train(h, hb.gamma, hb.shift, hb.run_mean, hb.run_var,
                         head_bn.momentum, head_bn.eps);
    h = relu(h);
    if (spec.quantize) h = quantize_acts(h, head_aq.clip, 8);
    Tensor p = global_avg_pool(h);
    return add_bias_rows(matmul(p, transpose2d(fc_weight(spec))), fc_b);
  }

  Tensor forward_active(const Tensor& x, bool training) {
    auto spec = training ? ForwardSpec::train(active_k_) : ForwardSpec::eval(active_k_);
    return forward(x, spec);
  }

  // --- evaluation pipeline ---------------------------------------------------

  EvalPipeline build_eval_pipeline(const ForwardSpec& spec) const {
    NoGradGuard ng;
    const std::size_t ti = theta_index(spec.theta_k);
    EvalPipeline pipe;

    EvalConvStep stem;
    stem.W = stem_weight(spec).detached_copy();
    stem.stride = 1;
    stem.pad = 1;
    pipe.convs.push_back(std::move(stem));

    for (const auto& blk : blocks) {
      EvalConvStep step;
      step.W = blk.quantized_weight(spec, ti).detached_copy();
      step.stride = blk.stride;
      step.pad = blk.pad;
      step.has_bn = true;
      const auto& bank = blk.bn.bank(ti);
      step.bn_a = std::make_shared<std::vector<float>>();
      step.bn_b = std::make_shared<std::vector<float>>();
      bn_fold(bank.gamma.data(), bank.shift.data(), bank.run_mean, bank.run_var,
              blk.bn.eps, *step.bn_a, *step.bn_b);
      step.has_act_quant = spec.quantize;
      step.act_clip = blk.aq[ti].clip.detached_copy();
      step.act_bits = spec.quant_bits;
      pipe.convs.push_back(std::move(step));
    }

    const auto& hb = head_bn.bank(ti);
    pipe.head_a = std::make_shared<std::vector<float>>();
    pipe.head_b = std::make_shared<std::vector<float>>();
    bn_fold(hb.gamma.data(), hb.shift.data(), hb.run_mean, hb.run_var,
            head_bn.eps, *pipe.head_a, *pipe.head_b);
    pipe.head_quant = spec.quantize;
    pipe.head_clip = head_aq.clip.detached_copy();
    pipe.fc_W = transpose2d(fc_weight(spec)).detached_copy();
    pipe.fc_b = fc_b.detached_copy();
    return pipe;
  }

  // --- parameter partition ---------------------------------------------------

  std::vector<Tensor> shared_params() const {
    std::vector<Tensor> out{stem_W, stem_wq.beta, head_aq.clip, fc_W, fc_b,
                            fc_wq.beta};
    for (const auto& blk : blocks) out.push_back(blk.W);
    return out;
  }

  std::vector<Tensor> theta_params(int k, bool include_alpha) const {
    const std::size_t ti = theta_index(k);
    std::vector<Tensor> out;
    for (const auto& blk : blocks) {
      const auto& bank = blk.bn.bank(ti);
      out.push_back(bank.gamma);
      out.push_back(bank.shift);
      out.push_back(blk.aq[ti].clip);
      out.push_back(blk.wq[ti].beta);
      if (include_alpha && blk.multiscale)
        for (const auto& a : blk.alpha[ti]) out.push_back(a);
    }
    const auto& hb = head_bn.bank(ti);
    out.push_back(hb.gamma);
    out.push_back(hb.shift);
    return out;
  }

  std::vector<Tensor> all_params() const {
    auto out = shared_params();
    std::unordered_set<const TensorNode*> seen;
    for (const auto& t : out) seen.insert(t.node());
    for (int k : cfg.candidates.bits)
      for (const auto& t : theta_params(k, true))
        if (seen.insert(t.node()).second) out.push_back(t);
    return out;
  }

  // Projects quantizer clip parameters back onto their domain (beta > 0,
  // alpha_clip > 0). SGD with momentum and weight decay can push a clip
  // through zero; the trainer applies this after every step.
  void project_quant_params(float floor = 1e-4f) {
    auto clamp_scalar = [floor](const Tensor& t) {
      auto& v = t.node()->data;
      if (v[0] < floor) v[0] = floor;
    };
    clamp_scalar(stem_wq.beta);
    clamp_scalar(fc_wq.beta);
    clamp_scalar(head_aq.clip);
    for (auto& blk : blocks) {
      for (auto& q : blk.wq) clamp_scalar(q.beta);
      for (auto& q : blk.aq) clamp_scalar(q.clip);
    }
  }

  // --- state hashing (isolation and purity checks) ---------------------------

  std::uint64_t theta_state_hash(int k) const {
    const std::size_t ti = theta_index(k);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& t : theta_params(k, true)) h = fnv1a_span(t.data(), h);
    for (const auto& blk : blocks) {
      const auto& bank = blk.bn.bank(ti);
      h = fnv1a_span(bank.run_mean, h);
      h = fnv1a_span(bank.run_var, h);
    }
    const auto& hb = head_bn.bank(ti);
    h = fnv1a_span(hb.run_mean, h);
    h = fnv1a_span(hb.run_var, h);
    return h;
  }

  std::uint64_t state_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& t : shared_params()) h = fnv1a_span(t.data(), h);
    for (int k : cfg.candidates.bits) {
      const std::uint64_t tk = theta_state_hash(k);
      h = fnv1a(&tk, sizeof(tk), h);
    }
    return h;
  }

 private:
  int active_k_ = 0;

  void validate_input(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg.in_channels ||
        x.dim(2) != cfg.image_hw || x.dim(3) != cfg.image_hw)
      throw DimensionError("model input must be [N," +
                           std::to_string(cfg.in_channels) + "," +
                           std::to_string(cfg.image_hw) + "," +
                           std::to_string(cfg.image_hw) + "], got " +
                           shape_str(x.shape()));
  }

  Tensor stem_weight(const ForwardSpec& spec) const {
    return spec.quantize ? quantize_weights(stem_W, stem_wq.beta, 8) : stem_W;
  }

  Tensor fc_weight(const ForwardSpec& spec) const {
    return spec.quantize ? quantize_weights(fc_W, fc_wq.beta, 8) : fc_W;
  }

};

inline ModelGraph build_model(const ModelConfig& cfg) { return ModelGraph(cfg); }

// Reconstruction with selected subbands zeroed, the Table-3 style probe.
inline Tensor subband_masked_forward(ModelGraph& model, const Tensor& x,
                                     const std::array<bool, 4>& mask,
                                     std::optional<int> quant_bits = {}) {
  ForwardSpec spec = ForwardSpec::eval(model.active_candidate());
  spec.mask = mask;
  if (quant_bits) {
    spec.quant_bits = *quant_bits;
  } else {
    spec.quantize = false;
  }
  return model.forward(x, spec);
}

}  // namespace msq
