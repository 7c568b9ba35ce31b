#pragma once

#include <map>

#include "msq/datasets.hpp"
#include "msq/net.hpp"

namespace msq {

// ---------------------------------------------------------------------------
// Two-stage dynamic quantization training.
//   Stage 1 (warmup): visit each candidate in order, T steps each, updating
//     {W, B_k, h} with the subband scales frozen at (1,1,1,1).
//   Stage 2: sample k per optimizer step, update {W, B_k, alpha_k, h_k}.
// ---------------------------------------------------------------------------

struct LrSchedule {
  float initial = 0.01f;
  std::vector<double> decay_at = {0.5, 0.75};  // fractions of total epochs
  float factor = 0.1f;

  float at_epoch(int epoch, int total_epochs) const {
    float lr = initial;
    for (double frac : decay_at)
      if (double(epoch) >= frac * double(total_epochs)) lr *= factor;
    return lr;
  }
};

struct TrainPlan {
  CandidateSet candidates = CandidateSet::make({8, 4, 2, 1});
  std::vector<double> probs;       // empty -> uniform over candidates
  std::int64_t warmup_iters = -1;  // T per candidate; -1 -> one epoch's worth
  int epochs = 1;                  // L
  std::int64_t batch_size = 128;
  LrSchedule lr;
  float weight_decay = 1e-4f;
  float momentum = 0.9f;
  std::uint64_t seed = 1;
  bool joint_mode = false;   // sum the loss over every candidate per step
  bool augment = false;
  std::int64_t eval_subset = 0;  // per-epoch sweep cap; 0 = whole eval set

  std::vector<double> effective_probs() const {
    if (probs.empty())
      return std::vector<double>(candidates.size(), 1.0 / double(candidates.size()));
    return probs;
  }

  void validate() const {
    if (epochs < 1) throw DomainError("train plan: epochs must be >= 1");
    if (batch_size < 1) throw DomainError("train plan: batch_size must be >= 1");
    if (warmup_iters < -1) throw DomainError("train plan: bad warmup_iters");
    if (!(lr.initial > 0.0f)) throw DomainError("train plan: lr must be > 0");
    if (!probs.empty()) {
      if (probs.size() != candidates.size())
        throw DomainError("train plan: probs size != candidate count");
      double s = 0.0;
      for (double p : probs) {
        if (p < 0.0) throw DomainError("train plan: negative sampling probability");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-9)
        throw DomainError("train plan: sampling probabilities must sum to 1");
    }
  }
};

struct TrainLogRow {
  int epoch;         // -1 during warmup
  std::int64_t step;
  int k;
  float loss;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  // per-epoch evaluation sweep over every candidate
  std::vector<std::map<int, double>> eval_accuracy;
};

class BitSampler {
 public:
  BitSampler(const CandidateSet& K, std::vector<double> probs, std::uint64_t seed)
      : bits_(K.bits), rng_(seed) {
    if (probs.size() != bits_.size())
      throw DomainError("sampler: probability count mismatch");
    double acc = 0.0;
    for (double p : probs) {
      if (p < 0.0) throw DomainError("sampler: negative probability");
      acc += p;
      cdf_.push_back(acc);
    }
    if (std::abs(acc - 1.0) > 1e-9)
      throw DomainError("sampler: probabilities must sum to 1");
    cdf_.back() = 1.0;
  }

  int sample() {
    const double u = rng_.uniform();
    for (std::size_t i = 0; i < cdf_.size(); ++i)
      if (u < cdf_[i]) return bits_[i];
    return bits_.back();
  }

 private:
  std::vector<int> bits_;
  std::vector<double> cdf_;
  Rng rng_;
};

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag,
                                 std::uint64_t salt) {
  std::uint64_t v[3] = {base, tag, salt};
  return fnv1a(v, sizeof(v));
}

inline float finite_loss_or_throw(const Tensor& loss, int epoch,
                                  std::int64_t step, int k) {
  const float v = loss.item();
  if (!std::isfinite(v))
    throw NumericalError("non-finite loss " + std::to_string(v) + " at epoch " +
                         std::to_string(epoch) + " step " + std::to_string(step) +
                         " k=" + std::to_string(k));
  return v;
}

struct AlphaFreezeGuard {
  explicit AlphaFreezeGuard(ModelGraph& model) : model_(&model) {
    for (auto& blk : model_->blocks)
      for (auto& per_k : blk.alpha)
        for (auto& a : per_k) {
          frozen_.push_back(a);
          a.set_requires_grad(false);
        }
  }
  ~AlphaFreezeGuard() {
    for (auto& a : frozen_) a.set_requires_grad(true);
  }
  ModelGraph* model_;
  std::vector<Tensor> frozen_;
};

inline std::vector<Tensor> dedupe(std::vector<Tensor> v) {
  std::unordered_set<const TensorNode*> seen;
  std::vector<Tensor> out;
  out.reserve(v.size());
  for (auto& t : v)
    if (seen.insert(t.node()).second) out.push_back(std::move(t));
  return out;
}

}  // namespace detail

// Stage 1. Updates {W, B_k, h} per candidate; subband scales stay frozen.
inline void warmup(ModelGraph& model, const Dataset& train, const TrainPlan& plan,
                   SgdState& opt) {
  plan.validate();
  if (train.n == 0) throw DataError("warmup: empty dataset");
  detail::AlphaFreezeGuard freeze(model);

  std::int64_t step_counter = 0;
  for (int k : plan.candidates.bits) {
    model.set_active_candidate(k);
    auto trainable = detail::dedupe([&] {
      auto v = model.shared_params();
      auto theta = model.theta_params(k, /*include_alpha=*/false);
      v.insert(v.end(), theta.begin(), theta.end());
      return v;
    }());

    BatchStream stream(train, plan.batch_size,
                       detail::derive_seed(plan.seed, 0xA11, std::uint64_t(k)),
                       /*shuffle=*/true, plan.augment);
    const std::int64_t T =
        plan.warmup_iters >= 0 ? plan.warmup_iters : stream.batches_per_epoch();

    Tensor x;
    std::vector<int> labels;
    std::uint64_t refill = 1;
    for (std::int64_t t = 0; t < T; ++t) {
      if (!stream.next(x, labels)) {
        stream = BatchStream(train, plan.batch_size,
                             detail::derive_seed(plan.seed, 0xA11 + refill++,
                                                 std::uint64_t(k)),
                             true, plan.augment);
        stream.next(x, labels);
      }
      auto loss = softmax_cross_entropy(
          model.forward(x, ForwardSpec::train(k)), labels);
      detail::finite_loss_or_throw(loss, -1, step_counter, k);
      backward(loss);
      sgd_step(trainable, opt, plan.lr.initial, plan.weight_decay, plan.momentum);
      model.project_quant_params();
      ++step_counter;
    }
  }
}

inline double evaluate(ModelGraph& model, const Dataset& data,
                       const ForwardSpec& spec, std::int64_t batch_size,
                       std::int64_t limit = 0) {
  NoGradGuard ng;
  auto pipe = model.build_eval_pipeline(spec);
  BatchStream stream(data, batch_size, 0, /*shuffle=*/false, /*augment=*/false);
  Tensor x;
  std::vector<int> labels;
  std::int64_t correct = 0, total = 0;
  while (stream.next(x, labels)) {
    auto logits = pipe.run(x);
    const std::int64_t C = logits.dim(1);
    for (std::int64_t i = 0; i < logits.dim(0); ++i) {
      const float* row = logits.data().data() + i * C;
      std::int64_t best = 0;
      for (std::int64_t j = 1; j < C; ++j)
        if (row[j] > row[best]) best = j;
      correct += (best == labels[std::size_t(i)]);
      ++total;
      if (limit > 0 && total >= limit) return double(correct) / double(total);
    }
  }
  return double(correct) / double(total);
}

// Top-1 accuracy for every candidate; mutates nothing.
inline std::map<int, double> evaluate_all(ModelGraph& model, const Dataset& data,
                                          std::int64_t batch_size = 256,
                                          std::int64_t limit = 0) {
  std::map<int, double> acc;
  for (int k : model.cfg.candidates.bits)
    acc[k] = evaluate(model, data, ForwardSpec::eval(k), batch_size, limit);
  return acc;
}

// Stage 2. One sampled candidate per optimizer step (or every candidate per
// step in joint mode); logs every step and sweeps all candidates per epoch.
inline TrainLog dynamic_train(ModelGraph& model, const Dataset& train,
                              const Dataset* eval_set, const TrainPlan& plan,
                              SgdState& opt) {
  plan.validate();
  if (train.n == 0) throw DataError("dynamic_train: empty dataset");

  TrainLog log;
  BitSampler sampler(plan.candidates, plan.effective_probs(),
                     detail::derive_seed(plan.seed, 0x5A4, 0));
  std::int64_t step_counter = 0;

  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    const float lr = plan.lr.at_epoch(epoch, plan.epochs);
    BatchStream stream(train, plan.batch_size,
                       detail::derive_seed(plan.seed, 0xE90C, std::uint64_t(epoch)),
                       /*shuffle=*/true, plan.augment);
    Tensor x;
    std::vector<int> labels;
    while (stream.next(x, labels)) {
      if (plan.joint_mode) {
        Tensor total;
        for (int k : plan.candidates.bits) {
          model.set_active_candidate(k);
          auto l = softmax_cross_entropy(model.forward(x, ForwardSpec::train(k)),
                                         labels);
          total = total.defined() ? add(total, l) : l;
        }
        const float lv = detail::finite_loss_or_throw(total, epoch, step_counter,
                                                      0);
        backward(total);
        auto trainable = detail::dedupe([&] {
          auto v = model.shared_params();
          for (int k : plan.candidates.bits) {
            auto theta = model.theta_params(k, true);
            v.insert(v.end(), theta.begin(), theta.end());
          }
          return v;
        }());
        sgd_step(trainable, opt, lr, plan.weight_decay, plan.momentum);
        model.project_quant_params();
        log.rows.push_back({epoch, step_counter, 0, lv});
      } else {
        const int k = sampler.sample();
        model.set_active_candidate(k);
        auto loss = softmax_cross_entropy(model.forward(x, ForwardSpec::train(k)),
                                          labels);
        const float lv = detail::finite_loss_or_throw(loss, epoch, step_counter, k);
        backward(loss);
        auto trainable = detail::dedupe([&] {
          auto v = model.shared_params();
          auto theta = model.theta_params(k, true);
          v.insert(v.end(), theta.begin(), theta.end());
          return v;
        }());
        sgd_step(trainable, opt, lr, plan.weight_decay, plan.momentum);
        model.project_quant_params();
        log.rows.push_back({epoch, step_counter, k, lv});
      }
      ++step_counter;
    }
    if (eval_set)
      log.eval_accuracy.push_back(
          evaluate_all(model, *eval_set, 256, plan.eval_subset));
  }
  return log;
}

}  // namespace msq
