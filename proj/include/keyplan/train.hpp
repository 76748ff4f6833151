#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "keyplan/model.hpp"
#include "keyplan/sequence.hpp"

namespace keyplan {

struct TrainConfig {
  double lr = 3e-3;
  double min_lr_ratio = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  int warmup = 50;
  int batch = 16;
  int steps = 1000;
  std::uint64_t seed = 0;
  /// Weight of the surrounding context vision tokens in the planner loss.
  double aux_context_weight = 0.0;
  /// Log every n steps (the last step is always logged).
  int log_every = 10;

  void validate() const {
    if (!(lr > 0.0)) throw InvalidInput("train.lr must be positive");
    if (batch < 1) throw InvalidInput("train.batch must be >= 1");
    if (steps < 0) throw InvalidInput("train.steps must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw InvalidInput("train betas must lie in [0, 1)");
    if (weight_decay < 0.0) throw InvalidInput("train.weight_decay must be >= 0");
    if (log_every < 1) throw InvalidInput("train.log_every must be >= 1");
  }
};

/// AdamW: Adam moments with weight decay applied directly to the weights.
template <typename S>
class AdamW {
 public:
  AdamW(const ParamLayout& layout, double beta1, double beta2, double eps, double weight_decay)
      : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay), m_(layout.total, 0.0), v_(layout.total, 0.0),
        decay_(layout.total, 0) {
    for (auto [lo, hi] : layout.decayed) std::fill(decay_.begin() + static_cast<std::ptrdiff_t>(lo),
                                                   decay_.begin() + static_cast<std::ptrdiff_t>(hi), 1);
  }

  int step_count() const { return t_; }

  void step(std::vector<S>& w, const std::vector<S>& g, double lr) {
    if (g.size() != w.size() || w.size() != m_.size()) throw InvalidInput("optimizer state does not match parameters");
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(static_cast<double>(g[i])))
        throw Error("non-finite gradient at parameter index " + std::to_string(i) + " on optimizer step " +
                    std::to_string(t_ + 1));
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m_[i] = b1_ * m_[i] + (1.0 - b1_) * gi;
      v_[i] = b2_ * v_[i] + (1.0 - b2_) * gi * gi;
      double upd = (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
      if (decay_[i]) upd += wd_ * static_cast<double>(w[i]);
      w[i] = static_cast<S>(static_cast<double>(w[i]) - lr * upd);
    }
  }

 private:
  double b1_, b2_, eps_, wd_;
  std::vector<double> m_, v_;
  std::vector<std::uint8_t> decay_;
  int t_ = 0;
};

/// Linear warmup then cosine decay to min_lr_ratio * lr.
inline double learning_rate(const TrainConfig& cfg, int step) {
  if (step < cfg.warmup) return cfg.lr * (step + 1) / cfg.warmup;
  const double span = std::max(1, cfg.steps - cfg.warmup);
  const double p = std::min(1.0, (step - cfg.warmup) / span);
  const double lo = cfg.lr * cfg.min_lr_ratio;
  return lo + 0.5 * (cfg.lr - lo) * (1.0 + std::cos(std::numbers::pi * p));
}

struct MetricRecord {
  int step = 0;
  Stage stage = Stage::Planner;
  double loss = 0.0;
};

inline std::string metric_json(const MetricRecord& r, const std::string& run_id = {}) {
  nlohmann::json j{{"step", r.step}, {"stage", to_string(r.stage)}, {"loss", r.loss}};
  if (!run_id.empty()) j["run"] = run_id;
  return j.dump();
}

struct TrainHooks {
  std::function<void(const MetricRecord&)> on_metric;
  /// Called after the given step count; used by experiments to evaluate mid-run.
  std::function<void(int step, const Model<float>&)> on_checkpoint;
  std::vector<int> checkpoint_steps;
};

inline std::vector<LossExample> loss_examples(const std::vector<TrainingSequence>& seqs, Stage stage,
                                              const TrainConfig& cfg, const TokenSpace& ts) {
  std::vector<LossExample> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) {
    if (s.stage != stage)
      throw InvalidInput(std::string("expected ") + to_string(stage) + " samples, found a " + to_string(s.stage) +
                         " sample from episode " + s.meta.episode_id);
    const bool aux = stage == Stage::Planner && cfg.aux_context_weight > 0.0;
    out.push_back(make_loss_example(s.tokens, s.mask, aux ? cfg.aux_context_weight : 0.0,
                                    aux ? std::optional<Region>(ts.vision_region()) : std::nullopt));
  }
  return out;
}

/// Runs `cfg.steps` AdamW steps over shuffled epochs of `examples`.
inline void train_stage(Model<float>& model, const std::vector<LossExample>& examples, Stage stage,
                        const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (examples.empty()) throw InvalidInput(std::string("no ") + to_string(stage) + " samples to train on");
  AdamW<float> opt(model.layout(), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
  Rng rng(cfg.seed ^ (static_cast<std::uint64_t>(stage) * 0x9E3779B97F4A7C15ULL));
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  std::vector<float> grad;
  std::vector<LossExample> batch;
  double running = 0.0;
  int in_window = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    batch.clear();
    for (int b = 0; b < cfg.batch; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        cursor = 0;
      }
      batch.push_back(examples[order[cursor++]]);
    }
    grad.assign(model.params().size(), 0.0f);
    const double loss = loss_and_grad<float>(model, batch, &grad);
    if (cfg.grad_clip > 0.0) {
      double sq = 0.0;
      for (float g : grad) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (norm > cfg.grad_clip)
        for (float& g : grad) g = static_cast<float>(g * (cfg.grad_clip / norm));
    }
    opt.step(model.params(), grad, learning_rate(cfg, step));
    running += loss;
    ++in_window;
    if (hooks.on_metric && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps)) {
      hooks.on_metric({step + 1, stage, running / in_window});
      running = 0.0;
      in_window = 0;
    }
    if (hooks.on_checkpoint &&
        std::find(hooks.checkpoint_steps.begin(), hooks.checkpoint_steps.end(), step + 1) != hooks.checkpoint_steps.end())
      hooks.on_checkpoint(step + 1, model);
  }
}

inline Model<float> train_stage1(const std::vector<TrainingSequence>& samples, const ModelConfig& mcfg,
                                 const TrainConfig& cfg, const TokenSpace& ts, const TrainHooks& hooks = {}) {
  Model<float> model(mcfg);
  model.init(cfg.seed);
  train_stage(model, loss_examples(samples, Stage::Planner, cfg, ts), Stage::Planner, cfg, hooks);
  return model;
}

/// Continues from `init`; pass a freshly initialised model for the
/// from-scratch arm.
inline Model<float> train_stage2(Model<float> init, const std::vector<TrainingSequence>& samples,
                                 const TrainConfig& cfg, const TokenSpace& ts, const TrainHooks& hooks = {}) {
  train_stage(init, loss_examples(samples, Stage::Policy, cfg, ts), Stage::Policy, cfg, hooks);
  return init;
}

}  // namespace keyplan
