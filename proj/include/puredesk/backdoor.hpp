#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "puredesk/diffusion.hpp"
#include "puredesk/optim.hpp"

namespace puredesk {

enum class BackdoorFamily { BadDiffusion, TrojDiffForward };

inline const char* family_name(BackdoorFamily f) {
  return f == BackdoorFamily::BadDiffusion ? "baddiffusion" : "trojdiff-forward";
}

/// A trigger/target pair plus the poisoned-transition family. `gamma` is the
/// TrojDiff blending coefficient, unused for BadDiffusion.
struct BackdoorSpec {
  ad::Tensor trigger;  // [C, H, W]
  ad::Tensor target;   // [C, H, W]
  BackdoorFamily family = BackdoorFamily::BadDiffusion;
  double gamma = 0.5;
  double poison_rate = 0.1;

  void validate() const {
    if (!trigger.defined() || !target.defined())
      throw std::invalid_argument("backdoor: trigger and target must be set");
    if (trigger.ndim() != 3 || target.shape() != trigger.shape())
      throw std::invalid_argument("backdoor: trigger/target must be matching [C,H,W] images");
    if (!(poison_rate > 0.0) || !(poison_rate < 1.0))
      throw std::invalid_argument("backdoor: poison_rate must lie in (0, 1)");
    if (family == BackdoorFamily::TrojDiffForward && (gamma < 0.0 || gamma > 1.0))
      throw std::invalid_argument("backdoor: gamma must lie in [0, 1]");
  }

  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    if (poison_rate < 0.05 || poison_rate > 0.2)
      w.push_back("poison_rate " + std::to_string(poison_rate) +
                  " outside the usual [0.05, 0.2] band");
    return w;
  }
};

/// Per-step trigger and noise amounts m(t), n(t) of the poisoned transition
///   x*_t = sqrt(alpha_t) x*_{t-1} + m(t) delta + noise(n(t)).
///
/// BadDiffusion uses m(t) = 1 - sqrt(alpha_t), whose cumulative coefficient
/// telescopes to exactly 1 - sqrt(abar_t), and n(t) = beta_t. TrojDiffForward
/// uses m(t) = k_t (1 - gamma) with k_t chosen so the trigger coefficient
/// telescopes to sqrt(1 - abar_t) (1 - gamma), and n(t) = gamma beta_t.
struct BackdoorSchedule {
  std::vector<double> m, n;  // index t-1
};

inline BackdoorSchedule make_backdoor_schedule(const NoiseSchedule& s, BackdoorFamily family,
                                               double gamma = 0.5) {
  BackdoorSchedule b;
  b.m.resize(static_cast<std::size_t>(s.T()));
  b.n.resize(static_cast<std::size_t>(s.T()));
  for (int t = 1; t <= s.T(); ++t) {
    if (family == BackdoorFamily::BadDiffusion) {
      b.m[static_cast<std::size_t>(t - 1)] = 1.0 - std::sqrt(s.alpha(t));
      b.n[static_cast<std::size_t>(t - 1)] = s.beta(t);
    } else {
      const double k = std::sqrt(1.0 - s.alpha_bar(t)) -
                       std::sqrt(s.alpha(t)) * std::sqrt(1.0 - s.alpha_bar_prev(t));
      b.m[static_cast<std::size_t>(t - 1)] = k * (1.0 - gamma);
      b.n[static_cast<std::size_t>(t - 1)] = gamma * s.beta(t);
    }
  }
  return b;
}

/// Direct sampling of the poisoned forward process at step t.
///   BadDiffusion:    sqrt(abar) x*_0 + (1 - sqrt(abar)) delta + sqrt(1-abar) eps
///   TrojDiffForward: sqrt(abar) x*_0 + sqrt(1-abar)(1-gamma) delta + sqrt(1-abar) gamma eps
inline ad::Tensor backdoor_forward_sample(const BackdoorSpec& spec, const NoiseSchedule& s,
                                          const ad::Tensor& x0_target, int t,
                                          const ad::Tensor& eps) {
  s.check_t(t);
  ad::detail::check_same_shape("backdoor_forward_sample", x0_target, eps);
  if (spec.trigger.size() * (x0_target.ndim() == 4 ? x0_target.dim(0) : 1) != x0_target.size())
    throw std::invalid_argument("backdoor_forward_sample: trigger does not match image shape");
  const double ab = s.alpha_bar(t);
  ad::Tensor delta = x0_target.ndim() == 4 ? ad::tile_batch(spec.trigger, x0_target.dim(0))
                                           : spec.trigger;
  if (spec.family == BackdoorFamily::BadDiffusion) {
    return ad::add(ad::add(ad::scale(x0_target, std::sqrt(ab)),
                           ad::scale(delta, 1.0 - std::sqrt(ab))),
                   ad::scale(eps, std::sqrt(1.0 - ab)));
  }
  const double root = std::sqrt(1.0 - ab);
  return ad::add(ad::add(ad::scale(x0_target, std::sqrt(ab)),
                         ad::scale(delta, root * (1.0 - spec.gamma))),
                 ad::scale(eps, root * spec.gamma));
}

/// Regression target for a poisoned item: the effective noise
/// (1 - sqrt(abar_t)) / sqrt(1 - abar_t) * delta + eps implied by rewriting
/// the poisoned direct sampling in the clean sqrt(abar) x0 + sqrt(1-abar) eps'
/// form (BadDiffusion).
inline ad::Tensor backdoor_poison_target(const BackdoorSpec& spec, const NoiseSchedule& s, int t,
                                         const ad::Tensor& eps) {
  const double ab = s.alpha_bar(t);
  const double coef = (1.0 - std::sqrt(ab)) / std::sqrt(1.0 - ab);
  ad::Tensor delta = eps.ndim() == 4 ? ad::tile_batch(spec.trigger, eps.dim(0)) : spec.trigger;
  return ad::add(ad::scale(delta, coef), eps);
}

namespace detail {

// Shared batch objective for clean and poisoned training. Draw order per
// batch: first one poison draw per item (consumed whether or not an attack is
// configured, so the clean path and a zero-effect attack consume the rng
// identically), then per item t ~ U[1,T] and eps ~ N(0,I).
inline ad::Tensor training_batch_loss(const Predictor& pred, const NoiseSchedule& s,
                                      const BackdoorSpec* attack, const ad::Tensor& batch,
                                      Rng& rng) {
  if (batch.ndim() != 4 || batch.dim(0) < 1)
    throw std::invalid_argument("training loss: non-empty NCHW batch required");
  const int B = batch.dim(0);
  std::vector<bool> poisoned(static_cast<std::size_t>(B));
  for (int i = 0; i < B; ++i) {
    const double u = rng.uniform();
    poisoned[static_cast<std::size_t>(i)] = attack && u < attack->poison_rate;
  }
  ad::Tensor total;
  for (int i = 0; i < B; ++i) {
    const int t = static_cast<int>(rng.uniform_int(1, s.T()));
    ad::Tensor x0 = poisoned[static_cast<std::size_t>(i)]
                        ? ad::tile_batch(attack->target, 1)
                        : ad::tile_batch(ad::batch_item(batch, i), 1);
    ad::Tensor eps = ad::Tensor::zeros(x0.shape());
    rng.fill_normal(eps.data(), eps.size());
    ad::Tensor x_t;
    ad::Tensor reg_target;
    if (poisoned[static_cast<std::size_t>(i)]) {
      x_t = backdoor_forward_sample(*attack, s, x0, t, eps);
      reg_target = backdoor_poison_target(*attack, s, t, eps);
    } else {
      x_t = forward_sample(s, x0, t, eps);
      reg_target = eps;
    }
    ad::Tensor part = ad::sum(ad::square(ad::sub(reg_target, pred(x_t, t))));
    total = total.defined() ? ad::add(total, part) : part;
  }
  const double inv = 1.0 / (double(B) * double(batch.size() / B));
  return ad::scale(total, inv);
}

}  // namespace detail

/// Mixed clean/poisoned objective. Poison membership is drawn per item up
/// front (one uniform draw each), then (t, eps) per item as in ddpm_loss.
inline ad::Tensor backdoor_loss(const Predictor& pred, const NoiseSchedule& s,
                                const BackdoorSpec& spec, const ad::Tensor& clean_batch,
                                Rng& rng) {
  spec.validate();
  return detail::training_batch_loss(pred, s, &spec, clean_batch, rng);
}

struct TrainConfig {
  int epochs = 30;
  int batch_size = 16;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  bool from_scratch = false;  // backdoor training: ignore the base snapshot

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
  }
};

/// Seeded denoiser training, clean (attack == nullptr) or poisoned. Returns a
/// new parameter snapshot; appends the per-epoch mean loss to `loss_trace`.
/// Throws on a non-finite loss, reporting the failing optimizer step.
inline DenoiserParams train_denoiser(const DenoiserParams& start, const NoiseSchedule& s,
                                     const BackdoorSpec* attack, const ad::Tensor& images,
                                     const TrainConfig& cfg, Rng& rng,
                                     std::vector<double>* loss_trace = nullptr) {
  cfg.validate();
  if (images.ndim() != 4 || images.dim(0) < 1)
    throw std::invalid_argument("train: non-empty NCHW dataset required");
  if (attack) attack->validate();
  const int n = images.dim(0);

  DenoiserParams params = start;
  Adam opt(AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  std::vector<int> order(static_cast<std::size_t>(n));
  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    for (int i = n - 1; i > 0; --i)
      std::swap(order[static_cast<std::size_t>(i)],
                order[static_cast<std::size_t>(rng.uniform_int(0, i))]);

    double epoch_loss = 0.0;
    int batches = 0;
    for (int off = 0; off < n; off += cfg.batch_size) {
      const int bs = std::min(cfg.batch_size, n - off);
      ad::Shape item_shape(images.shape().begin() + 1, images.shape().end());
      ad::Shape bshape;
      bshape.push_back(bs);
      bshape.insert(bshape.end(), item_shape.begin(), item_shape.end());
      ad::Tensor batch = ad::Tensor::zeros(bshape);
      const std::int64_t stride = ad::numel(item_shape);
      for (int i = 0; i < bs; ++i) {
        const double* src = images.data() + std::int64_t(order[static_cast<std::size_t>(off + i)]) * stride;
        std::copy(src, src + stride, batch.data() + std::int64_t(i) * stride);
      }

      ad::Tape tape;
      DenoiserParams bound = bind_leaves(tape, params);
      ad::Tensor loss = detail::training_batch_loss(make_predictor(bound), s, attack, batch, rng);
      ++step;
      if (!std::isfinite(loss.value()))
        throw std::runtime_error("train: non-finite loss at optimizer step " +
                                 std::to_string(step));
      tape.backward(loss);
      opt.begin_step();
      for (std::size_t pi = 0; pi < params.tensors.size(); ++pi)
        params.tensors[pi].second =
            opt.update(pi, params.tensors[pi].second, tape.grad(bound.tensors[pi].second));
      epoch_loss += loss.value();
      ++batches;
    }
    if (loss_trace) loss_trace->push_back(epoch_loss / batches);
  }
  return params;
}

inline DenoiserParams train_clean(const DenoiserParams& start, const NoiseSchedule& s,
                                  const ad::Tensor& images, const TrainConfig& cfg, Rng& rng,
                                  std::vector<double>* loss_trace = nullptr) {
  return train_denoiser(start, s, nullptr, images, cfg, rng, loss_trace);
}

inline DenoiserParams train_backdoor(const DenoiserParams& start, const NoiseSchedule& s,
                                     const BackdoorSpec& spec, const ad::Tensor& images,
                                     const TrainConfig& cfg, Rng& rng,
                                     std::vector<double>* loss_trace = nullptr) {
  spec.validate();
  return train_denoiser(start, s, &spec, images, cfg, rng, loss_trace);
}

/// Runs `count` reverse chains from x*_T = trigger + eps, eps ~ N(0, I).
/// With a zero trigger this consumes the rng exactly like sampling `count`
/// chains from pure noise.
inline ad::Tensor backdoor_sample(const Predictor& pred, const NoiseSchedule& s,
                                  const ad::Tensor& trigger, Rng& rng, int count) {
  if (trigger.ndim() != 3) throw std::invalid_argument("backdoor_sample: trigger must be [C,H,W]");
  ad::Tensor x_T = ad::tile_batch(trigger, count);
  ad::Tensor eps = ad::Tensor::zeros(x_T.shape());
  rng.fill_normal(eps.data(), eps.size());
  return sample(pred, s, ad::add(x_T, eps), rng);
}

}  // namespace puredesk
