#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "puredesk/diffusion.hpp"
#include "puredesk/optim.hpp"
#include "puredesk/shift.hpp"

namespace puredesk {

struct InversionConfig {
  int window = 10;    // learn over t in [T - window + 1, T]
  int epochs = 30;
  int batch_size = 40;  // noise draws per epoch
  double lr = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  bool noise_init = false;       // zeros by default
  double noise_init_scale = 0.05;
  int max_unroll = 12;  // memory guard on the unrolled chain depth

  void validate(int T) const {
    if (window < 1 || window > T)
      throw std::invalid_argument("inversion: window outside [1, T]");
    if (epochs < 0) throw std::invalid_argument("inversion: epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("inversion: batch_size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("inversion: learning rate must be positive");
    if (max_unroll < window - 1)
      throw std::invalid_argument("inversion: max_unroll below window - 1");
  }
};

struct InversionResult {
  ad::Tensor trigger;              // learned delta, unclamped
  std::vector<double> loss_trace;  // one entry per epoch
  ShiftScales lambda_used;
  int epochs_run = 0;
};

/// Runs the reverse chain from x*_T = delta + eps down to x*_t with every
/// transition on the compute graph, so gradients flow from functionals of the
/// result back to delta through T - t stacked denoiser evaluations. The
/// per-step ancestral noise is omitted: the chain is deterministic given
/// (delta, eps). Depths beyond `max_unroll` are refused (memory guard).
inline ad::Tensor unroll_to(const Predictor& pred, const NoiseSchedule& s, const ad::Tensor& delta,
                            const ad::Tensor& eps, int t, int max_unroll) {
  s.check_t(t);
  if (s.T() - t > max_unroll)
    throw std::invalid_argument("unroll_to: depth " + std::to_string(s.T() - t) +
                                " exceeds max unroll " + std::to_string(max_unroll));
  ad::detail::check_same_shape("unroll_to", delta, eps);
  ad::Tensor x = ad::add(delta, eps);
  for (int u = s.T(); u > t; --u) x = reverse_step_from(s, x, u, pred(x, u), nullptr);
  return x;
}

/// Mean over the noise batch of the per-element mean squared deviation
/// between the step-t prediction along the unrolled chain and lambda_t *
/// delta.
inline ad::Tensor inversion_loss(const Predictor& pred, const NoiseSchedule& s,
                                 const ShiftScales& lambda, const ad::Tensor& delta,
                                 const std::vector<ad::Tensor>& eps_batch, int t,
                                 int max_unroll) {
  if (eps_batch.empty()) throw std::invalid_argument("inversion_loss: empty noise batch");
  if (lambda.T() != s.T())
    throw std::invalid_argument("inversion_loss: shift scales cover T=" +
                                std::to_string(lambda.T()) + ", schedule has T=" +
                                std::to_string(s.T()));
  const double lt = lambda.at(t);
  ad::Tensor total;
  for (const ad::Tensor& eps : eps_batch) {
    ad::Tensor x_t = unroll_to(pred, s, delta, eps, t, max_unroll);
    ad::Tensor part = ad::sum(ad::square(ad::sub(pred(x_t, t), ad::scale(delta, lt))));
    total = total.defined() ? ad::add(total, part) : part;
  }
  return ad::scale(total, 1.0 / (double(eps_batch.size()) * double(delta.size())));
}

namespace detail {

inline InversionResult invert_trigger_impl(const Predictor& pred, const NoiseSchedule& s,
                                           const ShiftScales& lambda, const ad::Shape& img_shape,
                                           const InversionConfig& cfg, Rng& rng) {
  cfg.validate(s.T());
  if (lambda.T() != s.T())
    throw std::invalid_argument("invert_trigger: shift scales do not cover the schedule");

  ad::Tensor delta = ad::Tensor::zeros(img_shape);
  if (cfg.noise_init) {
    rng.fill_normal(delta.data(), delta.size());
    for (std::int64_t i = 0; i < delta.size(); ++i) delta.data()[i] *= cfg.noise_init_scale;
  }

  InversionResult res;
  res.lambda_used = lambda;
  Adam opt(AdamConfig{cfg.lr, cfg.beta1, cfg.beta2, 1e-8});
  ad::Shape batched = img_shape;
  batched.insert(batched.begin(), 1);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const int t = static_cast<int>(rng.uniform_int(s.T() - cfg.window + 1, s.T()));
    std::vector<ad::Tensor> eps_batch;
    eps_batch.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) {
      ad::Tensor eps = ad::Tensor::zeros(batched);
      rng.fill_normal(eps.data(), eps.size());
      eps_batch.push_back(std::move(eps));
    }
    ad::Tape tape;
    ad::Tensor leaf = tape.leaf(ad::tile_batch(delta, 1));
    ad::Tensor loss = inversion_loss(pred, s, lambda, leaf, eps_batch, t, cfg.max_unroll);
    if (!std::isfinite(loss.value()))
      throw std::runtime_error("invert_trigger: non-finite loss at epoch " +
                               std::to_string(epoch));
    tape.backward(loss);
    ad::Tensor g = tape.grad(leaf);
    opt.begin_step();
    delta = ad::Tensor::from(img_shape,
                             opt.update(0, ad::Tensor::from(img_shape, delta.values()),
                                        ad::Tensor::from(img_shape, g.values()))
                                 .values());
    res.loss_trace.push_back(loss.value());
    ++res.epochs_run;
  }
  res.trigger = delta;
  return res;
}

}  // namespace detail

/// Multi-timestep trigger inversion: per epoch draws t from the trailing
/// window and a fresh noise batch, differentiates the unrolled-chain loss
/// w.r.t. delta, and applies one Adam step. Deterministic per (seed, config).
inline InversionResult invert_trigger(const DenoiserParams& suspicious, const NoiseSchedule& s,
                                      const ShiftScales& lambda, const InversionConfig& cfg,
                                      Rng& rng) {
  return detail::invert_trigger_impl(
      make_predictor(suspicious), s, lambda,
      {suspicious.desc.channels, suspicious.desc.image_size, suspicious.desc.image_size}, cfg,
      rng);
}

/// Single-step baseline: the same loop pinned to t = T with a constant shift
/// scale of 0.5. Equivalent to invert_trigger with window = 1 and those
/// scales, and bit-identical to it under a shared seed.
inline InversionResult invert_trigger_elijah_baseline(const DenoiserParams& suspicious,
                                                      const NoiseSchedule& s,
                                                      const InversionConfig& cfg, Rng& rng) {
  InversionConfig single = cfg;
  single.window = 1;
  return detail::invert_trigger_impl(
      make_predictor(suspicious), s, fixed_shift_scales(s.T(), 0.5),
      {suspicious.desc.channels, suspicious.desc.image_size, suspicious.desc.image_size}, single,
      rng);
}

}  // namespace puredesk
