#pragma once

#include <cmath>
#include <functional>

#include "puredesk/autodiff.hpp"
#include "puredesk/denoiser.hpp"
#include "puredesk/rng.hpp"
#include "puredesk/schedule.hpp"

namespace puredesk {

/// Noise-prediction interface: eps(x, t). Backed by a denoiser in production
/// code and by analytic stand-ins in tests.
using Predictor = std::function<ad::Tensor(const ad::Tensor&, int)>;

inline Predictor make_predictor(const DenoiserParams& p) {
  return [p](const ad::Tensor& x, int t) { return predict_noise(p, x, t); };
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
inline ad::Tensor forward_sample(const NoiseSchedule& s, const ad::Tensor& x0, int t,
                                 const ad::Tensor& eps) {
  s.check_t(t);
  ad::detail::check_same_shape("forward_sample", x0, eps);
  const double ab = s.alpha_bar(t);
  return ad::add(ad::scale(x0, std::sqrt(ab)), ad::scale(eps, std::sqrt(1.0 - ab)));
}

/// One denoising transition given an already-computed noise prediction:
///   x_{t-1} = (x_t - (1-alpha_t)/sqrt(1-abar_t) eps_pred) / sqrt(alpha_t)
///             + sigma_t * step_noise.
/// Pass step_noise = nullptr for the noiseless transition (sigma term omitted;
/// equivalent to step_noise = 0).
inline ad::Tensor reverse_step_from(const NoiseSchedule& s, const ad::Tensor& x_t, int t,
                                    const ad::Tensor& eps_pred, const ad::Tensor* step_noise) {
  s.check_t(t);
  const double a = s.alpha(t);
  const double ab = s.alpha_bar(t);
  const double coef = (1.0 - a) / std::sqrt(1.0 - ab);
  ad::Tensor mean = ad::scale(ad::sub(x_t, ad::scale(eps_pred, coef)), 1.0 / std::sqrt(a));
  if (!step_noise) return mean;
  return ad::add(mean, ad::scale(*step_noise, s.sigma(t)));
}

/// One denoising transition with the model in the loop. sigma(1) == 0, so the
/// final step ignores eps.
inline ad::Tensor reverse_step(const Predictor& pred, const NoiseSchedule& s,
                               const ad::Tensor& x_t, int t, const ad::Tensor& eps) {
  return reverse_step_from(s, x_t, t, pred(x_t, t), &eps);
}

/// Ancestral sampling from x_T down to x_0, fresh noise each step. x_T may be
/// a batch [N, C, H, W]; chains evolve jointly per step, which keeps the rng
/// draw order stable for a given x_T shape.
inline ad::Tensor sample(const Predictor& pred, const NoiseSchedule& s, ad::Tensor x_T, Rng& rng) {
  for (int t = s.T(); t >= 1; --t) {
    ad::Tensor eps = ad::Tensor::zeros(x_T.shape());
    rng.fill_normal(eps.data(), eps.size());
    x_T = reverse_step(pred, s, x_T, t, eps);
  }
  return x_T;
}

/// Simplified denoising objective: per item draws t ~ U[1, T] and
/// eps ~ N(0, I), then scores || eps - eps_theta(x_t, t) ||^2 averaged over
/// the batch and over elements.
inline ad::Tensor ddpm_loss(const Predictor& pred, const NoiseSchedule& s,
                            const ad::Tensor& x0_batch, Rng& rng) {
  if (x0_batch.ndim() != 4 || x0_batch.dim(0) < 1)
    throw std::invalid_argument("ddpm_loss: non-empty NCHW batch required");
  const int B = x0_batch.dim(0);
  ad::Tensor total;
  for (int i = 0; i < B; ++i) {
    const int t = static_cast<int>(rng.uniform_int(1, s.T()));
    ad::Tensor x0 = ad::tile_batch(ad::batch_item(x0_batch, i), 1);
    ad::Tensor eps = ad::Tensor::zeros(x0.shape());
    rng.fill_normal(eps.data(), eps.size());
    ad::Tensor x_t = forward_sample(s, x0, t, eps);
    ad::Tensor part = ad::sum(ad::square(ad::sub(eps, pred(x_t, t))));
    total = total.defined() ? ad::add(total, part) : part;
  }
  const double inv = 1.0 / (double(B) * double(x0_batch.size() / B));
  return ad::scale(total, inv);
}

}  // namespace puredesk
