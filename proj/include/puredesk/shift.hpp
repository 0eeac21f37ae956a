#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "puredesk/backdoor.hpp"
#include "puredesk/dataset.hpp"
#include "puredesk/diffusion.hpp"

namespace puredesk {

enum class ShiftProvenance { ClosedForm, Empirical, Fixed };

/// Per-timestep trigger-shift scales lambda_1..lambda_T. The closed form
/// depends only on the noise schedule; the empirical estimate is measured on
/// a surrogate-backdoored copy of a model.
struct ShiftScales {
  std::vector<double> lambda;  // index t-1
  ShiftProvenance provenance = ShiftProvenance::ClosedForm;
  std::string surrogate_id;  // Empirical only
  int num_draws = 0;         // Empirical only

  int T() const { return static_cast<int>(lambda.size()); }

  double at(int t) const {
    if (t < 1 || t > T())
      throw std::out_of_range("shift scales: t=" + std::to_string(t) + " outside [1, " +
                              std::to_string(T()) + "]");
    return lambda[static_cast<std::size_t>(t - 1)];
  }
};

/// lambda_t = (1 - sqrt(alpha_t)) sqrt(1 - abar_t) / (1 - alpha_t), evaluated
/// in the equivalent form sqrt(1 - abar_t) / (1 + sqrt(alpha_t)) which stays
/// well-conditioned as beta_t -> 0.
inline ShiftScales lambda_closed_form(const NoiseSchedule& s) {
  ShiftScales out;
  out.provenance = ShiftProvenance::ClosedForm;
  out.lambda.resize(static_cast<std::size_t>(s.T()));
  for (int t = 1; t <= s.T(); ++t)
    out.lambda[static_cast<std::size_t>(t - 1)] =
        std::sqrt(1.0 - s.alpha_bar(t)) / (1.0 + std::sqrt(s.alpha(t)));
  return out;
}

/// Constant scales (the single-step baseline's heuristic 0.5 lives here).
inline ShiftScales fixed_shift_scales(int T, double value) {
  ShiftScales out;
  out.provenance = ShiftProvenance::Fixed;
  out.lambda.assign(static_cast<std::size_t>(T), value);
  return out;
}

/// Measures lambda_t = <eps(x*_t, t), surrogate> / ||surrogate||^2 along
/// reverse chains started at x*_T = surrogate + eps, averaged over
/// `num_draws` chains. The predictor is queried once per step; its output
/// drives both the projection and the next transition.
inline ShiftScales estimate_lambda_with(const Predictor& pred, const NoiseSchedule& s,
                                        const ad::Tensor& surrogate, Rng& rng, int num_draws) {
  if (num_draws < 1) throw std::invalid_argument("estimate_lambda: num_draws must be >= 1");
  if (surrogate.ndim() != 3)
    throw std::invalid_argument("estimate_lambda: surrogate must be [C,H,W]");
  const double nrm2 = ad::norm2_sq(surrogate);
  if (nrm2 == 0.0)
    throw std::invalid_argument("estimate_lambda: surrogate trigger is all-zero");

  std::vector<double> acc(static_cast<std::size_t>(s.T()), 0.0);
  for (int d = 0; d < num_draws; ++d) {
    ad::Tensor x = ad::tile_batch(surrogate, 1);
    ad::Tensor eps = ad::Tensor::zeros(x.shape());
    rng.fill_normal(eps.data(), eps.size());
    x = ad::add(x, eps);
    for (int t = s.T(); t >= 1; --t) {
      ad::Tensor eps_pred = pred(x, t);
      double dp = 0.0;
      for (std::int64_t i = 0; i < surrogate.size(); ++i)
        dp += eps_pred.at(i) * surrogate.at(i);
      acc[static_cast<std::size_t>(t - 1)] += dp / nrm2;
      if (t > 1) {
        ad::Tensor step_noise = ad::Tensor::zeros(x.shape());
        rng.fill_normal(step_noise.data(), step_noise.size());
        x = reverse_step_from(s, x, t, eps_pred, &step_noise);
      }
    }
  }
  ShiftScales out;
  out.provenance = ShiftProvenance::Empirical;
  out.num_draws = num_draws;
  out.lambda.resize(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) out.lambda[i] = acc[i] / num_draws;
  return out;
}

/// Settings for the surrogate backdoor fine-tune used by the empirical
/// estimator. The defender's stand-in dataset is procedurally generated.
struct SurrogateFinetuneConfig {
  TrainConfig train{};  // epochs/lr/batch of the surrogate attack
  double poison_rate = 0.2;
  int dataset_count = 192;

  SurrogateFinetuneConfig() {
    train.epochs = 5;
    train.lr = 1e-3;
    train.batch_size = 16;
  }
};

/// Empirical shift scales of a suspicious model: backdoors a copy with the
/// surrogate trigger (target: the zero image) and measures the projections
/// along its reverse chains. The suspicious snapshot itself is not modified.
inline ShiftScales estimate_lambda_empirical(const DenoiserParams& suspicious,
                                             const NoiseSchedule& s, const ad::Tensor& surrogate,
                                             const SurrogateFinetuneConfig& cfg, Rng& rng,
                                             int num_draws) {
  if (surrogate.ndim() != 3 || ad::norm2_sq(surrogate) == 0.0)
    throw std::invalid_argument("estimate_lambda: surrogate trigger must be non-zero [C,H,W]");
  BackdoorSpec attack;
  attack.trigger = surrogate;
  attack.target = ad::Tensor::zeros(surrogate.shape());
  attack.family = BackdoorFamily::BadDiffusion;
  attack.poison_rate = cfg.poison_rate;

  ImageDataset data = gen_shapes_dataset(cfg.dataset_count, suspicious.desc.image_size, rng.raw());
  DenoiserParams doubled = train_backdoor(suspicious, s, attack, data.images, cfg.train, rng);
  ShiftScales out = estimate_lambda_with(make_predictor(doubled), s, surrogate, rng, num_draws);
  out.surrogate_id = "surrogate-" + std::to_string(fnv1a64(surrogate.data(),
                                                           sizeof(double) * surrogate.size()));
  return out;
}

struct Proposition1Report {
  std::vector<ShiftScales> scales;
  int window = 10;
  double min_pairwise_cosine = 1.0;
  double max_pairwise_rel_dev = 0.0;
};

/// Estimates shift scales for several surrogates on copies of the same model
/// and compares them over the trailing `window` timesteps. Each surrogate's
/// randomness is derived from (one draw of rng, surrogate content), so
/// identical surrogates produce bit-identical scales.
inline Proposition1Report check_proposition1(const DenoiserParams& model, const NoiseSchedule& s,
                                             const std::vector<ad::Tensor>& surrogates,
                                             const SurrogateFinetuneConfig& cfg, Rng& rng,
                                             int num_draws, int window = 10) {
  if (surrogates.size() < 2)
    throw std::invalid_argument("check_proposition1: need at least two surrogates");
  if (window < 1 || window > s.T())
    throw std::invalid_argument("check_proposition1: window outside [1, T]");

  const std::uint64_t base = rng.raw();
  Proposition1Report rep;
  rep.window = window;
  for (const ad::Tensor& sur : surrogates) {
    Rng sub(mix64(base ^ fnv1a64(sur.data(), sizeof(double) * static_cast<std::size_t>(sur.size()))));
    rep.scales.push_back(estimate_lambda_empirical(model, s, sur, cfg, sub, num_draws));
  }

  const int lo = s.T() - window;  // window covers t in (lo, T]
  for (std::size_t i = 0; i < rep.scales.size(); ++i)
    for (std::size_t j = i + 1; j < rep.scales.size(); ++j) {
      double dot = 0.0, ni = 0.0, nj = 0.0, dev = 0.0;
      for (int t = lo + 1; t <= s.T(); ++t) {
        const double a = rep.scales[i].at(t), b = rep.scales[j].at(t);
        dot += a * b;
        ni += a * a;
        nj += b * b;
        const double denom = std::max(1e-12, 0.5 * (std::abs(a) + std::abs(b)));
        dev = std::max(dev, std::abs(a - b) / denom);
      }
      const double cos = dot / std::max(1e-300, std::sqrt(ni) * std::sqrt(nj));
      rep.min_pairwise_cosine = std::min(rep.min_pairwise_cosine, cos);
      rep.max_pairwise_rel_dev = std::max(rep.max_pairwise_rel_dev, dev);
    }
  return rep;
}

}  // namespace puredesk
