#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

namespace puredesk {

/// Linear beta schedule and the derived per-step quantities. Timesteps are
/// 1-based: t runs over [1, T].
///
/// alpha_bar is built as the exact running product alpha_bar_t =
/// alpha_t * alpha_bar_{t-1}. The posterior variance uses alpha_bar_0 = 1,
/// which makes posterior_var(1) exactly zero: the final denoising step is
/// noiseless.
class NoiseSchedule {
 public:
  NoiseSchedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
      throw std::invalid_argument("make_schedule: require 0 < beta_start <= beta_end < 1");
    T_ = T;
    beta_start_ = beta_start;
    beta_end_ = beta_end;
    beta_.resize(static_cast<std::size_t>(T));
    alpha_.resize(static_cast<std::size_t>(T));
    alpha_bar_.resize(static_cast<std::size_t>(T));
    posterior_var_.resize(static_cast<std::size_t>(T));
    double abar = 1.0;
    for (int t = 1; t <= T; ++t) {
      const double b =
          T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / double(T - 1);
      const double abar_prev = abar;
      beta_[static_cast<std::size_t>(t - 1)] = b;
      alpha_[static_cast<std::size_t>(t - 1)] = 1.0 - b;
      abar = (1.0 - b) * abar;
      alpha_bar_[static_cast<std::size_t>(t - 1)] = abar;
      posterior_var_[static_cast<std::size_t>(t - 1)] = b * (1.0 - abar_prev) / (1.0 - abar);
    }
  }

  int T() const { return T_; }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return beta_[idx(t)]; }
  double alpha(int t) const { return alpha_[idx(t)]; }
  double alpha_bar(int t) const { return alpha_bar_[idx(t)]; }
  double alpha_bar_prev(int t) const { return t == 1 ? 1.0 : alpha_bar_[idx(t - 1)]; }
  double posterior_var(int t) const { return posterior_var_[idx(t)]; }
  double sigma(int t) const { return std::sqrt(posterior_var_[idx(t)]); }

  void check_t(int t) const {
    if (t < 1 || t > T_)
      throw std::out_of_range("timestep t=" + std::to_string(t) + " outside [1, " +
                              std::to_string(T_) + "]");
  }

 private:
  std::size_t idx(int t) const {
    check_t(t);
    return static_cast<std::size_t>(t - 1);
  }

  int T_ = 0;
  double beta_start_ = 0.0, beta_end_ = 0.0;
  std::vector<double> beta_, alpha_, alpha_bar_, posterior_var_;
};

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  return NoiseSchedule(T, beta_start, beta_end);
}

}  // namespace puredesk
