#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "puredesk/tensor.hpp"

namespace puredesk {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over a fixed set of parameter slots. Each step produces new parameter
/// tensors; callers keep the slot order stable across steps.
class Adam {
 public:
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {
    if (!(cfg.lr > 0.0)) throw std::invalid_argument("adam: learning rate must be positive");
  }

  void begin_step() { ++step_; }

  ad::Tensor update(std::size_t slot, const ad::Tensor& param, const ad::Tensor& grad) {
    if (param.size() != grad.size()) throw std::invalid_argument("adam: grad size mismatch");
    if (m_.size() <= slot) {
      m_.resize(slot + 1);
      v_.resize(slot + 1);
    }
    auto& m = m_[slot];
    auto& v = v_[slot];
    if (m.empty()) {
      m.assign(static_cast<std::size_t>(param.size()), 0.0);
      v.assign(static_cast<std::size_t>(param.size()), 0.0);
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    ad::Tensor out = ad::Tensor::zeros(param.shape());
    const double *p = param.data(), *g = grad.data();
    double* o = out.data();
    for (std::int64_t i = 0; i < param.size(); ++i) {
      const auto k = static_cast<std::size_t>(i);
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[i];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mh = m[k] / bc1;
      const double vh = v[k] / bc2;
      o[i] = p[i] - cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
    return out;
  }

 private:
  AdamConfig cfg_;
  std::int64_t step_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace puredesk
