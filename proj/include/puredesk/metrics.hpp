#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "puredesk/backdoor.hpp"
#include "puredesk/inversion.hpp"

namespace puredesk {

/// Sampling statistics of a candidate trigger. asr/l2 are absent when no
/// target or ground-truth trigger was supplied.
struct MetricReport {
  double uniform_score = 0.0;
  std::optional<double> asr;
  std::optional<double> l2_to_gt;
  int num_samples = 0;  // M, uniform score
  int num_trials = 0;   // N, asr
  std::optional<double> asr_threshold;
};

namespace detail {

inline double dist_normalized(const double* a, const double* b, std::int64_t n) {
  double acc = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc) / std::sqrt(double(n));
}

}  // namespace detail

/// Pair-averaged, dimension-normalized spread of a sample batch:
///   (2 / (M (M-1))) * sum_{i<j} ||s_i - s_j||_2 / sqrt(D).
/// Zero iff all samples are identical. The pair distances are summed in
/// sorted order, so the score is exactly invariant under sample permutation.
inline double uniform_score(const ad::Tensor& samples) {
  if (samples.ndim() < 2 || samples.dim(0) < 2)
    throw std::invalid_argument("uniform_score: need at least 2 samples");
  const int m = samples.dim(0);
  const std::int64_t d = samples.size() / m;
  std::vector<double> dists;
  dists.reserve(static_cast<std::size_t>(m) * (m - 1) / 2);
  for (int i = 0; i < m; ++i)
    for (int j = i + 1; j < m; ++j)
      dists.push_back(detail::dist_normalized(samples.data() + i * d, samples.data() + j * d, d));
  std::sort(dists.begin(), dists.end());
  double total = 0.0;
  for (double v : dists) total += v;
  return 2.0 * total / (double(m) * double(m - 1));
}

/// Fraction of samples whose normalized distance to the target is below the
/// threshold.
inline double asr(const ad::Tensor& samples, const ad::Tensor& target, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("asr: threshold must be positive");
  if (samples.ndim() < 2 || samples.dim(0) < 1)
    throw std::invalid_argument("asr: non-empty sample batch required");
  const int m = samples.dim(0);
  const std::int64_t d = samples.size() / m;
  if (target.size() != d)
    throw std::invalid_argument("asr: target shape does not match samples");
  int hits = 0;
  for (int i = 0; i < m; ++i)
    if (detail::dist_normalized(samples.data() + i * d, target.data(), d) < threshold) ++hits;
  return double(hits) / double(m);
}

/// Plain (unnormalized) L2 distance between two triggers.
inline double l2_to_ground_truth(const ad::Tensor& inverted, const ad::Tensor& gt) {
  if (inverted.shape() != gt.shape())
    throw std::invalid_argument("l2_to_ground_truth: shape mismatch " +
                                ad::shape_str(inverted.shape()) + " vs " +
                                ad::shape_str(gt.shape()));
  double acc = 0.0;
  for (std::int64_t i = 0; i < inverted.size(); ++i) {
    const double d = inverted.at(i) - gt.at(i);
    acc += d * d;
  }
  return std::sqrt(acc);
}

/// Midpoint between the mean normalized target distance of plain samples and
/// of trigger-conditioned samples; the stock per-model ASR threshold.
inline double calibrate_asr_threshold(const ad::Tensor& clean_samples,
                                      const ad::Tensor& triggered_samples,
                                      const ad::Tensor& target) {
  auto mean_dist = [&](const ad::Tensor& batch) {
    const int m = batch.dim(0);
    const std::int64_t d = batch.size() / m;
    if (target.size() != d)
      throw std::invalid_argument("calibrate_asr_threshold: target shape mismatch");
    double acc = 0.0;
    for (int i = 0; i < m; ++i)
      acc += detail::dist_normalized(batch.data() + i * d, target.data(), d);
    return acc / m;
  };
  return 0.5 * (mean_dist(clean_samples) + mean_dist(triggered_samples));
}

struct DetectConfig {
  double uniform_threshold = 0.05;  // backdoored iff score < threshold
  int num_samples = 64;             // M
  int num_trials = 64;              // N (asr, when a target is known)
  double asr_threshold = 0.5;

  void validate() const {
    if (!(uniform_threshold > 0.0))
      throw std::invalid_argument("detect: uniform_threshold must be positive");
    if (num_samples < 2) throw std::invalid_argument("detect: num_samples must be >= 2");
    if (num_trials < 1) throw std::invalid_argument("detect: num_trials must be >= 1");
  }
};

struct DetectionResult {
  bool backdoored = false;
  MetricReport report;
  InversionResult inversion;
};

/// Full detection pass: invert a trigger, sample M images from it, and label
/// the model backdoored iff the uniform score falls below the threshold.
inline DetectionResult detect_backdoor(const DenoiserParams& model, const NoiseSchedule& s,
                                       const ShiftScales& lambda, const InversionConfig& inv_cfg,
                                       const DetectConfig& det_cfg, Rng& rng) {
  det_cfg.validate();
  DetectionResult res;
  res.inversion = invert_trigger(model, s, lambda, inv_cfg, rng);
  ad::Tensor samples =
      backdoor_sample(make_predictor(model), s, res.inversion.trigger, rng, det_cfg.num_samples);
  res.report.uniform_score = uniform_score(samples);
  res.report.num_samples = det_cfg.num_samples;
  res.backdoored = res.report.uniform_score < det_cfg.uniform_threshold;
  return res;
}

}  // namespace puredesk
