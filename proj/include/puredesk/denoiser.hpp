#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "puredesk/autodiff.hpp"
#include "puredesk/rng.hpp"

namespace puredesk {

/// Reduced U-Net for noise prediction on small square images: a stem conv,
/// two convs per encoder stage with 2x average pooling, a bottleneck stage,
/// two convs per decoder stage with nearest-neighbour upsampling and skip
/// concatenation, and a per-channel affine before the output conv. Each stage
/// is conditioned on t by adding a learned projection of a sinusoidal
/// embedding to its feature channels between the two convs.
struct DenoiserDescriptor {
  int image_size = 16;
  int channels = 3;
  std::vector<int> widths = {32, 64};  // encoder stage widths, shallow to deep
  int embed_dim = 64;
  int max_timestep = 1000;

  int stages() const { return static_cast<int>(widths.size()); }

  void validate() const {
    if (widths.empty()) throw std::invalid_argument("denoiser: descriptor needs at least one stage");
    for (int w : widths)
      if (w < 1) throw std::invalid_argument("denoiser: stage widths must be positive");
    if (embed_dim < 4 || embed_dim % 2 != 0)
      throw std::invalid_argument("denoiser: embed_dim must be even and >= 4");
    if (channels < 1) throw std::invalid_argument("denoiser: channels must be positive");
    if (max_timestep < 1) throw std::invalid_argument("denoiser: max_timestep must be positive");
    const int down = 1 << stages();
    if (image_size < 2 * down || image_size % down != 0)
      throw std::invalid_argument(
          "denoiser: image_size must be a multiple of 2^stages and >= 2^(stages+1)");
  }
};

inline bool operator==(const DenoiserDescriptor& a, const DenoiserDescriptor& b) {
  return a.image_size == b.image_size && a.channels == b.channels && a.widths == b.widths &&
         a.embed_dim == b.embed_dim && a.max_timestep == b.max_timestep;
}

/// Named parameter tensors in a fixed declaration order (the checkpoint and
/// optimizer orders). Tensors share buffers on copy; a trained model is a new
/// snapshot, never an in-place mutation.
struct DenoiserParams {
  DenoiserDescriptor desc;
  std::vector<std::pair<std::string, ad::Tensor>> tensors;

  const ad::Tensor& at(std::string_view name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw std::invalid_argument("denoiser: no parameter named " + std::string(name));
  }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : tensors) n += t.size();
    return n;
  }
};

/// Sinusoidal time embedding, dim even, values in [-1, 1].
inline std::vector<double> time_embedding(int t, int dim) {
  std::vector<double> e(static_cast<std::size_t>(dim));
  const int half = dim / 2;
  const int denom = half > 1 ? half - 1 : 1;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / double(denom));
    e[static_cast<std::size_t>(2 * i)] = std::sin(t * freq);
    e[static_cast<std::size_t>(2 * i + 1)] = std::cos(t * freq);
  }
  return e;
}

namespace detail {

struct LayerSpec {
  std::string name;
  ad::Shape shape;
  double init_std;  // > 0 -> scaled normal, 0 -> zeros, < 0 -> ones
};

// The full parameter layout implied by a descriptor. Each stage holds
// conv1 + time projection + conv2. Decoder stage i always consumes
// 2*widths[i] channels: its carried input and the stage-i skip both have
// widths[i] channels.
inline std::vector<LayerSpec> denoiser_layout(const DenoiserDescriptor& d) {
  std::vector<LayerSpec> layers;
  const int S = d.stages();
  auto width = [&](int i) { return d.widths[static_cast<std::size_t>(i)]; };
  auto conv = [&](const std::string& name, int out_ch, int in_ch) {
    layers.push_back({name + ".weight", {out_ch, in_ch, 3, 3}, std::sqrt(2.0 / (in_ch * 9))});
    layers.push_back({name + ".bias", {out_ch}, 0.0});
  };
  auto stage = [&](const std::string& name, int out_ch, int in_ch) {
    conv(name + ".conv1", out_ch, in_ch);
    layers.push_back(
        {name + ".temb.weight", {d.embed_dim, out_ch}, 1.0 / std::sqrt(double(d.embed_dim))});
    layers.push_back({name + ".temb.bias", {out_ch}, 0.0});
    conv(name + ".conv2", out_ch, out_ch);
  };
  conv("stem", width(0), d.channels);
  for (int i = 0; i < S; ++i)
    stage("enc" + std::to_string(i), width(i), i == 0 ? width(0) : width(i - 1));
  stage("mid", width(S - 1), width(S - 1));
  for (int i = S - 1; i >= 0; --i)
    stage("dec" + std::to_string(i), i == 0 ? width(0) : width(i - 1), 2 * width(i));
  layers.push_back({"head.gain", {width(0)}, -1.0});
  layers.push_back({"head.bias", {width(0)}, 0.0});
  conv("head.conv", d.channels, width(0));
  return layers;
}

}  // namespace detail

/// Deterministic initialization: fan-in scaled normal weights, zero biases,
/// unit head gain. Same seed, same descriptor -> bit-identical parameters.
inline DenoiserParams init_denoiser(const DenoiserDescriptor& desc, std::uint64_t seed) {
  desc.validate();
  Rng rng(seed);
  DenoiserParams p;
  p.desc = desc;
  for (const auto& layer : detail::denoiser_layout(desc)) {
    ad::Tensor t = ad::Tensor::zeros(layer.shape);
    double* v = t.data();
    if (layer.init_std > 0.0) {
      for (std::int64_t i = 0; i < t.size(); ++i) v[i] = rng.normal() * layer.init_std;
    } else if (layer.init_std < 0.0) {
      for (std::int64_t i = 0; i < t.size(); ++i) v[i] = 1.0;
    }
    p.tensors.emplace_back(layer.name, std::move(t));
  }
  return p;
}

/// Rebinds every parameter tensor as a differentiable leaf of `tape`.
inline DenoiserParams bind_leaves(ad::Tape& tape, const DenoiserParams& p) {
  DenoiserParams out;
  out.desc = p.desc;
  out.tensors.reserve(p.tensors.size());
  for (const auto& [name, t] : p.tensors) out.tensors.emplace_back(name, tape.leaf(t));
  return out;
}

/// eps_theta(x, t): noise prediction for x of shape [N, C, S, S], shared t.
/// Pure function of (params, x, t); differentiable w.r.t. both the parameters
/// and x whenever they are tape-attached.
inline ad::Tensor predict_noise(const DenoiserParams& p, const ad::Tensor& x, int t) {
  const DenoiserDescriptor& d = p.desc;
  if (t < 1 || t > d.max_timestep)
    throw std::out_of_range("predict_noise: t=" + std::to_string(t) + " outside [1, " +
                            std::to_string(d.max_timestep) + "]");
  if (x.ndim() != 4 || x.dim(1) != d.channels || x.dim(2) != d.image_size ||
      x.dim(3) != d.image_size)
    throw std::invalid_argument("predict_noise: input shape " + ad::shape_str(x.shape()) +
                                " does not match descriptor");

  const ad::Tensor emb = ad::Tensor::from({1, d.embed_dim}, time_embedding(t, d.embed_dim));
  auto conv_block = [&](const ad::Tensor& h, const std::string& name) {
    return ad::add_channel(ad::conv2d(h, p.at(name + ".weight"), 1, 1), p.at(name + ".bias"));
  };
  // conv1 + projected time embedding, then conv2, silu after each.
  auto stage = [&](const ad::Tensor& h, const std::string& name) {
    ad::Tensor v =
        ad::add_bias(ad::matmul(emb, p.at(name + ".temb.weight")), p.at(name + ".temb.bias"));
    ad::Tensor h1 = ad::silu(ad::add_channel(conv_block(h, name + ".conv1"), v));
    return ad::silu(conv_block(h1, name + ".conv2"));
  };

  const int S = d.stages();
  ad::Tensor h = ad::silu(conv_block(x, "stem"));
  std::vector<ad::Tensor> skips;
  skips.reserve(static_cast<std::size_t>(S));
  for (int i = 0; i < S; ++i) {
    h = stage(h, "enc" + std::to_string(i));
    skips.push_back(h);
    h = ad::avg_pool2(h);
  }
  h = stage(h, "mid");
  for (int i = S - 1; i >= 0; --i) {
    h = ad::upsample2x(h);
    h = ad::concat_channels(h, skips[static_cast<std::size_t>(i)]);
    h = stage(h, "dec" + std::to_string(i));
  }
  h = ad::add_channel(ad::mul_channel(h, p.at("head.gain")), p.at("head.bias"));
  return conv_block(h, "head.conv");
}

}  // namespace puredesk
