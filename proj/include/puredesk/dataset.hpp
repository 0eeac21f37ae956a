#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "puredesk/rng.hpp"
#include "puredesk/tensor.hpp"

namespace puredesk {

struct ImageDataset {
  ad::Tensor images;  // [N, 3, S, S], values in [-1, 1]
  std::vector<std::uint8_t> labels;
};

namespace detail {

inline void fill_pixel(double* img, int size, int y, int x, const double rgb[3]) {
  for (int c = 0; c < 3; ++c) img[(static_cast<std::int64_t>(c) * size + y) * size + x] = rgb[c];
}

}  // namespace detail

/// Procedural 16x16-class imagery: one colored rectangle, disc, or cross per
/// image on a solid background. Deterministic per seed; all values in [-1, 1].
/// Labels are the shape kind (0 rectangle, 1 disc, 2 cross).
inline ImageDataset gen_shapes_dataset(int count, int size, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("gen_shapes_dataset: count must be >= 1");
  if (size != 8 && size != 16 && size != 32)
    throw std::invalid_argument("gen_shapes_dataset: size must be 8, 16 or 32");
  Rng rng(seed);
  ImageDataset ds;
  ds.images = ad::Tensor::zeros({count, 3, size, size});
  ds.labels.resize(static_cast<std::size_t>(count));
  const std::int64_t stride = static_cast<std::int64_t>(3) * size * size;

  for (int i = 0; i < count; ++i) {
    double* img = ds.images.data() + i * stride;
    double bg[3], fg[3];
    for (double& v : bg) v = rng.uniform(-0.9, 0.4);
    for (double& v : fg) v = rng.uniform(-1.0, 1.0);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) detail::fill_pixel(img, size, y, x, bg);

    const int kind = static_cast<int>(rng.uniform_int(0, 2));
    ds.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(kind);
    const int margin = size / 8;
    if (kind == 0) {
      const int w = static_cast<int>(rng.uniform_int(size / 4, size / 2));
      const int h = static_cast<int>(rng.uniform_int(size / 4, size / 2));
      const int x0 = static_cast<int>(rng.uniform_int(margin, size - margin - w));
      const int y0 = static_cast<int>(rng.uniform_int(margin, size - margin - h));
      for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) detail::fill_pixel(img, size, y, x, fg);
    } else if (kind == 1) {
      const int r = static_cast<int>(rng.uniform_int(size / 6, size / 3));
      const int cy = static_cast<int>(rng.uniform_int(margin + r, size - margin - r));
      const int cx = static_cast<int>(rng.uniform_int(margin + r, size - margin - r));
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r)
            detail::fill_pixel(img, size, y, x, fg);
    } else {
      const int arm = static_cast<int>(rng.uniform_int(size / 4, size / 2 - 1));
      const int th = size >= 16 ? 2 : 1;
      const int cy = static_cast<int>(rng.uniform_int(arm, size - 1 - arm));
      const int cx = static_cast<int>(rng.uniform_int(arm, size - 1 - arm));
      for (int y = cy - arm; y <= cy + arm; ++y)
        for (int x = cx - th / 2; x <= cx + th / 2; ++x) detail::fill_pixel(img, size, y, x, fg);
      for (int x = cx - arm; x <= cx + arm; ++x)
        for (int y = cy - th / 2; y <= cy + th / 2; ++y) detail::fill_pixel(img, size, y, x, fg);
    }
  }
  return ds;
}

/// Uniform gray square of side `patch` in the bottom-right corner, zero
/// elsewhere. The stock trigger shape at desk scale.
inline ad::Tensor make_corner_trigger(int size, int patch = 6, double value = 0.6) {
  if (patch < 1 || patch > size) throw std::invalid_argument("make_corner_trigger: bad patch size");
  ad::Tensor t = ad::Tensor::zeros({3, size, size});
  for (int c = 0; c < 3; ++c)
    for (int y = size - patch; y < size; ++y)
      for (int x = size - patch; x < size; ++x)
        t.data()[(static_cast<std::int64_t>(c) * size + y) * size + x] = value;
  return t;
}

/// Fixed shape image used as the stock backdoor target: one blue square on a
/// bright yellow background. The background sits outside the procedural
/// data's palette, so the target is unmistakable among clean samples.
inline ad::Tensor default_target_image(int size) {
  ad::Tensor t = ad::Tensor::zeros({3, size, size});
  const double bg[3] = {0.95, 0.85, -0.9};
  const double fg[3] = {-0.9, -0.2, 0.95};
  const int lo = size / 4, hi = size - size / 4;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool inside = y >= lo && y < hi && x >= lo && x < hi;
      detail::fill_pixel(t.data(), size, y, x, inside ? fg : bg);
    }
  return t;
}

/// Random +-magnitude patch in the top-left corner; the stock surrogate
/// trigger for shift estimation.
inline ad::Tensor surrogate_patch_trigger(int size, std::uint64_t seed, int patch = 8,
                                          double magnitude = 0.8) {
  if (patch < 1 || patch > size) throw std::invalid_argument("surrogate_patch_trigger: bad patch");
  Rng rng(seed);
  ad::Tensor t = ad::Tensor::zeros({3, size, size});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < patch; ++y)
      for (int x = 0; x < patch; ++x)
        t.data()[(static_cast<std::int64_t>(c) * size + y) * size + x] =
            rng.uniform() < 0.5 ? -magnitude : magnitude;
  return t;
}

/// Random +-magnitude values on a centered cross mask; an alternative
/// surrogate shape for transfer checks.
inline ad::Tensor surrogate_cross_trigger(int size, std::uint64_t seed, double magnitude = 0.8) {
  Rng rng(seed);
  ad::Tensor t = ad::Tensor::zeros({3, size, size});
  const int c0 = size / 2, arm = size / 2 - 1, th = size >= 16 ? 2 : 1;
  auto put = [&](int y, int x) {
    for (int c = 0; c < 3; ++c)
      t.data()[(static_cast<std::int64_t>(c) * size + y) * size + x] =
          rng.uniform() < 0.5 ? -magnitude : magnitude;
  };
  for (int y = c0 - arm; y <= c0 + arm; ++y)
    for (int x = c0 - th / 2; x <= c0 + th / 2; ++x) put(y, x);
  for (int x = c0 - arm; x <= c0 + arm; ++x)
    for (int y = c0 - th / 2; y <= c0 + th / 2; ++y) put(y, x);
  return t;
}

// ---- binary image records ---------------------------------------------------
// CIFAR-10 style: each record is 1 label byte followed by 3*S*S pixel bytes,
// planes R then G then B, rows major. Bytes map to values via v = b/127.5 - 1.

inline ImageDataset load_image_records(const std::string& path, int size) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open dataset file: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  const std::size_t record = 1 + static_cast<std::size_t>(3) * size * size;
  if (bytes.empty() || bytes.size() % record != 0)
    throw std::runtime_error("dataset file size " + std::to_string(bytes.size()) +
                             " is not a multiple of the record size " + std::to_string(record));
  const int n = static_cast<int>(bytes.size() / record);
  ImageDataset ds;
  ds.images = ad::Tensor::zeros({n, 3, size, size});
  ds.labels.resize(static_cast<std::size_t>(n));
  const std::int64_t stride = static_cast<std::int64_t>(3) * size * size;
  for (int i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + static_cast<std::size_t>(i) * record;
    if (rec[0] > 9)
      throw std::runtime_error("dataset record " + std::to_string(i) + " has label byte " +
                               std::to_string(int(rec[0])) + " > 9");
    ds.labels[static_cast<std::size_t>(i)] = rec[0];
    double* dst = ds.images.data() + i * stride;
    for (std::int64_t j = 0; j < stride; ++j) dst[j] = rec[1 + j] / 127.5 - 1.0;
  }
  return ds;
}

/// CIFAR-10 binary batches: 3073-byte records, 32x32 RGB.
inline ImageDataset load_cifar10_binary(const std::string& path) {
  return load_image_records(path, 32);
}

inline void save_image_records(const std::string& path, const ImageDataset& ds) {
  if (ds.images.ndim() != 4 || ds.images.dim(1) != 3 || ds.images.dim(2) != ds.images.dim(3))
    throw std::invalid_argument("save_image_records: expected [N,3,S,S] images");
  const int n = ds.images.dim(0), size = ds.images.dim(2);
  if (ds.labels.size() != static_cast<std::size_t>(n))
    throw std::invalid_argument("save_image_records: label count mismatch");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write dataset file: " + path);
  const std::int64_t stride = static_cast<std::int64_t>(3) * size * size;
  std::vector<unsigned char> rec(1 + static_cast<std::size_t>(stride));
  for (int i = 0; i < n; ++i) {
    rec[0] = ds.labels[static_cast<std::size_t>(i)];
    const double* src = ds.images.data() + i * stride;
    for (std::int64_t j = 0; j < stride; ++j) {
      const double v = std::clamp(src[j], -1.0, 1.0);
      rec[1 + static_cast<std::size_t>(j)] =
          static_cast<unsigned char>(std::nearbyint((v + 1.0) * 127.5));
    }
    f.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
}

}  // namespace puredesk
