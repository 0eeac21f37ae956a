#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "puredesk/tensor.hpp"

namespace puredesk {

// Binary PPM (P6, maxval 255). Value mapping: byte = nearbyint((clamp(v,-1,1)
// + 1) * 127.5) with ties to even (so v=0 -> 128), byte -> v = b/127.5 - 1.
// Output bytes are platform-independent.

inline unsigned char pixel_byte(double v) {
  const double c = std::clamp(v, -1.0, 1.0);
  return static_cast<unsigned char>(std::nearbyint((c + 1.0) * 127.5));
}

inline void export_image_ppm(const ad::Tensor& img, const std::string& path) {
  if (img.ndim() != 3 || img.dim(0) != 3)
    throw std::invalid_argument("export_image_ppm: expected [3,H,W] image, got " +
                                ad::shape_str(img.shape()));
  const int h = img.dim(1), w = img.dim(2);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  const double* d = img.data();
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        row[static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] =
            pixel_byte(d[c * plane + static_cast<std::int64_t>(y) * w + x]);
    f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

inline ad::Tensor import_image_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  auto next_token = [&]() {
    std::string tok;
    int ch;
    while ((ch = f.get()) != EOF) {
      if (ch == '#') {  // comment to end of line
        while ((ch = f.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
    if (tok.empty()) throw std::runtime_error("truncated PPM header in " + path);
    return tok;
  };
  if (next_token() != "P6") throw std::runtime_error(path + " is not a binary PPM (P6)");
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (w < 1 || h < 1 || maxval != 255)
    throw std::runtime_error(path + ": unsupported PPM geometry or maxval");
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (f.gcount() != static_cast<std::streamsize>(bytes.size()))
    throw std::runtime_error(path + ": truncated PPM payload");
  ad::Tensor img = ad::Tensor::zeros({3, h, w});
  double* d = img.data();
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        d[c * plane + static_cast<std::int64_t>(y) * w + x] =
            bytes[(static_cast<std::size_t>(y) * w + x) * 3 + static_cast<std::size_t>(c)] / 127.5 -
            1.0;
  return img;
}

/// Tiles a sample batch [N,3,S,S] into one image grid (row-major, `cols` per
/// row, 1px separators at -1) for quick visual inspection.
inline ad::Tensor make_image_grid(const ad::Tensor& batch, int cols) {
  if (batch.ndim() != 4 || batch.dim(1) != 3)
    throw std::invalid_argument("make_image_grid: expected [N,3,H,W]");
  const int n = batch.dim(0), h = batch.dim(2), w = batch.dim(3);
  const int rows = (n + cols - 1) / cols;
  const int gh = rows * (h + 1) - 1, gw = cols * (w + 1) - 1;
  ad::Tensor grid = ad::Tensor::full({3, gh, gw}, -1.0);
  for (int i = 0; i < n; ++i) {
    const int r = i / cols, q = i % cols;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          grid.data()[(static_cast<std::int64_t>(c) * gh + r * (h + 1) + y) * gw + q * (w + 1) + x] =
              batch.at(((static_cast<std::int64_t>(i) * 3 + c) * h + y) * w + x);
  }
  return grid;
}

}  // namespace puredesk
