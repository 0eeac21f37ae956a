#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string_view>

namespace puredesk {

// splitmix64 finalizer, used to decorrelate derived stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Deterministic random stream. The mt19937_64 engine sequence is fully
/// specified by the standard and every value transform is implemented here,
/// so draws are reproducible across platforms for a given seed.
///
/// Draw accounting (engine values consumed): uniform() and uniform_int()
/// consume one value per draw (uniform_int may reject and redraw), normal()
/// always consumes two. There is no hidden state between calls.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  /// Named substream of a root seed, e.g. Rng::stream(seed, "train").
  static Rng stream(std::uint64_t root, std::string_view name) {
    return Rng(mix64(root ^ fnv1a64(name.data(), name.size())));
  }

  std::uint64_t raw() { return gen_(); }
  void discard(unsigned long long n) { gen_.discard(n); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive. Rejection-sampled, no modulo bias.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (lo > hi) throw std::invalid_argument("uniform_int: empty range");
    const std::uint64_t n = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo) + 1;
    if (n == 0) return static_cast<std::int64_t>(gen_());  // full 64-bit range
    std::uint64_t x, r;
    do {
      x = gen_();
      r = x % n;
    } while (x - r > std::uint64_t(0) - n);
    return lo + static_cast<std::int64_t>(r);
  }

  /// Standard normal via Box-Muller. Consumes exactly two engine values.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Fills [out, out+n) with standard normals, pairing draws so the engine
  /// consumption is 2*ceil(n/2) regardless of caller structure.
  void fill_normal(double* out, std::int64_t n) {
    std::int64_t i = 0;
    while (i + 1 < n) {
      const double u1 = 1.0 - uniform();
      const double u2 = uniform();
      const double r = std::sqrt(-2.0 * std::log(u1));
      const double a = 2.0 * std::numbers::pi * u2;
      out[i++] = r * std::cos(a);
      out[i++] = r * std::sin(a);
    }
    if (i < n) out[i] = normal();
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace puredesk
