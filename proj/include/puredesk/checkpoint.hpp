#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "puredesk/denoiser.hpp"

namespace puredesk {

// PDCK model checkpoint.
//
// Layout (all integers and floats little-endian regardless of host):
//   magic "PDCK" | u32 version (=1) | u32 metadata length | metadata bytes
//   | u32 tensor count | per tensor: u16 name length, name bytes,
//     u8 ndim, u32 dims[ndim], f64 data (row-major)
// Metadata is "key=value\n" lines: the architecture descriptor, schedule
// parameters, training provenance and seed. Round-trips are bit-exact.

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
  std::uint16_t u16() { return static_cast<std::uint16_t>(byte() | (byte() << 8)); }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
    return v;
  }
  double f64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte()) << (8 * i);
    return std::bit_cast<double>(v);
  }
  std::string bytes(std::size_t k) {
    need(k);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), k);
    pos_ += k;
    return s;
  }
  bool done() const { return pos_ == n_; }

 private:
  unsigned char byte() {
    need(1);
    return p_[pos_++];
  }
  void need(std::size_t k) const {
    if (pos_ + k > n_) throw std::runtime_error("checkpoint: truncated file");
  }
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const DenoiserParams& params,
                            const std::map<std::string, std::string>& metadata) {
  std::string meta;
  {
    std::ostringstream os;
    const auto& d = params.desc;
    os << "desc.image_size=" << d.image_size << "\n";
    os << "desc.channels=" << d.channels << "\n";
    os << "desc.widths=";
    for (std::size_t i = 0; i < d.widths.size(); ++i) os << (i ? "," : "") << d.widths[i];
    os << "\n";
    os << "desc.embed_dim=" << d.embed_dim << "\n";
    os << "desc.max_timestep=" << d.max_timestep << "\n";
    for (const auto& [k, v] : metadata) os << k << "=" << v << "\n";
    meta = os.str();
  }

  std::string out;
  out += "PDCK";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  detail::put_u32(out, static_cast<std::uint32_t>(params.tensors.size()));
  for (const auto& [name, t] : params.tensors) {
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) detail::put_u32(out, static_cast<std::uint32_t>(t.dim(i)));
    for (std::int64_t i = 0; i < t.size(); ++i) detail::put_f64(out, t.at(i));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write checkpoint " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

struct LoadedCheckpoint {
  DenoiserParams params;
  std::map<std::string, std::string> metadata;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  detail::ByteReader r(reinterpret_cast<const unsigned char*>(blob.data()), blob.size());
  if (r.bytes(4) != "PDCK") throw std::runtime_error(path + ": not a PDCK checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  const std::uint32_t meta_len = r.u32();
  std::istringstream meta(r.bytes(meta_len));

  LoadedCheckpoint out;
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    out.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }

  DenoiserDescriptor desc;
  auto meta_at = [&](const std::string& k) {
    auto it = out.metadata.find(k);
    if (it == out.metadata.end())
      throw std::runtime_error(path + ": checkpoint metadata missing " + k);
    return it->second;
  };
  desc.image_size = std::stoi(meta_at("desc.image_size"));
  desc.channels = std::stoi(meta_at("desc.channels"));
  desc.embed_dim = std::stoi(meta_at("desc.embed_dim"));
  desc.max_timestep = std::stoi(meta_at("desc.max_timestep"));
  desc.widths.clear();
  {
    std::istringstream ws(meta_at("desc.widths"));
    std::string tok;
    while (std::getline(ws, tok, ',')) desc.widths.push_back(std::stoi(tok));
  }
  desc.validate();
  out.params.desc = desc;

  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t name_len = r.u16();
    std::string name = r.bytes(name_len);
    const int ndim = static_cast<unsigned char>(r.bytes(1)[0]);
    ad::Shape shape;
    for (int k = 0; k < ndim; ++k) shape.push_back(static_cast<int>(r.u32()));
    ad::Tensor t = ad::Tensor::zeros(shape);
    for (std::int64_t k = 0; k < t.size(); ++k) t.data()[k] = r.f64();
    out.params.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw std::runtime_error(path + ": trailing bytes after checkpoint payload");

  // Layout sanity: names and shapes must match what the descriptor implies.
  const auto expect = detail::denoiser_layout(desc);
  if (expect.size() != out.params.tensors.size())
    throw std::runtime_error(path + ": tensor count does not match the descriptor");
  for (std::size_t i = 0; i < expect.size(); ++i) {
    if (expect[i].name != out.params.tensors[i].first ||
        expect[i].shape != out.params.tensors[i].second.shape())
      throw std::runtime_error(path + ": tensor " + out.params.tensors[i].first +
                               " does not match the descriptor layout");
  }
  return out;
}

}  // namespace puredesk
