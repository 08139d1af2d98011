#pragma once

// Parameter checkpoint container:
//   bytes 0–3  magic "STCK"
//   byte  4    version (1)
//   bytes 5–8  header length H, uint32 little-endian
//   bytes 9…   UTF-8 JSON header {"meta": {...}, "params": [{"name", "shape", "offset"}]}
//   payload    float64 little-endian values; "offset" counts doubles from payload start.

#include <filesystem>
#include <map>
#include <string>

#include "step/error.hpp"
#include "step/io.hpp"
#include "step/nn.hpp"

namespace step::checkpoint {

inline constexpr char kMagic[4] = {'S', 'T', 'C', 'K'};
inline constexpr std::uint8_t kVersion = 1;

/// Content hash over parameter names, shapes and values (order-sensitive).
inline std::uint64_t params_hash(const nn::ParamStore& ps) {
  std::uint64_t h = io::fnv1a64("params");
  for (const auto& [name, v] : ps.entries()) {
    h = io::fnv1a64(reinterpret_cast<const std::uint8_t*>(name.data()), name.size(), h);
    io::Bytes b;
    for (auto s : v.shape()) io::put_le<std::uint64_t>(b, s);
    for (double x : v.value().data) io::put_le<double>(b, x);
    h = io::fnv1a64(b.data(), b.size(), h);
  }
  return h;
}

inline io::Bytes encode(const nn::ParamStore& ps, const json& meta) {
  json header;
  header["meta"] = meta;
  header["params"] = json::array();
  std::size_t offset = 0;
  for (const auto& [name, v] : ps.entries()) {
    header["params"].push_back({{"name", name}, {"shape", v.shape()}, {"offset", offset}});
    offset += v.numel();
  }
  const std::string h = header.dump();
  io::Bytes out;
  io::put_bytes(out, std::string_view(kMagic, 4));
  out.push_back(kVersion);
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(h.size()));
  io::put_bytes(out, h);
  for (const auto& [name, v] : ps.entries())
    for (double x : v.value().data) io::put_le<double>(out, x);
  return out;
}

struct Loaded {
  json meta;
  std::vector<std::pair<std::string, Tensor>> params;

  const Tensor& get(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return t;
    throw IoError("checkpoint: no parameter '" + name + "'", 0);
  }
};

inline Loaded decode(const io::Bytes& b) {
  if (b.size() < 9 || !std::equal(kMagic, kMagic + 4, b.begin())) throw IoError("checkpoint: magic mismatch", 0);
  if (b[4] != kVersion) throw IoError("checkpoint: unsupported version", 4);
  const auto hlen = io::get_le<std::uint32_t>(b, 5);
  if (9 + static_cast<std::uint64_t>(hlen) > b.size()) throw IoError("checkpoint: truncated header", b.size());
  json header;
  try {
    header = json::parse(b.begin() + 9, b.begin() + 9 + hlen);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint: bad header JSON: ") + e.what(), 9);
  }
  Loaded out;
  out.meta = header.value("meta", json::object());
  const std::size_t payload = 9 + hlen;
  for (const auto& p : header.at("params")) {
    Shape shape = p.at("shape").get<Shape>();
    const std::size_t off = p.at("offset").get<std::size_t>();
    Tensor t(shape);
    const std::size_t start = payload + off * 8;
    if (start + t.numel() * 8 > b.size()) throw IoError("checkpoint: truncated payload", b.size());
    for (std::size_t i = 0; i < t.numel(); ++i) t.data[i] = io::get_le<double>(b, start + 8 * i);
    out.params.emplace_back(p.at("name").get<std::string>(), std::move(t));
  }
  return out;
}

inline void save(const std::filesystem::path& path, const nn::ParamStore& ps, const json& meta) {
  io::write_file_atomic(path, encode(ps, meta));
}

inline Loaded load(const std::filesystem::path& path) { return decode(io::read_file(path)); }

/// Copies stored values into an existing store; names and shapes must match exactly.
inline void assign(nn::ParamStore& ps, const Loaded& ck) {
  if (ck.params.size() != ps.size()) {
    throw IoError("checkpoint: holds " + std::to_string(ck.params.size()) + " parameters, model expects " +
                      std::to_string(ps.size()),
                  0);
  }
  for (auto& [name, v] : ps.entries()) {
    const Tensor& t = ck.get(name);
    if (t.shape != v.shape()) {
      throw IoError("checkpoint: parameter '" + name + "' has shape " + to_string(t.shape) + ", expected " +
                        to_string(v.shape()),
                    0);
    }
    v.mutable_value() = t;
  }
}

/// Copies values between two stores with identical layout.
inline void copy_values(const nn::ParamStore& from, nn::ParamStore& to) {
  if (from.size() != to.size()) throw ConfigError("copy_values: parameter stores differ in size");
  for (std::size_t i = 0; i < from.size(); ++i) to.entries()[i].second.mutable_value() = from.entries()[i].second.value();
}

}  // namespace step::checkpoint
