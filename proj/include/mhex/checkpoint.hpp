#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "mhex/binary_io.hpp"
#include "mhex/errors.hpp"
#include "mhex/hosts.hpp"

// Checkpoint layout (all integers little-endian):
//   8 bytes  magic "MHEXCKPT"
//   u32      format version
//   u64      config length, then canonical key=value config text
//   u64      tensor count, then per tensor: u32 name length, name,
//            u32 rank, u64 extents...
//   f64      raw values of every tensor in declaration order

namespace mhex {

inline constexpr char kCheckpointMagic[8] = {'M', 'H', 'E', 'X', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;


inline std::string serialize_checkpoint(const Model& model) {
  detail::ByteWriter w;
  w.bytes(std::string(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  const std::string cfg = model.config_kv().to_text();
  w.u64(cfg.size());
  w.bytes(cfg);
  const auto& params = model.params();
  w.u64(params.size());
  for (const auto& p : params) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto e : p.tensor.shape()) w.u64(e);
  }
  for (const auto& p : params)
    for (double v : p.tensor.data()) w.f64(v);
  return w.str();
}

inline void save_checkpoint(const Model& model, const std::string& path) {
  detail::write_file(path, serialize_checkpoint(model));
}

inline std::unique_ptr<Model> deserialize_checkpoint(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  if (r.bytes(8) != std::string(kCheckpointMagic, 8)) throw FormatError("not an MHEX checkpoint (bad magic)");
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint format version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  const auto cfg_len = r.u64();
  auto model = build_model(KeyValues::parse(r.bytes(cfg_len)));
  auto& params = model->params();
  const auto count = r.u64();
  if (count != params.size())
    throw ShapeMismatchError("checkpoint lists " + std::to_string(count) + " tensors, config builds " +
                             std::to_string(params.size()));
  for (auto& p : params) {
    const std::string name = r.bytes(r.u32());
    Shape shape(r.u32());
    for (auto& e : shape) e = r.u64();
    if (name != p.name || shape != p.tensor.shape())
      throw ShapeMismatchError("checkpoint tensor '" + name + "' " + shape_str(shape) + " does not match '" + p.name +
                               "' " + shape_str(p.tensor.shape()));
  }
  for (auto& p : params)
    for (auto& v : p.tensor.mutable_data()) v = r.f64();
  if (!r.at_end()) throw FormatError("trailing bytes after checkpoint payload");
  return model;
}

inline std::unique_ptr<Model> load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(detail::read_file(path));
}

}  // namespace mhex
