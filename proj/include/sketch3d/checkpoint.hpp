#pragma once

// Checkpoint container:
//
//   bytes 0..7    magic "SK3DCKPT"
//   bytes 8..15   little-endian u64 length N of the manifest
//   next N bytes  UTF-8 JSON manifest {format, config, tensors[{name, shape, offset, count}]}
//   remainder     little-endian float32 tensor data; `offset` is in bytes from
//                 the start of the data section

#include "sketch3d/common.hpp"
#include "sketch3d/field.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace sketch3d {

inline constexpr char kCheckpointMagic[8] = {'S', 'K', '3', 'D', 'C', 'K', 'P', 'T'};

inline nlohmann::json config_to_json(const HashGridConfig& c) {
  return {{"num_levels", c.num_levels},
          {"features_per_level", c.features_per_level},
          {"table_size_log2", c.table_size_log2},
          {"base_resolution", c.base_resolution},
          {"growth_factor", c.growth_factor},
          {"mlp_hidden_width", c.mlp_hidden_width},
          {"mlp_hidden_layers", c.mlp_hidden_layers},
          {"direction_encoding_degree", c.direction_encoding_degree},
          {"geo_feature_dim", c.geo_feature_dim}};
}

inline HashGridConfig config_from_json(const nlohmann::json& j) {
  HashGridConfig c;
  c.num_levels = j.at("num_levels").get<int>();
  c.features_per_level = j.at("features_per_level").get<int>();
  c.table_size_log2 = j.at("table_size_log2").get<int>();
  c.base_resolution = j.at("base_resolution").get<int>();
  c.growth_factor = j.at("growth_factor").get<double>();
  c.mlp_hidden_width = j.at("mlp_hidden_width").get<int>();
  c.mlp_hidden_layers = j.at("mlp_hidden_layers").get<int>();
  c.direction_encoding_degree = j.at("direction_encoding_degree").get<int>();
  c.geo_feature_dim = j.at("geo_feature_dim").get<int>();
  c.validate();
  return c;
}

namespace detail {

inline void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void put_f32_le(std::string& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

template <typename Scalar>
std::string encode_checkpoint(const FieldParams<Scalar>& params) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : params.layout.tensors)
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", t.offset * 4}, {"count", t.count}});
  const nlohmann::json manifest = {
      {"format", "sketch3d-field-v1"}, {"dtype", "float32-le"},
      {"config", config_to_json(params.config)}, {"tensors", tensors}};
  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic, 8);
  detail::put_u64_le(out, text.size());
  out += text;
  out.reserve(out.size() + params.values.size() * 4);
  for (Scalar v : params.values) detail::put_f32_le(out, static_cast<float>(v));
  return out;
}

template <typename Scalar = float>
FieldParams<Scalar> decode_checkpoint(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw IoError("checkpoint: bad magic");
  const std::uint64_t n = detail::get_u64_le(p + 8);
  if (16 + n > bytes.size()) throw IoError("checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(16, n));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  FieldParams<Scalar> params(config_from_json(manifest.at("config")));
  const std::size_t data_start = 16 + n;
  for (const auto& t : manifest.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const TensorInfo* info = nullptr;
    for (const auto& cand : params.layout.tensors)
      if (cand.name == name) info = &cand;
    if (!info) throw IoError("checkpoint: unknown tensor " + name);
    if (t.at("shape").get<std::vector<int>>() != info->shape)
      throw IoError("checkpoint: shape mismatch for " + name);
    const std::size_t off = t.at("offset").get<std::size_t>();
    const std::size_t count = t.at("count").get<std::size_t>();
    if (count != info->count || data_start + off + count * 4 > bytes.size())
      throw IoError("checkpoint: truncated tensor " + name);
    for (std::size_t i = 0; i < count; ++i)
      params.values[info->offset + i] =
          static_cast<Scalar>(detail::get_f32_le(p + data_start + off + i * 4));
  }
  return params;
}

template <typename Scalar>
void save_checkpoint(const FieldParams<Scalar>& params, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  const std::string bytes = encode_checkpoint(params);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <typename Scalar = float>
FieldParams<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint<Scalar>(ss.str());
}

}  // namespace sketch3d
