#pragma once

// Wire format shared with the guidance service. Bodies are JSON; images are
// base-64 PNG strings; real arrays are base-64 little-endian float32 with an
// explicit shape list.

#include "sketch3d/guidance.hpp"
#include "sketch3d/image_io.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <bit>
#include <string>
#include <vector>

namespace sketch3d {

inline std::string base64_encode(const std::string& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

inline std::string base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw IoError("base64: length is not a multiple of 4");
  if (text.empty()) return {};
  std::string out(3 * text.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw IoError("base64: invalid input");
  std::size_t pad = 0;
  if (text.back() == '=') ++pad;
  if (text.size() >= 2 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

inline std::string encode_f32_array(const std::vector<double>& values) {
  std::string raw;
  raw.reserve(values.size() * 4);
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int i = 0; i < 4; ++i) raw.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  return base64_encode(raw);
}

inline std::vector<double> decode_f32_array(const std::string& text) {
  const std::string raw = base64_decode(text);
  if (raw.size() % 4 != 0) throw IoError("f32 array: byte count is not a multiple of 4");
  std::vector<double> out(raw.size() / 4);
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(p[i * 4 + k]) << (8 * k);
    out[i] = std::bit_cast<float>(bits);
  }
  return out;
}

inline std::string image_to_b64png(const Image& img) { return base64_encode(encode_png(img)); }
inline Image image_from_b64png(const std::string& text) { return decode_png(base64_decode(text)); }

inline nlohmann::json encode_guidance_request(const GuidanceRequest& req) {
  nlohmann::json j = {{"prompt", req.prompt},
                      {"noise_level", req.noise_level},
                      {"ddim_steps", req.config.ddim_steps},
                      {"cfg_weight", req.config.cfg_weight},
                      {"seed", req.seed},
                      {"rendered_png", image_to_b64png(req.rendered_image)}};
  if (req.sketch) j["sketch_png"] = base64_encode(encode_mask_png(*req.sketch));
  return j;
}

/// Inverse of encode_guidance_request; images come back quantized to 8 bits.
inline GuidanceRequest decode_guidance_request(const nlohmann::json& j) {
  GuidanceRequest r;
  r.prompt = j.at("prompt").get<std::string>();
  r.noise_level = j.at("noise_level").get<double>();
  r.config.ddim_steps = j.at("ddim_steps").get<int>();
  r.config.cfg_weight = j.at("cfg_weight").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.rendered_image = image_from_b64png(j.at("rendered_png").get<std::string>());
  if (j.contains("sketch_png"))
    r.sketch = image_to_mask(image_from_b64png(j.at("sketch_png").get<std::string>()), 0.5);
  return r;
}

inline nlohmann::json encode_generate_response(const Image& img) {
  return {{"generated_png", image_to_b64png(img)}};
}

inline nlohmann::json encode_grad_response(double loss, const Image& grad) {
  return {{"loss", loss},
          {"grad_f32", encode_f32_array(grad.data)},
          {"shape", std::vector<int>{grad.height, grad.width, grad.channels}}};
}

}  // namespace sketch3d
