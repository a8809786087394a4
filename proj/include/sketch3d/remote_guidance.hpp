#pragma once

// HTTP client for the guidance service.

#include "sketch3d/guidance.hpp"
#include "sketch3d/wire.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <string>
#include <thread>

namespace sketch3d {

enum class RemoteErrorKind {
  transport,
  bad_request,         // 400
  invalid_argument,    // 422
  unavailable,         // 503
  server_error,        // other 5xx
  unexpected_status,
  malformed_response,
};

inline const char* to_string(RemoteErrorKind k) {
  switch (k) {
    case RemoteErrorKind::transport: return "transport";
    case RemoteErrorKind::bad_request: return "bad_request";
    case RemoteErrorKind::invalid_argument: return "invalid_argument";
    case RemoteErrorKind::unavailable: return "unavailable";
    case RemoteErrorKind::server_error: return "server_error";
    case RemoteErrorKind::unexpected_status: return "unexpected_status";
    case RemoteErrorKind::malformed_response: return "malformed_response";
  }
  return "unknown";
}

class RemoteError : public GuidanceError {
 public:
  RemoteError(RemoteErrorKind kind, int status, const std::string& what)
      : GuidanceError(what), kind_(kind), status_(status) {}
  RemoteErrorKind kind() const { return kind_; }
  int status() const { return status_; }

 private:
  RemoteErrorKind kind_;
  int status_;
};

inline RemoteErrorKind classify_status(int status) {
  if (status == 400) return RemoteErrorKind::bad_request;
  if (status == 422) return RemoteErrorKind::invalid_argument;
  if (status == 503) return RemoteErrorKind::unavailable;
  if (status >= 500 && status < 600) return RemoteErrorKind::server_error;
  return RemoteErrorKind::unexpected_status;
}

inline bool retryable(RemoteErrorKind k) {
  return k == RemoteErrorKind::transport || k == RemoteErrorKind::unavailable ||
         k == RemoteErrorKind::server_error;
}

struct RemoteConfig {
  std::string endpoint = "http://127.0.0.1:8000";
  int max_attempts = 3;
  double backoff_seconds = 0.5;  // doubled after each failed attempt
  double timeout_seconds = 600.0;
};

/// POSTs a JSON body, retrying transport failures and 5xx responses.
inline nlohmann::json post_json(const RemoteConfig& cfg, const std::string& path,
                                const nlohmann::json& body) {
  httplib::Client client(cfg.endpoint);
  const auto secs = static_cast<time_t>(cfg.timeout_seconds);
  client.set_read_timeout(secs, 0);
  client.set_write_timeout(secs, 0);
  client.set_connection_timeout(std::min<time_t>(secs, 10), 0);
  const std::string payload = body.dump();
  RemoteErrorKind kind = RemoteErrorKind::transport;
  int status = 0;
  std::string detail;
  for (int attempt = 0; attempt < std::max(1, cfg.max_attempts); ++attempt) {
    if (attempt > 0) {
      const double wait = cfg.backoff_seconds * std::pow(2.0, attempt - 1);
      std::this_thread::sleep_for(std::chrono::duration<double>(wait));
    }
    auto res = client.Post(path, payload, "application/json");
    if (!res) {
      kind = RemoteErrorKind::transport;
      status = 0;
      detail = httplib::to_string(res.error());
      continue;
    }
    if (res->status == 200) {
      try {
        return nlohmann::json::parse(res->body);
      } catch (const nlohmann::json::exception& e) {
        throw RemoteError(RemoteErrorKind::malformed_response, 200,
                          cfg.endpoint + path + ": malformed response body: " + e.what());
      }
    }
    kind = classify_status(res->status);
    status = res->status;
    detail = res->body.substr(0, 200);
    if (!retryable(kind)) break;
  }
  throw RemoteError(kind, status,
                    cfg.endpoint + path + " failed (" + to_string(kind) + ", status " +
                        std::to_string(status) + "): " + detail);
}

/// Sends the request to /generate (with sketch) or /generate_text (without).
inline GuidanceResponse remote_generate(const GuidanceRequest& req, const RemoteConfig& cfg) {
  req.validate();
  const std::string path = req.sketch ? "/generate" : "/generate_text";
  const nlohmann::json body = post_json(cfg, path, encode_guidance_request(req));
  GuidanceResponse resp;
  try {
    resp.generated_image = image_from_b64png(body.at("generated_png").get<std::string>());
  } catch (const std::exception& e) {
    throw RemoteError(RemoteErrorKind::malformed_response, 200,
                      cfg.endpoint + path + ": bad generated_png: " + e.what());
  }
  Image& img = resp.generated_image;
  if (img.channels == 1) {
    Image rgb(img.width, img.height, 3);
    for (std::size_t i = 0; i < img.size(); ++i)
      for (int c = 0; c < 3; ++c) rgb.data[i * 3 + c] = img.data[i];
    img = std::move(rgb);
  }
  if (img.width != req.rendered_image.width || img.height != req.rendered_image.height)
    throw RemoteError(RemoteErrorKind::malformed_response, 200,
                      cfg.endpoint + path + ": response resolution differs from the request");
  return resp;
}

class RemoteGuidance final : public GuidanceProvider {
 public:
  explicit RemoteGuidance(RemoteConfig cfg) : cfg_(std::move(cfg)) {}
  GuidanceResponse generate(const GuidanceRequest& request) override {
    return remote_generate(request, cfg_);
  }

 private:
  RemoteConfig cfg_;
};

/// Learned perceptual loss served by /lpips_grad.
class RemotePerceptual final : public PerceptualProvider {
 public:
  explicit RemotePerceptual(RemoteConfig cfg) : cfg_(std::move(cfg)) {}

  PerceptualResult evaluate(const Image& rendered, const Image& target) override {
    require(rendered.same_shape(target), "perceptual: image shapes differ");
    const nlohmann::json body =
        post_json(cfg_, "/lpips_grad",
                  {{"image_a", image_to_b64png(rendered)}, {"image_b", image_to_b64png(target)}});
    PerceptualResult r;
    try {
      r.loss = body.at("loss").get<double>();
      const auto shape = body.at("shape").get<std::vector<int>>();
      const auto values = decode_f32_array(body.at("grad_f32").get<std::string>());
      if (shape != std::vector<int>{rendered.height, rendered.width, rendered.channels} ||
          values.size() != rendered.size())
        throw IoError("gradient shape differs from the image");
      r.gradient = Image(rendered.width, rendered.height, rendered.channels);
      r.gradient.data = values;
    } catch (const std::exception& e) {
      throw RemoteError(RemoteErrorKind::malformed_response, 200,
                        cfg_.endpoint + "/lpips_grad: " + e.what());
    }
    return r;
  }

  std::string name() const override { return "remote-lpips"; }

 private:
  RemoteConfig cfg_;
};

}  // namespace sketch3d
