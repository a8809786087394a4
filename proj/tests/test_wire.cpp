#include "sketch3d/remote_guidance.hpp"
#include "sketch3d/wire.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <random>
#include <set>
#include <thread>

using namespace sketch3d;

namespace {

/// In-process HTTP stub standing in for the guidance service.
class StubServer {
 public:
  StubServer() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~StubServer() {
    server_.stop();
    thread_.join();
  }
  httplib::Server& server() { return server_; }
  RemoteConfig config() const {
    RemoteConfig c;
    c.endpoint = "http://127.0.0.1:" + std::to_string(port_);
    c.backoff_seconds = 0.01;
    c.timeout_seconds = 10;
    return c;
  }

 private:
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

/// An image whose values are exact 8-bit levels, so PNG transport is lossless.
Image quantized_image(int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Image img(w, h, 3);
  for (auto& v : img.data) v = static_cast<double>(rng() % 256) / 255.0;
  return img;
}

GuidanceRequest request(const Image& img, bool with_sketch) {
  GuidanceRequest r;
  r.rendered_image = img;
  r.noise_level = 0.37;
  r.prompt = "a wooden chair";
  r.seed = 1234567890123ull;
  if (with_sketch) {
    r.sketch = Mask(img.width, img.height);
    for (int x = 0; x < img.width; ++x) r.sketch->at(img.height / 2, x) = 1;
  }
  return r;
}

}  // namespace

TEST(Wire, Base64RoundTrip) {
  std::mt19937_64 rng(1);
  for (int n = 0; n < 40; ++n) {
    std::string bytes(n, '\0');
    for (auto& c : bytes) c = static_cast<char>(rng() & 0xff);
    EXPECT_EQ(base64_decode(base64_encode(bytes)), bytes);
  }
  EXPECT_EQ(base64_encode("Man"), "TWFu");
  EXPECT_EQ(base64_encode("Ma"), "TWE=");
  EXPECT_THROW(base64_decode("T$Fu"), IoError);
}

TEST(Wire, F32ArrayLittleEndian) {
  const std::vector<double> v{1.0, -2.5, 0.1f, 3e-8f};
  const auto back = decode_f32_array(encode_f32_array(v));
  EXPECT_EQ(back, v);
  // 1.0f is 0x3f800000, stored low byte first.
  EXPECT_EQ(base64_decode(encode_f32_array({1.0})), std::string("\x00\x00\x80\x3f", 4));
  EXPECT_THROW(decode_f32_array(base64_encode("abc")), IoError);
}

TEST(Wire, RequestFieldsRoundTrip) {
  const Image img = quantized_image(12, 10, 2);
  GuidanceRequest r = request(img, true);
  r.config.cfg_weight = 7.5;
  r.config.ddim_steps = 30;
  const auto j = encode_guidance_request(r);
  for (const char* key : {"prompt", "noise_level", "ddim_steps", "cfg_weight", "seed", "rendered_png", "sketch_png"})
    EXPECT_TRUE(j.contains(key)) << key;
  const auto back = decode_guidance_request(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.prompt, r.prompt);
  EXPECT_EQ(back.noise_level, r.noise_level);
  EXPECT_EQ(back.seed, r.seed);
  EXPECT_EQ(back.config.ddim_steps, 30);
  EXPECT_EQ(back.rendered_image.data, img.data);
  EXPECT_EQ(*back.sketch, *r.sketch);
  EXPECT_FALSE(encode_guidance_request(request(img, false)).contains("sketch_png"));
}

TEST(Remote, EchoIsBitExact) {
  StubServer stub;
  std::atomic<int> sketch_calls = 0, text_calls = 0;
  auto echo = [](const httplib::Request& req, httplib::Response& res) {
    const auto j = nlohmann::json::parse(req.body);
    res.set_content(nlohmann::json{{"generated_png", j.at("rendered_png")}}.dump(), "application/json");
  };
  stub.server().Post("/generate", [&](const auto& req, auto& res) { ++sketch_calls; echo(req, res); });
  stub.server().Post("/generate_text", [&](const auto& req, auto& res) { ++text_calls; echo(req, res); });
  const Image img = quantized_image(32, 24, 3);
  EXPECT_EQ(remote_generate(request(img, true), stub.config()).generated_image.data, img.data);
  EXPECT_EQ(remote_generate(request(img, false), stub.config()).generated_image.data, img.data);
  EXPECT_EQ(sketch_calls, 1);
  EXPECT_EQ(text_calls, 1);
}

TEST(Remote, FixtureResponse) {
  StubServer stub;
  const Image fixture = quantized_image(16, 16, 4);
  stub.server().Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(encode_generate_response(fixture).dump(), "application/json");
  });
  RemoteGuidance provider(stub.config());
  EXPECT_EQ(provider.generate(request(quantized_image(16, 16, 5), true)).generated_image.data, fixture.data);
}

TEST(Remote, ServerErrorRetriedThenRaised) {
  StubServer stub;
  std::atomic<int> calls = 0;
  stub.server().Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 500;
    res.set_content("boom", "text/plain");
  });
  try {
    remote_generate(request(quantized_image(8, 8, 6), true), stub.config());
    FAIL() << "expected a RemoteError";
  } catch (const RemoteError& e) {
    EXPECT_EQ(e.kind(), RemoteErrorKind::server_error);
    EXPECT_EQ(e.status(), 500);
  }
  EXPECT_EQ(calls, 3);
}

TEST(Remote, RecoversWhenRetrySucceeds) {
  StubServer stub;
  std::atomic<int> calls = 0;
  const Image img = quantized_image(8, 8, 7);
  stub.server().Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
    if (++calls < 3) {
      res.status = 503;
      return;
    }
    res.set_content(encode_generate_response(img).dump(), "application/json");
  });
  EXPECT_EQ(remote_generate(request(img, true), stub.config()).generated_image.data, img.data);
  EXPECT_EQ(calls, 3);
}

TEST(Remote, EveryFailureMapsToADistinctError) {
  StubServer stub;
  std::atomic<int> calls = 0;
  int status = 0;
  stub.server().Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = status;
    res.set_content("nope", "text/plain");
  });
  stub.server().Post("/generate_text", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content("{not json", "application/json");
  });
  const GuidanceRequest req = request(quantized_image(8, 8, 8), true);
  auto kind_of = [&](const GuidanceRequest& r, RemoteConfig cfg) {
    try {
      remote_generate(r, cfg);
    } catch (const RemoteError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "no error raised";
    return RemoteErrorKind::transport;
  };
  std::set<RemoteErrorKind> kinds;
  const std::vector<std::pair<int, RemoteErrorKind>> cases{
      {400, RemoteErrorKind::bad_request},   {422, RemoteErrorKind::invalid_argument},
      {503, RemoteErrorKind::unavailable},   {500, RemoteErrorKind::server_error},
      {418, RemoteErrorKind::unexpected_status}};
  for (const auto& [s, expected] : cases) {
    status = s;
    calls = 0;
    const auto k = kind_of(req, stub.config());
    EXPECT_EQ(k, expected) << "status " << s;
    // Client errors are not retried.
    EXPECT_EQ(calls.load(), retryable(k) ? 3 : 1) << "status " << s;
    kinds.insert(k);
  }
  kinds.insert(kind_of(request(quantized_image(8, 8, 8), false), stub.config()));
  RemoteConfig dead = stub.config();
  dead.endpoint = "http://127.0.0.1:1";
  kinds.insert(kind_of(req, dead));
  EXPECT_EQ(kinds.size(), 7u);
  EXPECT_TRUE(kinds.count(RemoteErrorKind::malformed_response));
  EXPECT_TRUE(kinds.count(RemoteErrorKind::transport));
}

TEST(Remote, WrongResolutionIsMalformed) {
  StubServer stub;
  stub.server().Post("/generate", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(encode_generate_response(quantized_image(4, 4, 9)).dump(), "application/json");
  });
  try {
    remote_generate(request(quantized_image(8, 8, 9), true), stub.config());
    FAIL();
  } catch (const RemoteError& e) {
    EXPECT_EQ(e.kind(), RemoteErrorKind::malformed_response);
  }
}

TEST(Remote, PerceptualGradient) {
  StubServer stub;
  stub.server().Post("/lpips_grad", [&](const httplib::Request& req, httplib::Response& res) {
    const auto j = nlohmann::json::parse(req.body);
    const Image a = image_from_b64png(j.at("image_a").get<std::string>());
    const Image b = image_from_b64png(j.at("image_b").get<std::string>());
    Image g(a.width, a.height, a.channels);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] = a.data[i] - b.data[i];
    res.set_content(encode_grad_response(0.25, g).dump(), "application/json");
  });
  RemotePerceptual p(stub.config());
  const Image a = quantized_image(6, 5, 10), b = quantized_image(6, 5, 11);
  const auto r = p.evaluate(a, b);
  EXPECT_EQ(r.loss, 0.25);
  ASSERT_EQ(r.gradient.width, 6);
  ASSERT_EQ(r.gradient.height, 5);
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_EQ(r.gradient.data[i], static_cast<double>(static_cast<float>(a.data[i] - b.data[i])));
}
