#pragma once

// Guidance providers: the source of generated target images, plus the
// diffusion noise-schedule and classifier-free-guidance arithmetic.

#include "sketch3d/camera.hpp"
#include "sketch3d/common.hpp"

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sketch3d {

struct NoiseSchedule {
  int num_train_steps = 0;
  std::vector<double> alphas;      // alphas[i] = alpha_{i+1}
  std::vector<double> alpha_bars;  // alpha_bars[i] = prod_{s <= i} alphas[s]

  /// Discrete step for continuous t in (0, 1): round(t * N), clamped to [1, N].
  int step_for(double t) const {
    const long s = std::lround(t * num_train_steps);
    return static_cast<int>(std::clamp<long>(s, 1, num_train_steps));
  }
  double alpha_bar(double t) const { return alpha_bars[step_for(t) - 1]; }
};

/// Linearly spaced betas in [beta_start, beta_end].
inline NoiseSchedule make_noise_schedule(int num_train_steps = 1000, double beta_start = 0.00085,
                                         double beta_end = 0.012) {
  require(num_train_steps >= 1, "make_noise_schedule: need at least one step");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0,
          "make_noise_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.num_train_steps = num_train_steps;
  s.alphas.resize(num_train_steps);
  s.alpha_bars.resize(num_train_steps);
  double prod = 1.0;
  for (int i = 0; i < num_train_steps; ++i) {
    const double frac = num_train_steps == 1 ? 0.0 : static_cast<double>(i) / (num_train_steps - 1);
    s.alphas[i] = 1.0 - (beta_start + (beta_end - beta_start) * frac);
    prod *= s.alphas[i];
    s.alpha_bars[i] = prod;
  }
  return s;
}

/// sqrt(alpha_bar) * z + sqrt(1 - alpha_bar) * eps.
inline std::vector<double> noisy_latent_at(std::span<const double> z, double alpha_bar,
                                           std::span<const double> eps) {
  require(z.size() == eps.size(), "noisy_latent: latent and noise shapes differ");
  const double a = std::sqrt(alpha_bar);
  const double b = std::sqrt(1.0 - alpha_bar);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = a * z[i] + b * eps[i];
  return out;
}

inline std::vector<double> noisy_latent(std::span<const double> z, double t, std::span<const double> eps,
                                        const NoiseSchedule& schedule) {
  return noisy_latent_at(z, schedule.alpha_bar(t), eps);
}

/// (1 + w) * eps_cond - w * eps_uncond.
inline std::vector<double> cfg_combine(std::span<const double> eps_cond,
                                       std::span<const double> eps_uncond, double w) {
  require(eps_cond.size() == eps_uncond.size(), "cfg_combine: shapes differ");
  std::vector<double> out(eps_cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 + w) * eps_cond[i] - w * eps_uncond[i];
  return out;
}

struct GuidanceConfig {
  double cfg_weight = 7.5;
  int ddim_steps = 20;
  std::string negative_prompt;  // empty prompt by default

  void validate() const {
    require(cfg_weight >= 0.0, "GuidanceConfig: cfg_weight must be >= 0");
    require(ddim_steps >= 1, "GuidanceConfig: ddim_steps must be >= 1");
  }
};

struct GuidanceRequest {
  Image rendered_image;
  std::optional<std::string> pose_id;
  std::optional<CameraPose> pose;  // lets local providers resolve arbitrary poses
  double noise_level = 0.5;
  std::string prompt;
  std::optional<Mask> sketch;
  std::uint64_t seed = 0;
  std::optional<Vec3> background;  // background the render was composited over
  GuidanceConfig config;

  void validate() const {
    require(noise_level > 0.0 && noise_level < 1.0, "GuidanceRequest: noise_level must lie in (0, 1)");
    require(rendered_image.channels == 3 && rendered_image.width >= 1 && rendered_image.height >= 1,
            "GuidanceRequest: rendered image must be H x W x 3");
    if (sketch) {
      require(sketch->width == rendered_image.width && sketch->height == rendered_image.height,
              "GuidanceRequest: sketch resolution differs from the rendered image");
      for (auto v : sketch->data) require(v <= 1, "GuidanceRequest: sketch must be binary");
    }
    config.validate();
  }
};

struct GuidanceResponse {
  Image generated_image;
};

/// A provider could not produce a target (transport, service or pose lookup failure).
class GuidanceError : public Error {
 public:
  using Error::Error;
};

class GuidanceProvider {
 public:
  virtual ~GuidanceProvider() = default;
  virtual GuidanceResponse generate(const GuidanceRequest& request) = 0;
};

struct PerceptualResult {
  double loss = 0.0;
  Image gradient;  // d loss / d rendered
};

class PerceptualProvider {
 public:
  virtual ~PerceptualProvider() = default;
  virtual PerceptualResult evaluate(const Image& rendered, const Image& target) = 0;
  virtual std::string name() const = 0;
};

namespace detail {

inline Image average_pool2(const Image& img) {
  Image out(img.width / 2, img.height / 2, img.channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        out.at(y, x, c) = 0.25 * (img.at(2 * y, 2 * x, c) + img.at(2 * y, 2 * x + 1, c) +
                                  img.at(2 * y + 1, 2 * x, c) + img.at(2 * y + 1, 2 * x + 1, c));
  return out;
}

inline double sign(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace detail

/// Multi-scale perceptual proxy: mean absolute difference summed over
/// `levels` successive 2x2 average-pooled copies of both images.
class PyramidPerceptual final : public PerceptualProvider {
 public:
  explicit PyramidPerceptual(int levels = 3) : levels_(levels) {}

  PerceptualResult evaluate(const Image& rendered, const Image& target) override {
    require(rendered.same_shape(target), "perceptual: image shapes differ");
    PerceptualResult r;
    r.gradient = Image(rendered.width, rendered.height, rendered.channels);
    Image a = rendered, b = target;
    std::vector<std::pair<int, int>> dims;  // pre-pool sizes per level, for the backward pass
    std::vector<Image> level_grads;
    for (int l = 0; l < levels_; ++l) {
      if (a.width < 2 || a.height < 2) break;
      dims.emplace_back(a.width, a.height);
      a = detail::average_pool2(a);
      b = detail::average_pool2(b);
      Image g(a.width, a.height, a.channels);
      const double inv = 1.0 / static_cast<double>(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        r.loss += std::abs(d) * inv;
        g.data[i] = detail::sign(d) * inv;
      }
      level_grads.push_back(std::move(g));
    }
    // Push each level's gradient back through its chain of pools.
    for (std::size_t l = 0; l < level_grads.size(); ++l) {
      Image g = level_grads[l];
      for (std::size_t k = l + 1; k-- > 0;) {
        Image up(dims[k].first, dims[k].second, g.channels);
        for (int y = 0; y < g.height; ++y)
          for (int x = 0; x < g.width; ++x)
            for (int c = 0; c < g.channels; ++c) {
              const double v = 0.25 * g.at(y, x, c);
              up.at(2 * y, 2 * x, c) += v;
              up.at(2 * y, 2 * x + 1, c) += v;
              up.at(2 * y + 1, 2 * x, c) += v;
              up.at(2 * y + 1, 2 * x + 1, c) += v;
            }
        g = std::move(up);
      }
      for (std::size_t i = 0; i < g.size(); ++i) r.gradient.data[i] += g.data[i];
    }
    return r;
  }

  std::string name() const override { return "pyramid-l1"; }

 private:
  int levels_;
};

inline PerceptualResult perceptual_grad(const Image& rendered, const Image& target,
                                        PerceptualProvider& provider) {
  require(rendered.same_shape(target), "perceptual_grad: image shapes differ");
  return provider.evaluate(rendered, target);
}

}  // namespace sketch3d
