#pragma once

// Synchronized generation and reconstruction: each iteration renders the
// field at one sketch pose and one random pose, asks the guidance provider
// for generated targets at an annealed noise level, and takes an Adam step on
//
//   L_total = lambda_s * L_s + lambda_r * L_r + lambda_a * L_a.

#include "sketch3d/checkpoint.hpp"
#include "sketch3d/dataset.hpp"
#include "sketch3d/field.hpp"
#include "sketch3d/guidance.hpp"
#include "sketch3d/renderer.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace sketch3d {

struct AnnealSchedule {
  double t_min = 0.02;
  double t0 = 0.5;
  double t1 = 0.98;
  int total_steps = 25000;

  void validate() const {
    require(0.0 < t_min && t_min < t0 && t0 <= t1 && t1 < 1.0,
            "AnnealSchedule: need 0 < t_min < t0 <= t1 < 1");
    require(total_steps >= 1, "AnnealSchedule: total_steps must be >= 1");
  }
};

/// Upper noise bound after n of N steps: t1 - (t1 - t0) * n / N; t0 beyond N.
inline double anneal_t_max(int n, const AnnealSchedule& s) {
  if (n >= s.total_steps) return s.t0;
  if (n <= 0) return s.t1;
  return s.t1 - (s.t1 - s.t0) * static_cast<double>(n) / s.total_steps;
}

/// Uniform draw in [t_min, t_max]; returns t_min when the interval is empty.
inline double sample_noise_level(std::mt19937_64& rng, double t_min, double t_max) {
  if (!(t_min < t_max)) return t_min;
  return t_min + (t_max - t_min) * unit_from_bits(rng());
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

struct PoseRanges {
  Interval elevation_deg{0.0, 60.0};
  Interval azimuth_deg{0.0, 360.0};
  Interval radius{3.6, 4.4};
  Interval fov_deg{45.0, 55.0};

  void validate() const {
    require(elevation_deg.lo >= 0.0 && elevation_deg.hi <= 90.0 && elevation_deg.lo <= elevation_deg.hi,
            "PoseRanges: elevation must lie within [0, 90] degrees");
    require(radius.lo > 0.0 && radius.lo <= radius.hi, "PoseRanges: invalid radius range");
    require(fov_deg.lo > 0.0 && fov_deg.hi < 180.0 && fov_deg.lo <= fov_deg.hi, "PoseRanges: invalid fov range");
    require(azimuth_deg.lo <= azimuth_deg.hi, "PoseRanges: invalid azimuth range");
  }
};

inline double uniform_in(std::mt19937_64& rng, const Interval& r) {
  return r.lo + (r.hi - r.lo) * unit_from_bits(rng());
}

/// Camera on the upper hemisphere looking at the origin with +z up.
inline CameraPose sample_random_pose(std::mt19937_64& rng, const PoseRanges& ranges, int resolution) {
  const double el = uniform_in(rng, ranges.elevation_deg);
  const double az = uniform_in(rng, ranges.azimuth_deg);
  const double radius = uniform_in(rng, ranges.radius);
  const double fov = uniform_in(rng, ranges.fov_deg);
  return orbit_pose(radius, el, az, fov, resolution, resolution);
}

struct LossWeights {
  double lambda_s = 10.0;
  double lambda_r = 1.0;
  double lambda_a = 1.0;
  int lambda_a_start_step = 20000;

  void validate() const {
    require(lambda_s >= 0.0 && lambda_r >= 0.0 && lambda_a >= 0.0 && lambda_a_start_step >= 0,
            "LossWeights: weights must be >= 0");
  }
  double lambda_a_at(int step) const { return step >= lambda_a_start_step ? lambda_a : 0.0; }
};

struct LossResult {
  double loss = 0.0;
  double perceptual = 0.0;
  double l1 = 0.0;
  Image gradient;  // d loss / d rendered
};

/// perceptual(I, target) + mean |I - target|. A null provider drops the
/// perceptual term. The target is treated as a constant.
inline LossResult reconstruction_loss(const Image& rendered, const Image& target,
                                      PerceptualProvider* perceptual) {
  require(rendered.same_shape(target), "reconstruction_loss: image shapes differ");
  LossResult r;
  r.gradient = Image(rendered.width, rendered.height, rendered.channels);
  const double inv = 1.0 / static_cast<double>(rendered.size());
  for (std::size_t i = 0; i < rendered.size(); ++i) {
    const double d = rendered.data[i] - target.data[i];
    r.l1 += std::abs(d) * inv;
    r.gradient.data[i] = detail::sign(d) * inv;
  }
  if (perceptual) {
    const PerceptualResult p = perceptual->evaluate(rendered, target);
    r.perceptual = p.loss;
    for (std::size_t i = 0; i < rendered.size(); ++i) r.gradient.data[i] += p.gradient.data[i];
  }
  r.loss = r.perceptual + r.l1;
  return r;
}

struct RegularizerResult {
  double loss = 0.0;
  double entropy = 0.0;
  double orientation = 0.0;
  Image opacity_gradient;
  Image normal_gradient;  // empty when the render has no normals
};

inline constexpr double kEntropyEps = 1e-6;
inline constexpr double kOrientationOpacity = 0.5;

/// Opacity entropy  mean[-o ln o - (1 - o) ln(1 - o)]  (0 ln 0 = 0) plus the
/// orientation penalty  mean over pixels with o > 0.5 of max(0, n . v)^2,
/// where v is the viewing ray direction. Without normals only the entropy
/// term is evaluated.
inline RegularizerResult geometry_regularizer(const RenderOutput& render, const CameraPose& pose) {
  const Image& o = render.opacity;
  require(o.width == pose.width && o.height == pose.height, "geometry_regularizer: resolution mismatch");
  RegularizerResult r;
  r.opacity_gradient = Image(o.width, o.height, 1);
  const double inv = 1.0 / static_cast<double>(o.size());
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double p = std::clamp(o.data[i], 0.0, 1.0);
    const double a = std::max(p, kEntropyEps), b = std::max(1.0 - p, kEntropyEps);
    r.entropy += (-p * std::log(a) - (1.0 - p) * std::log(b)) * inv;
    const double g = -std::log(a) - (p >= kEntropyEps ? 1.0 : 0.0) + std::log(b) +
                     (1.0 - p >= kEntropyEps ? 1.0 : 0.0);
    r.opacity_gradient.data[i] = g * inv;
  }
  if (!render.normal.data.empty()) {
    r.normal_gradient = Image(o.width, o.height, 3);
    const RayBatch rays = generate_rays(pose);
    int count = 0;
    for (std::size_t i = 0; i < o.size(); ++i) count += o.data[i] > kOrientationOpacity;
    if (count > 0) {
      for (std::size_t i = 0; i < o.size(); ++i) {
        if (!(o.data[i] > kOrientationOpacity)) continue;
        const Vec3 n(render.normal.data[i * 3], render.normal.data[i * 3 + 1], render.normal.data[i * 3 + 2]);
        const double f = std::max(0.0, n.dot(rays.directions[i]));
        r.orientation += f * f / count;
        const Vec3 g = (2.0 * f / count) * rays.directions[i];
        for (int k = 0; k < 3; ++k) r.normal_gradient.data[i * 3 + k] = g[k];
      }
    }
  }
  r.loss = r.entropy + r.orientation;
  return r;
}

struct TrainConfig {
  int iterations = 25000;
  double learning_rate = 0.01;  // hash tables
  double mlp_lr_scale = 0.1;    // dense layers train at learning_rate * mlp_lr_scale
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double adam_eps = 1e-15;
  int render_resolution = 512;
  std::uint64_t seed = 0;
  PoseRanges random_pose_ranges;
  AnnealSchedule anneal;
  LossWeights weights;
  GuidanceConfig guidance;
  HashGridConfig field;
  int samples_per_ray = 64;
  bool random_background = true;
  double min_transmittance = 1e-4;
  int checkpoint_every = 500;
  std::string prompt_override;

  /// Published hyperparameters: 25k iterations, lambda_a from step 20k.
  static TrainConfig full_scale() { return TrainConfig{}; }

  /// Small CPU profile: 64 px renders, 2k iterations, lambda_a from 80% of the run.
  static TrainConfig desk_scale() {
    TrainConfig c;
    c.render_resolution = 64;
    c.set_iterations(2000);
    return c;
  }

  /// Sets the run length and rescales the annealing horizon and lambda_a
  /// start to the same fraction of the run as the published 20k/25k.
  void set_iterations(int n) {
    iterations = n;
    anneal.total_steps = n;
    weights.lambda_a_start_step = static_cast<int>(std::lround(0.8 * n));
  }

  void validate() const {
    require(iterations >= 1, "TrainConfig: iterations must be >= 1");
    require(learning_rate > 0.0, "TrainConfig: learning_rate must be > 0");
    require(mlp_lr_scale > 0.0, "TrainConfig: mlp_lr_scale must be > 0");
    require(render_resolution >= 8, "TrainConfig: render_resolution must be >= 8");
    anneal.validate();
    weights.validate();
    guidance.validate();
    field.validate();
    random_pose_ranges.validate();
  }
};

struct IterationRecord {
  int step = 0;
  double t_sampled = 0.0;
  double t_max = 0.0;
  double loss_s = 0.0;
  double loss_r = 0.0;
  double loss_a = 0.0;
  double loss_total = 0.0;
  double lambda_a = 0.0;  // weight applied to loss_a at this step
  std::string sketch_view;
  std::vector<std::string> pose_kinds;

  nlohmann::json to_json() const {
    return {{"step", step}, {"t", t_sampled}, {"t_max", t_max}, {"loss_s", loss_s},
            {"loss_r", loss_r}, {"loss_a", loss_a}, {"loss_total", loss_total},
            {"lambda_a", lambda_a}, {"sketch_view", sketch_view}, {"pose_kind", pose_kinds}};
  }
};

struct TrainState {
  FieldParams<float> params;
  std::vector<float> adam_m;
  std::vector<float> adam_v;
  int step = 0;
  std::mt19937_64 rng;
};

inline TrainState init_train_state(const TrainConfig& cfg) {
  TrainState s;
  s.params = init_params<float>(cfg.field, mix_seed(cfg.seed, 0x6669656c64ull));
  s.adam_m.assign(s.params.values.size(), 0.0f);
  s.adam_v.assign(s.params.values.size(), 0.0f);
  s.rng.seed(mix_seed(cfg.seed, 0x747261696eull));
  return s;
}

inline void adam_update(TrainState& s, const TrainConfig& cfg, const std::vector<float>& grad) {
  const int t = s.step + 1;
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, t);
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, t);
  const float b1 = static_cast<float>(cfg.adam_beta1), b2 = static_cast<float>(cfg.adam_beta2);
  const float inv_c2 = static_cast<float>(1.0 / c2);
  const float eps = static_cast<float>(cfg.adam_eps);
  const std::size_t dense_begin = s.params.layout.dense_offset();
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double lr = i < dense_begin ? cfg.learning_rate : cfg.learning_rate * cfg.mlp_lr_scale;
    const float step = static_cast<float>(lr / c1);
    const float g = grad[i];
    s.adam_m[i] = b1 * s.adam_m[i] + (1.0f - b1) * g;
    s.adam_v[i] = b2 * s.adam_v[i] + (1.0f - b2) * g * g;
    s.params.values[i] -= step * s.adam_m[i] / (std::sqrt(s.adam_v[i] * inv_c2) + eps);
  }
}

inline CameraPose rescale_pose(const CameraPose& pose, int width, int height) {
  if (pose.width == width && pose.height == height) return pose;
  CameraPose p = pose;
  const double sx = static_cast<double>(width) / pose.width;
  const double sy = static_cast<double>(height) / pose.height;
  p.focal = pose.focal * sx;
  p.principal_point = Vec2(pose.principal_point.x() * sx, pose.principal_point.y() * sy);
  p.width = width;
  p.height = height;
  return p;
}

inline Mask resize_nearest(const Mask& m, int width, int height) {
  if (m.width == width && m.height == height) return m;
  Mask out(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      out.at(y, x) = m.at(std::min(m.height - 1, y * m.height / height), std::min(m.width - 1, x * m.width / width));
  return out;
}

namespace detail {

inline Image scaled(const Image& img, double s) {
  Image out = img;
  for (double& v : out.data) v *= s;
  return out;
}

inline Vec3 draw_background(std::mt19937_64& rng, bool random) {
  if (!random) return Vec3::Ones();
  const double r = unit_from_bits(rng()), g = unit_from_bits(rng()), b = unit_from_bits(rng());
  return Vec3(r, g, b);
}

}  // namespace detail

/// One synchronized generation/reconstruction iteration. Parameters are
/// only modified after both generated targets have arrived, so a
/// GuidanceError leaves the state's parameters and step untouched.
inline IterationRecord train_step(TrainState& state, const TrainConfig& cfg, const SketchDataset& ds,
                                  GuidanceProvider& provider, PerceptualProvider* perceptual) {
  require(!ds.views.empty(), "train_step: dataset has no sketch views");
  const int n = state.step;
  const int res = cfg.render_resolution;
  const double lambda_a = cfg.weights.lambda_a_at(n);
  const bool normals = lambda_a > 0.0;
  const std::string& prompt = cfg.prompt_override.empty() ? ds.prompt : cfg.prompt_override;

  IterationRecord rec;
  rec.step = n;
  rec.lambda_a = lambda_a;
  rec.t_max = anneal_t_max(n, cfg.anneal);
  rec.t_sampled = sample_noise_level(state.rng, cfg.anneal.t_min, rec.t_max);

  RenderOptions ro;
  ro.samples_per_ray = cfg.samples_per_ray;
  ro.stratified = true;
  ro.min_transmittance = cfg.min_transmittance;
  ro.compute_normals = normals;
  ro.normal_min_opacity = kOrientationOpacity;  // the orientation term ignores other pixels
  ro.scene_bound = ds.scene_bound;

  // Sketch pose.
  const std::size_t vi = static_cast<std::size_t>(state.rng() % ds.views.size());
  const SketchView& view = ds.views[vi];
  rec.sketch_view = view.view_id;
  const CameraPose pose_s = rescale_pose(view.pose, res, res);
  RenderOptions ro_s = ro;
  ro_s.background = detail::draw_background(state.rng, cfg.random_background);
  ro_s.seed = state.rng();
  RenderCache cache_s;
  const RenderOutput out_s = render(state.params, pose_s, ro_s, &cache_s);

  GuidanceRequest req_s;
  req_s.rendered_image = out_s.color;
  req_s.pose_id = view.view_id;
  req_s.pose = pose_s;
  req_s.noise_level = rec.t_sampled;
  req_s.prompt = prompt;
  req_s.sketch = resize_nearest(view.sketch, res, res);
  req_s.seed = state.rng();
  req_s.background = ro_s.background;
  req_s.config = cfg.guidance;

  // Random pose, same noise level, prompt only.
  const CameraPose pose_r = sample_random_pose(state.rng, cfg.random_pose_ranges, res);
  RenderOptions ro_r = ro;
  ro_r.background = detail::draw_background(state.rng, cfg.random_background);
  ro_r.seed = state.rng();
  RenderCache cache_r;
  const RenderOutput out_r = render(state.params, pose_r, ro_r, &cache_r);

  GuidanceRequest req_r;
  req_r.rendered_image = out_r.color;
  req_r.pose = pose_r;
  req_r.noise_level = rec.t_sampled;
  req_r.prompt = prompt;
  req_r.seed = state.rng();
  req_r.background = ro_r.background;
  req_r.config = cfg.guidance;
  rec.pose_kinds = {"sketch", "random"};

  // Both requests may be in flight together; results are consumed in issue order.
  auto fut_s = std::async(std::launch::async, [&] { return provider.generate(req_s); });
  auto fut_r = std::async(std::launch::async, [&] { return provider.generate(req_r); });
  std::exception_ptr failure;
  GuidanceResponse gen_s, gen_r;
  try {
    gen_s = fut_s.get();
  } catch (...) {
    failure = std::current_exception();
  }
  try {
    gen_r = fut_r.get();
  } catch (...) {
    if (!failure) failure = std::current_exception();
  }
  if (failure) std::rethrow_exception(failure);

  const LossResult ls = reconstruction_loss(out_s.color, gen_s.generated_image, perceptual);
  const LossResult lr = reconstruction_loss(out_r.color, gen_r.generated_image, perceptual);
  const RegularizerResult ga = geometry_regularizer(out_s, pose_s);
  const RegularizerResult gb = geometry_regularizer(out_r, pose_r);
  rec.loss_s = ls.loss;
  rec.loss_r = lr.loss;
  rec.loss_a = 0.5 * (ga.loss + gb.loss);
  rec.loss_total = cfg.weights.lambda_s * rec.loss_s + cfg.weights.lambda_r * rec.loss_r + lambda_a * rec.loss_a;

  auto pixel_grads = [&](const LossResult& l, double w, const RegularizerResult& g) {
    PixelGradients pg{detail::scaled(l.gradient, w), std::nullopt, std::nullopt};
    if (lambda_a > 0.0) {
      pg.opacity = detail::scaled(g.opacity_gradient, 0.5 * lambda_a);
      if (!g.normal_gradient.data.empty()) pg.normal = detail::scaled(g.normal_gradient, 0.5 * lambda_a);
    }
    return pg;
  };
  FieldParams<float> grad = backward_from_cache(state.params, cache_s, pixel_grads(ls, cfg.weights.lambda_s, ga));
  if (cfg.weights.lambda_r > 0.0 || lambda_a > 0.0) {
    const FieldParams<float> gr = backward_from_cache(state.params, cache_r, pixel_grads(lr, cfg.weights.lambda_r, gb));
    for (std::size_t i = 0; i < grad.values.size(); ++i) grad.values[i] += gr.values[i];
  }
  adam_update(state, cfg, grad.values);
  ++state.step;
  return rec;
}

inline constexpr int kMaxConsecutiveGuidanceFailures = 10;

struct TrainResult {
  FieldParams<float> params;
  std::vector<IterationRecord> records;
};

struct TrainHooks {
  std::function<void(const IterationRecord&)> on_record;
  std::function<void(int step, const FieldParams<float>&)> on_checkpoint;
};

/// Runs cfg.iterations steps. Provider failures retry the step; ten
/// consecutive failures abort the run.
inline TrainResult train(const TrainConfig& cfg, const SketchDataset& ds, GuidanceProvider& provider,
                         PerceptualProvider* perceptual, const TrainHooks& hooks = {}) {
  cfg.validate();
  require(!ds.views.empty(), "train: dataset needs at least one sketch view");
  TrainState state = init_train_state(cfg);
  TrainResult result;
  result.records.reserve(cfg.iterations);
  int failures = 0;
  while (state.step < cfg.iterations) {
    IterationRecord rec;
    const std::mt19937_64 rng_before = state.rng;
    try {
      rec = train_step(state, cfg, ds, provider, perceptual);
    } catch (const GuidanceError& e) {
      state.rng = rng_before;  // a retried step repeats the same draws
      if (++failures >= kMaxConsecutiveGuidanceFailures)
        throw Error(std::string("train: aborting after repeated guidance failures: ") + e.what());
      continue;
    }
    failures = 0;
    if (hooks.on_record) hooks.on_record(rec);
    result.records.push_back(std::move(rec));
    if (hooks.on_checkpoint && cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 &&
        state.step < cfg.iterations)
      hooks.on_checkpoint(state.step, state.params);
  }
  result.params = std::move(state.params);
  return result;
}

/// Writes `records.jsonl`, periodic `checkpoint_<step>.bin` and the final `checkpoint.bin`.
inline TrainResult train_to_directory(const TrainConfig& cfg, const SketchDataset& ds,
                                      GuidanceProvider& provider, PerceptualProvider* perceptual,
                                      const std::filesystem::path& out_dir,
                                      std::function<void(const IterationRecord&)> progress = {}) {
  std::filesystem::create_directories(out_dir);
  std::ofstream log(out_dir / "records.jsonl");
  if (!log) throw IoError("cannot write " + (out_dir / "records.jsonl").string());
  TrainHooks hooks;
  hooks.on_record = [&](const IterationRecord& r) {
    log << r.to_json().dump() << '\n';
    if (progress) progress(r);
  };
  hooks.on_checkpoint = [&](int step, const FieldParams<float>& p) {
    char name[64];
    std::snprintf(name, sizeof(name), "checkpoint_%06d.bin", step);
    save_checkpoint(p, out_dir / name);
  };
  TrainResult r = train(cfg, ds, provider, perceptual, hooks);
  save_checkpoint(r.params, out_dir / "checkpoint.bin");
  return r;
}

inline double psnr(const Image& a, const Image& b) {
  require(a.same_shape(b), "psnr: image shapes differ");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mse += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  mse /= static_cast<double>(a.size());
  return mse <= 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / mse);
}

}  // namespace sketch3d
