#pragma once

// Emission-absorption volume rendering of a density/color source, and the
// reverse-mode pass that maps pixel-space gradients back to field parameters.

#include "sketch3d/camera.hpp"
#include "sketch3d/common.hpp"
#include "sketch3d/field.hpp"
#include "sketch3d/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace sketch3d {

struct RaySegmentBatch {
  int samples_per_ray = 0;
  std::vector<double> t_values;  // ray-major, samples_per_ray per ray
  std::vector<double> deltas;
  std::size_t num_rays() const { return samples_per_ray ? t_values.size() / samples_per_ray : 0; }
};

namespace detail {

/// Writes `n` ascending sample depths and their interval lengths for one ray.
/// The last interval is one bin width.
inline void ray_samples(double near, double far, int n, bool stratified, std::uint64_t ray_seed,
                        double* t, double* delta) {
  const double bin = (far - near) / n;
  for (int i = 0; i < n; ++i) {
    const double u = stratified ? unit_from_bits(mix_seed(ray_seed, static_cast<std::uint64_t>(i))) : 0.5;
    t[i] = near + (i + u) * bin;
  }
  for (int i = 0; i + 1 < n; ++i) delta[i] = t[i + 1] - t[i];
  delta[n - 1] = bin;
}

inline std::uint64_t ray_seed(std::uint64_t seed, std::size_t ray) {
  return mix_seed(seed, static_cast<std::uint64_t>(ray));
}

}  // namespace detail

/// Sample depths in [near, far]: one uniform draw per bin when stratified,
/// bin midpoints otherwise.
inline RaySegmentBatch sample_segments(std::size_t num_rays, double near, double far,
                                       int samples_per_ray, bool stratified, std::uint64_t seed) {
  require(samples_per_ray >= 2, "sample_segments: samples_per_ray must be >= 2");
  require(near > 0.0 && near < far, "sample_segments: need 0 < near < far");
  RaySegmentBatch b;
  b.samples_per_ray = samples_per_ray;
  b.t_values.resize(num_rays * samples_per_ray);
  b.deltas.resize(num_rays * samples_per_ray);
  for (std::size_t r = 0; r < num_rays; ++r)
    detail::ray_samples(near, far, samples_per_ray, stratified, detail::ray_seed(seed, r),
                        b.t_values.data() + r * samples_per_ray, b.deltas.data() + r * samples_per_ray);
  return b;
}

struct CompositeResult {
  Vec3 color = Vec3::Zero();
  double opacity = 0.0;
  double depth = 0.0;
  int used = 0;  // samples before early termination
};

inline constexpr double kDepthOpacityFloor = 1e-4;

/// Front-to-back compositing. Samples after the transmittance drops below
/// `min_transmittance` are ignored. Depth falls back to `far` for rays whose
/// opacity is below 1e-4 (`far` defaults to the last sample depth).
inline CompositeResult composite(std::span<const double> sigma, std::span<const Vec3> colors,
                                 std::span<const double> deltas, std::span<const double> t_values = {},
                                 double min_transmittance = 0.0,
                                 std::optional<double> far = std::nullopt,
                                 std::vector<double>* weights = nullptr) {
  require(sigma.size() == colors.size() && sigma.size() == deltas.size(),
          "composite: mismatched sample arrays");
  CompositeResult r;
  double T = 1.0;
  double depth_acc = 0.0;
  if (weights) weights->assign(sigma.size(), 0.0);
  for (std::size_t i = 0; i < sigma.size(); ++i) {
    if (T < min_transmittance) break;
    const double e = std::exp(-sigma[i] * deltas[i]);
    const double w = T * (1.0 - e);
    r.color += w * colors[i];
    r.opacity += w;
    if (!t_values.empty()) depth_acc += w * t_values[i];
    if (weights) (*weights)[i] = w;
    T *= e;
    r.used = static_cast<int>(i) + 1;
  }
  const double far_depth = far ? *far : (t_values.empty() ? 0.0 : t_values.back());
  r.depth = r.opacity < kDepthOpacityFloor ? far_depth : depth_acc / r.opacity;
  return r;
}

struct RenderOptions {
  int samples_per_ray = 64;
  double near = 0.0;  // near <= 0 or far <= 0: bounding sphere of the scene box
  double far = 0.0;
  bool stratified = false;
  std::uint64_t seed = 0;
  Vec3 background = Vec3::Ones();
  double min_transmittance = 0.0;
  bool compute_normals = false;
  // With a positive value, only rays whose opacity exceeds it get normals
  // (others report zero), which skips the density-gradient pass elsewhere.
  double normal_min_opacity = 0.0;
  double scene_bound = 1.0;  // densities vanish outside [-b, b]^3
  int num_shards = 4;
};

struct RenderOutput {
  Image color;
  Image opacity;
  Image depth;
  Image normal;  // empty unless normals were requested
};

/// Per-sample data kept from a forward pass for the backward pass.
struct RenderCache {
  CameraPose pose;
  RenderOptions options;
  double near = 0.0;
  double far = 0.0;

  struct Ray {
    std::uint32_t begin = 0;
    std::uint32_t count = 0;  // samples before early termination
    bool normal = false;      // the ray carries a normal
  };
  struct Shard {
    std::vector<double> t, delta, sigma;
    std::vector<Vec3> color, grad;
  };
  std::vector<Ray> rays;
  std::vector<int> ray_shard;
  std::vector<Shard> shards;
  std::vector<Vec3> directions;
};

struct PixelGradients {
  Image color;                   // H x W x 3
  std::optional<Image> opacity;  // H x W x 1
  std::optional<Image> normal;   // H x W x 3
};

inline std::pair<double, double> near_far(const CameraPose& pose, const RenderOptions& opt) {
  if (opt.near > 0.0 && opt.far > 0.0) return {opt.near, opt.far};
  const double dist = pose.center().norm();
  const double reach = std::sqrt(3.0) * opt.scene_bound;
  return {std::max(1e-3, dist - reach), dist + reach};
}

/// Anything that maps sample positions and directions to density and color.
///
///   struct Source {
///     struct Workspace;
///     void evaluate(Workspace&, const Eigen::Ref<const Eigen::Matrix3Xd>& pos,
///                   const Eigen::Ref<const Eigen::Matrix3Xd>& dir,
///                   bool tangents, SampleValues& out) const;
///   };
struct SampleValues {
  Eigen::RowVectorXd sigma;
  Eigen::Matrix3Xd color;
  Eigen::Matrix3Xd grad;  // d sigma / d x, filled when tangents are requested
};

template <typename Scalar>
struct FieldSource {
  const FieldParams<Scalar>& params;

  struct Workspace {
    FieldWorkspace<Scalar> field;
    Eigen::Matrix<Scalar, 3, Eigen::Dynamic> pos, dir;
  };

  void evaluate(Workspace& ws, const Eigen::Ref<const Eigen::Matrix3Xd>& pos,
                const Eigen::Ref<const Eigen::Matrix3Xd>& dir,
                bool tangents, SampleValues& out) const {
    ws.pos = pos.cast<Scalar>();
    ws.dir = dir.cast<Scalar>();
    field_forward<Scalar>(params, ws.pos, ws.dir, tangents, ws.field);
    out.sigma = ws.field.sigma.template cast<double>();
    out.color = ws.field.color.template cast<double>();
    if (tangents) out.grad = ws.field.grad_sigma.template cast<double>();
  }
};

namespace detail {

inline bool inside_box(const Vec3& p, double b) {
  return std::abs(p.x()) <= b && std::abs(p.y()) <= b && std::abs(p.z()) <= b;
}

inline Vec3 sample_normal(const Vec3& grad) {
  const double n = grad.norm();
  return n >= kDegenerateGradient ? Vec3(-grad / n) : Vec3::UnitZ();
}

}  // namespace detail

template <typename Source>
RenderOutput render_source(const Source& source, const CameraPose& pose, const RenderOptions& opt,
                           RenderCache* cache = nullptr) {
  pose.validate();
  require(opt.samples_per_ray >= 2, "render: samples_per_ray must be >= 2");
  require(opt.num_shards >= 1, "render: num_shards must be >= 1");
  const int W = pose.width, H = pose.height;
  const int S = opt.samples_per_ray;
  const auto nf = near_far(pose, opt);
  const double near = nf.first, far = nf.second;
  const RayBatch rays = generate_rays(pose);

  RenderOutput out;
  out.color = Image(W, H, 3);
  out.opacity = Image(W, H, 1);
  out.depth = Image(W, H, 1);
  if (opt.compute_normals) out.normal = Image(W, H, 3);

  const int shards = std::min(opt.num_shards, H);
  if (cache) {
    cache->pose = pose;
    cache->options = opt;
    cache->near = near;
    cache->far = far;
    cache->rays.assign(rays.size(), {});
    cache->ray_shard.assign(rays.size(), 0);
    cache->shards.assign(shards, {});
    cache->directions = rays.directions;
  }

  // Normals for every ray come from one tangent evaluation; with an opacity
  // cutoff, tangents are evaluated afterwards for the qualifying rays only.
  const bool tangents_all = opt.compute_normals && opt.normal_min_opacity <= 0.0;
  const bool tangents_some = opt.compute_normals && !tangents_all;

  parallel_shards(shards, [&](int shard) {
    typename Source::Workspace ws;
    SampleValues vals, tan_vals;
    Eigen::Matrix3Xd pos(3, W * S), dir(3, W * S), tan_pos, tan_dir;
    std::vector<double> t(S), delta(S);
    std::vector<double> bt, bdelta;  // in-box samples of the current row
    std::vector<int> ray_begin(W + 1);
    std::vector<double> sig, weights, row_weights;
    std::vector<Vec3> col;
    std::vector<CompositeResult> comp(W);
    std::vector<char> has_normal(W);
    Eigen::Matrix3Xd row_grad;
    RenderCache::Shard* sc = cache ? &cache->shards[shard] : nullptr;
    const auto [y0, y1] = shard_range(H, shards, shard);
    for (int y = y0; y < y1; ++y) {
      int n = 0;
      bt.clear();
      bdelta.clear();
      for (int x = 0; x < W; ++x) {
        const std::size_t r = static_cast<std::size_t>(y) * W + x;
        ray_begin[x] = n;
        detail::ray_samples(near, far, S, opt.stratified, detail::ray_seed(opt.seed, r), t.data(),
                            delta.data());
        for (int i = 0; i < S; ++i) {
          const Vec3 p = rays.origins[r] + t[i] * rays.directions[r];
          if (!detail::inside_box(p, opt.scene_bound)) continue;
          pos.col(n) = p;
          dir.col(n) = rays.directions[r];
          bt.push_back(t[i]);
          bdelta.push_back(delta[i]);
          ++n;
        }
      }
      ray_begin[W] = n;
      if (n > 0) source.evaluate(ws, pos.leftCols(n), dir.leftCols(n), tangents_all, vals);
      row_weights.assign(n, 0.0);
      for (int x = 0; x < W; ++x) {
        const int b = ray_begin[x], m = ray_begin[x + 1] - b;
        sig.resize(m);
        col.resize(m);
        for (int i = 0; i < m; ++i) {
          sig[i] = vals.sigma(b + i);
          col[i] = vals.color.col(b + i);
        }
        comp[x] = composite(sig, col, std::span<const double>(bdelta.data() + b, m),
                            std::span<const double>(bt.data() + b, m), opt.min_transmittance, far,
                            opt.compute_normals ? &weights : nullptr);
        if (opt.compute_normals) std::copy(weights.begin(), weights.end(), row_weights.begin() + b);
        has_normal[x] = tangents_all || (tangents_some && comp[x].opacity > opt.normal_min_opacity);
      }
      if (tangents_all) {
        row_grad = vals.grad;
      } else if (tangents_some) {
        row_grad.setZero(3, n);
        int k = 0;
        for (int x = 0; x < W; ++x)
          if (has_normal[x]) k += comp[x].used;
        tan_pos.resize(3, k);
        tan_dir.resize(3, k);
        k = 0;
        for (int x = 0; x < W; ++x) {
          if (!has_normal[x]) continue;
          for (int i = 0; i < comp[x].used; ++i, ++k) {
            tan_pos.col(k) = pos.col(ray_begin[x] + i);
            tan_dir.col(k) = dir.col(ray_begin[x] + i);
          }
        }
        if (k > 0) source.evaluate(ws, tan_pos, tan_dir, true, tan_vals);
        k = 0;
        for (int x = 0; x < W; ++x) {
          if (!has_normal[x]) continue;
          for (int i = 0; i < comp[x].used; ++i, ++k) row_grad.col(ray_begin[x] + i) = tan_vals.grad.col(k);
        }
      }
      for (int x = 0; x < W; ++x) {
        const std::size_t r = static_cast<std::size_t>(y) * W + x;
        const int b = ray_begin[x];
        const CompositeResult& c = comp[x];
        const Vec3 rgb = c.color + (1.0 - c.opacity) * opt.background;
        for (int k = 0; k < 3; ++k) out.color.at(y, x, k) = rgb[k];
        out.opacity.at(y, x, 0) = c.opacity;
        out.depth.at(y, x, 0) = c.depth;
        if (has_normal[x]) {
          Vec3 acc = Vec3::Zero();
          for (int i = 0; i < c.used; ++i)
            acc += row_weights[b + i] * detail::sample_normal(row_grad.col(b + i));
          const double len = acc.norm();
          if (len > 1e-12) acc /= len;
          for (int k = 0; k < 3; ++k) out.normal.at(y, x, k) = acc[k];
        }
        if (sc) {
          cache->ray_shard[r] = shard;
          cache->rays[r] = {static_cast<std::uint32_t>(sc->t.size()), static_cast<std::uint32_t>(c.used),
                            static_cast<bool>(has_normal[x])};
          for (int i = 0; i < c.used; ++i) {
            sc->t.push_back(bt[b + i]);
            sc->delta.push_back(bdelta[b + i]);
            sc->sigma.push_back(vals.sigma(b + i));
            sc->color.push_back(vals.color.col(b + i));
            if (opt.compute_normals) sc->grad.push_back(has_normal[x] ? Vec3(row_grad.col(b + i)) : Vec3::Zero());
          }
        }
      }
    }
  });
  return out;
}

template <typename Scalar>
RenderOutput render(const FieldParams<Scalar>& params, const CameraPose& pose,
                    const RenderOptions& opt, RenderCache* cache = nullptr) {
  return render_source(FieldSource<Scalar>{params}, pose, opt, cache);
}

/// Gradient of  sum_pixels <g_color, color> + <g_opacity, opacity> + <g_normal, normal>
/// with respect to the field parameters, for the forward pass stored in `cache`.
template <typename Scalar>
FieldParams<Scalar> backward_from_cache(const FieldParams<Scalar>& params, const RenderCache& cache,
                                        const PixelGradients& grads) {
  const CameraPose& pose = cache.pose;
  const RenderOptions& opt = cache.options;
  const int W = pose.width, H = pose.height;
  auto check = [&](const Image& img, int ch, const char* what) {
    require(img.width == W && img.height == H && img.channels == ch,
            std::string("render_backward: ") + what + " gradient resolution does not match the render");
  };
  check(grads.color, 3, "color");
  if (grads.opacity) check(*grads.opacity, 1, "opacity");
  const bool with_normals = grads.normal.has_value();
  if (with_normals) {
    check(*grads.normal, 3, "normal");
    require(opt.compute_normals, "render_backward: normal gradient needs a forward pass with normals");
  }
  for (double v : grads.color.data)
    require(std::isfinite(v), "render_backward: pixel gradient is not finite");

  const int shards = static_cast<int>(cache.shards.size());
  std::vector<std::vector<Scalar>> partial(shards);

  // Per row, rays whose normal receives a gradient go through a tangent
  // evaluation; the rest use the cheaper plain one.
  struct Batch {
    Eigen::Matrix<Scalar, 3, Eigen::Dynamic> pos, dir, dcolor, dgrad;
    Eigen::Matrix<Scalar, 1, Eigen::Dynamic> dsigma;
    int n = 0;
    void reserve(int total, bool tangents) {
      pos.resize(3, total);
      dir.resize(3, total);
      dcolor.resize(3, total);
      dsigma.resize(total);
      if (tangents) dgrad.resize(3, total);
      n = 0;
    }
  };

  parallel_shards(shards, [&](int shard) {
    partial[shard].assign(params.values.size(), Scalar(0));
    Scalar* g = partial[shard].data();
    const RenderCache::Shard& sc = cache.shards[shard];
    FieldWorkspace<Scalar> ws;
    Batch plain, tangent;
    std::vector<double> T, gval;
    std::vector<char> use_tangent(W);
    const auto [y0, y1] = shard_range(H, shards, shard);
    for (int y = y0; y < y1; ++y) {
      int total_plain = 0, total_tangent = 0;
      for (int x = 0; x < W; ++x) {
        const auto& ray = cache.rays[static_cast<std::size_t>(y) * W + x];
        use_tangent[x] = 0;
        if (with_normals && ray.normal) {
          const Vec3 gN(grads.normal->at(y, x, 0), grads.normal->at(y, x, 1), grads.normal->at(y, x, 2));
          use_tangent[x] = gN != Vec3::Zero();
        }
        (use_tangent[x] ? total_tangent : total_plain) += static_cast<int>(ray.count);
      }
      if (total_plain + total_tangent == 0) continue;
      plain.reserve(total_plain, false);
      tangent.reserve(total_tangent, true);
      for (int x = 0; x < W; ++x) {
        const std::size_t r = static_cast<std::size_t>(y) * W + x;
        const auto& ray = cache.rays[r];
        const int m = static_cast<int>(ray.count);
        if (m == 0) continue;
        Batch& bt = use_tangent[x] ? tangent : plain;
        const Vec3 gC(grads.color.at(y, x, 0), grads.color.at(y, x, 1), grads.color.at(y, x, 2));
        double gO = -gC.dot(opt.background);
        if (grads.opacity) gO += grads.opacity->at(y, x, 0);

        T.resize(m + 1);
        T[0] = 1.0;
        for (int i = 0; i < m; ++i)
          T[i + 1] = T[i] * std::exp(-sc.sigma[ray.begin + i] * sc.delta[ray.begin + i]);

        Vec3 gm = Vec3::Zero();
        if (use_tangent[x]) {
          Vec3 acc = Vec3::Zero();
          for (int i = 0; i < m; ++i)
            acc += (T[i] - T[i + 1]) * detail::sample_normal(sc.grad[ray.begin + i]);
          const double len = acc.norm();
          if (len > 1e-12) {
            const Vec3 np = acc / len;
            const Vec3 gN(grads.normal->at(y, x, 0), grads.normal->at(y, x, 1), grads.normal->at(y, x, 2));
            gm = (gN - np * np.dot(gN)) / len;
          }
        }

        gval.resize(m);
        for (int i = 0; i < m; ++i) {
          const std::size_t s = ray.begin + i;
          gval[i] = sc.color[s].dot(gC) + gO;
          if (use_tangent[x]) gval[i] += detail::sample_normal(sc.grad[s]).dot(gm);
        }
        double suffix = 0.0;
        for (int i = m - 1; i >= 0; --i) {
          const std::size_t s = ray.begin + i;
          const double w = T[i] - T[i + 1];
          const int col = bt.n + i;
          bt.dsigma(col) = static_cast<Scalar>(sc.delta[s] * (T[i + 1] * gval[i] - suffix));
          suffix += w * gval[i];
          bt.dcolor.col(col) = (w * gC).cast<Scalar>();
          if (use_tangent[x]) {
            const Vec3& gs = sc.grad[s];
            const double len = gs.norm();
            Vec3 dg = Vec3::Zero();
            if (len >= kDegenerateGradient) {
              const Vec3 ns = -gs / len;
              const Vec3 dn = w * gm;
              dg = -(dn - ns * ns.dot(dn)) / len;
            }
            bt.dgrad.col(col) = dg.cast<Scalar>();
          }
          bt.pos.col(col) = (pose.center() + sc.t[s] * cache.directions[r]).cast<Scalar>();
          bt.dir.col(col) = cache.directions[r].cast<Scalar>();
        }
        bt.n += m;
      }
      if (plain.n > 0) {
        field_forward<Scalar>(params, plain.pos, plain.dir, false, ws);
        field_backward<Scalar>(params, ws, plain.dsigma, plain.dcolor, nullptr, g);
      }
      if (tangent.n > 0) {
        field_forward<Scalar>(params, tangent.pos, tangent.dir, true, ws);
        field_backward<Scalar>(params, ws, tangent.dsigma, tangent.dcolor, &tangent.dgrad, g);
      }
    }
  });

  FieldParams<Scalar> out = params.zeros_like();
  for (const auto& p : partial)
    for (std::size_t i = 0; i < p.size(); ++i) out.values[i] += p[i];
  return out;
}

/// d( sum_pixels <pixel_gradient, color> ) / d params, recomputing the forward
/// pass with the same options (and therefore the same sampling seed).
template <typename Scalar>
FieldParams<Scalar> render_backward(const FieldParams<Scalar>& params, const CameraPose& pose,
                                    const RenderOptions& opt, const Image& pixel_gradient) {
  require(pixel_gradient.width == pose.width && pixel_gradient.height == pose.height &&
              pixel_gradient.channels == 3,
          "render_backward: pixel gradient resolution does not match the camera");
  RenderOptions o = opt;
  o.compute_normals = false;
  RenderCache cache;
  render(params, pose, o, &cache);
  return backward_from_cache(params, cache, PixelGradients{pixel_gradient, std::nullopt, std::nullopt});
}

}  // namespace sketch3d
