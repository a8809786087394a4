#pragma once

// Multi-view sketch datasets: on-disk format, pose perturbation, and
// synthetic datasets rendered from analytic oracle scenes.

#include "sketch3d/camera.hpp"
#include "sketch3d/common.hpp"
#include "sketch3d/edges.hpp"
#include "sketch3d/image_io.hpp"
#include "sketch3d/renderer.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

namespace sketch3d {

struct Sphere {
  Vec3 center = Vec3::Zero();
  double radius = 0.5;
};

struct Box {
  Vec3 center = Vec3::Zero();
  Vec3 half_extent = Vec3::Constant(0.3);
};

struct Primitive {
  std::variant<Sphere, Box> shape;
  Vec3 color = Vec3(0.8, 0.2, 0.2);
  double density = 5000.0;

  bool contains(const Vec3& p) const {
    if (const auto* s = std::get_if<Sphere>(&shape)) return (p - s->center).squaredNorm() <= s->radius * s->radius;
    const auto& b = std::get<Box>(shape);
    return ((p - b.center).cwiseAbs() - b.half_extent).maxCoeff() <= 0.0;
  }

  /// Nearest entry distance along the ray, if any (t > 0).
  std::optional<double> intersect(const Vec3& o, const Vec3& d) const {
    if (const auto* s = std::get_if<Sphere>(&shape)) {
      const Vec3 oc = o - s->center;
      const double b = oc.dot(d);
      const double c = oc.squaredNorm() - s->radius * s->radius;
      const double disc = b * b - c;
      if (disc < 0.0) return std::nullopt;
      const double sq = std::sqrt(disc);
      const double t0 = -b - sq, t1 = -b + sq;
      if (t1 <= 0.0) return std::nullopt;
      return t0 > 0.0 ? t0 : 0.0;
    }
    const auto& bx = std::get<Box>(shape);
    double tmin = -std::numeric_limits<double>::infinity();
    double tmax = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
      const double lo = bx.center[a] - bx.half_extent[a], hi = bx.center[a] + bx.half_extent[a];
      if (std::abs(d[a]) < 1e-15) {
        if (o[a] < lo || o[a] > hi) return std::nullopt;
        continue;
      }
      double t0 = (lo - o[a]) / d[a], t1 = (hi - o[a]) / d[a];
      if (t0 > t1) std::swap(t0, t1);
      tmin = std::max(tmin, t0);
      tmax = std::min(tmax, t1);
    }
    if (tmin > tmax || tmax <= 0.0) return std::nullopt;
    return tmin > 0.0 ? tmin : 0.0;
  }

  Vec3 bounds_max() const {
    if (const auto* s = std::get_if<Sphere>(&shape)) return s->center.cwiseAbs() + Vec3::Constant(s->radius);
    const auto& b = std::get<Box>(shape);
    return b.center.cwiseAbs() + b.half_extent;
  }
};

/// Analytic scene of colored opaque solids.
struct OracleScene {
  std::vector<Primitive> primitives;
  Vec3 background = Vec3::Ones();

  void validate(double bound = 1.0) const {
    require(!primitives.empty(), "OracleScene: scene has no primitives");
    for (const auto& p : primitives)
      require(p.bounds_max().maxCoeff() <= bound, "OracleScene: primitive leaves the scene bounds");
  }

  /// Exact first-hit rendering with flat colors.
  Image render(const CameraPose& pose, std::optional<Vec3> background = std::nullopt) const {
    const Vec3 bg = background.value_or(this->background);
    const RayBatch rays = generate_rays(pose);
    Image img(pose.width, pose.height, 3);
    for (std::size_t r = 0; r < rays.size(); ++r) {
      double best = std::numeric_limits<double>::infinity();
      Vec3 c = bg;
      for (const auto& p : primitives)
        if (auto t = p.intersect(rays.origins[r], rays.directions[r]); t && *t < best) {
          best = *t;
          c = p.color;
        }
      for (int k = 0; k < 3; ++k) img.data[r * 3 + k] = c[k];
    }
    return img;
  }

  Image render_mask(const CameraPose& pose) const {
    const RayBatch rays = generate_rays(pose);
    Image img(pose.width, pose.height, 1);
    for (std::size_t r = 0; r < rays.size(); ++r)
      for (const auto& p : primitives)
        if (p.intersect(rays.origins[r], rays.directions[r])) img.data[r] = 1.0;
    return img;
  }
};

/// Volumetric view of an oracle scene for the renderer: the density of the
/// first primitive containing the point, zero elsewhere.
struct OracleSource {
  const OracleScene& scene;
  struct Workspace {};

  void evaluate(Workspace&, const Eigen::Ref<const Eigen::Matrix3Xd>& pos,
                const Eigen::Ref<const Eigen::Matrix3Xd>&, bool tangents, SampleValues& out) const {
    const auto n = pos.cols();
    out.sigma.setZero(n);
    out.color.setZero(3, n);
    if (tangents) out.grad.setZero(3, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (const auto& p : scene.primitives)
        if (p.contains(pos.col(i))) {
          out.sigma(i) = p.density;
          out.color.col(i) = p.color;
          break;
        }
  }
};

inline OracleScene sphere_scene() {
  OracleScene s;
  s.primitives.push_back({Sphere{Vec3::Zero(), 0.6}, Vec3(0.85, 0.3, 0.2)});
  return s;
}

inline OracleScene sphere_box_scene() {
  OracleScene s;
  s.primitives.push_back({Sphere{Vec3(0.0, -0.4, 0.0), 0.45}, Vec3(0.85, 0.2, 0.15)});
  s.primitives.push_back({Box{Vec3(0.0, 0.45, -0.1), Vec3(0.3, 0.3, 0.35)}, Vec3(0.2, 0.35, 0.85)});
  return s;
}

inline nlohmann::json scene_to_json(const OracleScene& s) {
  nlohmann::json prims = nlohmann::json::array();
  auto v3 = [](const Vec3& v) { return std::vector<double>{v.x(), v.y(), v.z()}; };
  for (const auto& p : s.primitives) {
    nlohmann::json j = {{"color", v3(p.color)}, {"density", p.density}};
    if (const auto* sp = std::get_if<Sphere>(&p.shape)) {
      j["type"] = "sphere";
      j["center"] = v3(sp->center);
      j["radius"] = sp->radius;
    } else {
      const auto& b = std::get<Box>(p.shape);
      j["type"] = "box";
      j["center"] = v3(b.center);
      j["half_extent"] = v3(b.half_extent);
    }
    prims.push_back(j);
  }
  return {{"primitives", prims}, {"background", v3(s.background)}};
}

inline OracleScene scene_from_json(const nlohmann::json& j) {
  auto v3 = [](const nlohmann::json& a) {
    const auto v = a.get<std::vector<double>>();
    if (v.size() != 3) throw IoError("scene: expected a 3-vector");
    return Vec3(v[0], v[1], v[2]);
  };
  OracleScene s;
  if (j.contains("background")) s.background = v3(j.at("background"));
  for (const auto& p : j.at("primitives")) {
    Primitive prim;
    prim.color = v3(p.at("color"));
    prim.density = p.value("density", 5000.0);
    const auto type = p.at("type").get<std::string>();
    if (type == "sphere") {
      prim.shape = Sphere{v3(p.at("center")), p.at("radius").get<double>()};
    } else if (type == "box") {
      prim.shape = Box{v3(p.at("center")), v3(p.at("half_extent"))};
    } else {
      throw IoError("scene: unknown primitive type " + type);
    }
    s.primitives.push_back(prim);
  }
  return s;
}

struct SketchView {
  Mask sketch;
  CameraPose pose;
  std::string view_id;
};

struct SketchDataset {
  std::vector<SketchView> views;
  std::string prompt;
  double scene_bound = 1.0;              // scene box is [-b, b]^3
  std::optional<OracleScene> oracle;     // present for synthetic datasets

  void validate() const {
    require(!views.empty(), "SketchDataset: at least one view is required");
    for (const auto& v : views) {
      require(v.sketch.width == views[0].sketch.width && v.sketch.height == views[0].sketch.height,
              "SketchDataset: sketch resolutions differ across views");
      require(v.sketch.width == v.pose.width && v.sketch.height == v.pose.height,
              "SketchDataset: sketch and camera resolutions differ for view " + v.view_id);
      v.pose.validate(1e-3);
    }
  }

  const SketchView* find(const std::string& id) const {
    for (const auto& v : views)
      if (v.view_id == id) return &v;
    return nullptr;
  }
};

inline constexpr const char* kManifestName = "manifest.json";

inline void save_dataset(const SketchDataset& ds, const std::filesystem::path& dir,
                         const std::vector<Image>* images = nullptr) {
  std::filesystem::create_directories(dir);
  nlohmann::json views = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.views.size(); ++i) {
    const auto& v = ds.views[i];
    const std::string file = "sketch_" + v.view_id + ".png";
    write_file(dir / file, encode_mask_png(v.sketch));
    std::vector<double> m(16);
    const Mat4 T = v.pose.to_matrix();
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) m[r * 4 + c] = T(r, c);
    nlohmann::json j = {{"id", v.view_id}, {"file", file}, {"transform", m},
                        {"focal", v.pose.focal}, {"width", v.pose.width}, {"height", v.pose.height},
                        {"cx", v.pose.principal_point.x()}, {"cy", v.pose.principal_point.y()}};
    if (images) {
      const std::string rgb = "image_" + v.view_id + ".png";
      write_png_file(dir / rgb, (*images)[i]);
      j["image"] = rgb;
    }
    views.push_back(j);
  }
  nlohmann::json manifest = {{"prompt", ds.prompt}, {"scene_bound", ds.scene_bound}, {"views", views}};
  if (ds.oracle) manifest["oracle_scene"] = scene_to_json(*ds.oracle);
  write_file(dir / kManifestName, manifest.dump(2));
}

/// Reads `manifest.json` and the sketches it lists; sketches are binarized at 0.5.
inline SketchDataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / kManifestName;
  if (!std::filesystem::exists(manifest_path))
    throw IoError("dataset: missing manifest " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(read_file(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("dataset: malformed manifest: ") + e.what());
  }
  SketchDataset ds;
  ds.prompt = m.value("prompt", std::string());
  ds.scene_bound = m.value("scene_bound", 1.0);
  if (m.contains("oracle_scene")) ds.oracle = scene_from_json(m.at("oracle_scene"));
  if (!m.contains("views") || !m.at("views").is_array()) throw IoError("dataset: manifest lists no views");
  int index = 0;
  for (const auto& v : m.at("views")) {
    SketchView view;
    view.view_id = v.contains("id") ? v.at("id").get<std::string>() : std::to_string(index);
    if (!v.contains("file")) throw IoError("dataset: view " + view.view_id + " has no sketch file");
    const auto file = v.at("file").get<std::string>();
    if (!v.contains("transform"))
      throw IoError("dataset: view " + view.view_id + " (" + file + ") is missing its pose transform");
    const auto t = v.at("transform").get<std::vector<double>>();
    if (t.size() != 16) throw IoError("dataset: view " + view.view_id + " transform must have 16 values");
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) view.pose.rotation(r, c) = t[r * 4 + c];
      view.pose.translation[r] = t[r * 4 + 3];
    }
    const Mat3& R = view.pose.rotation;
    if ((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-3 || R.determinant() <= 0.0)
      throw IoError("dataset: view " + view.view_id + " rotation is not orthonormal");
    if (!v.contains("focal") || !v.contains("width") || !v.contains("height"))
      throw IoError("dataset: view " + view.view_id + " is missing intrinsics");
    view.pose.focal = v.at("focal").get<double>();
    view.pose.width = v.at("width").get<int>();
    view.pose.height = v.at("height").get<int>();
    view.pose.principal_point = Vec2(v.value("cx", 0.5 * view.pose.width), v.value("cy", 0.5 * view.pose.height));
    const auto path = dir / file;
    if (!std::filesystem::exists(path)) throw IoError("dataset: missing sketch image " + path.string());
    view.sketch = image_to_mask(read_png_file(path), 0.5);
    ds.views.push_back(std::move(view));
    ++index;
  }
  try {
    ds.validate();
  } catch (const InvalidArgument& e) {
    throw IoError(std::string("dataset: ") + e.what());
  }
  return ds;
}

/// Adds N(0, intensity^2) noise to every camera position and re-aims the
/// camera at the origin.
inline SketchDataset perturb_poses(const SketchDataset& ds, double intensity, std::uint64_t seed) {
  require(intensity >= 0.0, "perturb_poses: intensity must be >= 0");
  SketchDataset out = ds;
  if (intensity == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, intensity);
  for (auto& v : out.views) {
    Vec3 p = v.pose.translation;
    for (int a = 0; a < 3; ++a) p[a] += noise(rng);
    v.pose.translation = p;
    v.pose.rotation = look_at_rotation(p, Vec3::Zero());
  }
  return out;
}

/// Keeps the first `count` views (sketch-quantity ablation).
inline SketchDataset limit_views(const SketchDataset& ds, std::size_t count) {
  require(count >= 1, "limit_views: need at least one view");
  SketchDataset out = ds;
  if (out.views.size() > count) out.views.resize(count);
  return out;
}

struct SynthOptions {
  double radius = 4.0;
  double elevation_deg = 20.0;
  double fov_deg = 50.0;
  std::string prompt = "a red sphere next to a blue box";
};

struct SynthResult {
  SketchDataset dataset;
  std::vector<Image> images;  // ground-truth renders, one per view
};

/// Cameras evenly spaced in azimuth on an upper-hemisphere ring, looking at
/// the origin; sketches are edges of the exact renders.
inline SynthResult synth_scene_dataset(const OracleScene& scene, int num_views, int resolution,
                                       const SynthOptions& opt = {}) {
  require(num_views >= 1, "synth_scene_dataset: num_views must be >= 1");
  require(resolution >= 8, "synth_scene_dataset: resolution must be >= 8");
  scene.validate();
  SynthResult r;
  r.dataset.prompt = opt.prompt;
  r.dataset.oracle = scene;
  for (int i = 0; i < num_views; ++i) {
    const double az = 360.0 * i / num_views;
    SketchView v;
    v.pose = orbit_pose(opt.radius, opt.elevation_deg, az, opt.fov_deg, resolution, resolution);
    v.view_id = std::to_string(i);
    Image img = scene.render(v.pose);
    v.sketch = extract_edges(img).sketch;
    r.images.push_back(std::move(img));
    r.dataset.views.push_back(std::move(v));
  }
  return r;
}

}  // namespace sketch3d
