#include "sketch3d/dataset.hpp"

#include <gtest/gtest.h>

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <set>

using namespace sketch3d;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

nlohmann::json read_manifest(const fs::path& dir) {
  return nlohmann::json::parse(read_file(dir / kManifestName));
}

void write_manifest(const fs::path& dir, const nlohmann::json& j) { write_file(dir / kManifestName, j.dump()); }

template <typename F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Dataset, TwentyFourViewsRoundTrip) {
  TempDir tmp("sk3d_ds_24");
  auto synth = synth_scene_dataset(sphere_box_scene(), 24, 16);
  synth.dataset.prompt = "a DSLR photo of a human";
  save_dataset(synth.dataset, tmp.path, &synth.images);
  const auto ds = load_dataset(tmp.path);
  ASSERT_EQ(ds.views.size(), 24u);
  EXPECT_EQ(ds.prompt, "a DSLR photo of a human");
  ASSERT_TRUE(ds.oracle.has_value());
  EXPECT_EQ(ds.oracle->primitives.size(), 2u);
  for (std::size_t i = 0; i < 24; ++i) {
    const auto& a = synth.dataset.views[i];
    const auto& b = ds.views[i];
    EXPECT_EQ(a.view_id, b.view_id);
    EXPECT_EQ(a.sketch, b.sketch);
    EXPECT_LT((a.pose.rotation - b.pose.rotation).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((a.pose.translation - b.pose.translation).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_NEAR(a.pose.focal, b.pose.focal, 1e-6);
    EXPECT_EQ(a.pose.width, b.pose.width);
  }
}

TEST(Dataset, MissingSketchFileNamesTheFile) {
  TempDir tmp("sk3d_ds_missing");
  const auto synth = synth_scene_dataset(sphere_scene(), 3, 16);
  save_dataset(synth.dataset, tmp.path);
  fs::remove(tmp.path / "sketch_1.png");
  const std::string msg = error_of([&] { load_dataset(tmp.path); });
  EXPECT_NE(msg.find("sketch_1.png"), std::string::npos) << msg;
  EXPECT_THROW(load_dataset(tmp.path), IoError);
}

TEST(Dataset, MissingPoseNamesTheView) {
  TempDir tmp("sk3d_ds_nopose");
  const auto synth = synth_scene_dataset(sphere_scene(), 3, 16);
  save_dataset(synth.dataset, tmp.path);
  auto m = read_manifest(tmp.path);
  m["views"][2].erase("transform");
  write_manifest(tmp.path, m);
  const std::string msg = error_of([&] { load_dataset(tmp.path); });
  EXPECT_NE(msg.find("view 2"), std::string::npos) << msg;
}

TEST(Dataset, RejectsNonOrthonormalRotation) {
  TempDir tmp("sk3d_ds_rot");
  const auto synth = synth_scene_dataset(sphere_scene(), 2, 16);
  save_dataset(synth.dataset, tmp.path);
  auto m = read_manifest(tmp.path);
  auto t = m["views"][0]["transform"].get<std::vector<double>>();
  // Within tolerance is accepted.
  t[0] += 2e-4;
  m["views"][0]["transform"] = t;
  write_manifest(tmp.path, m);
  EXPECT_NO_THROW(load_dataset(tmp.path));
  t[0] += 0.05;
  m["views"][0]["transform"] = t;
  write_manifest(tmp.path, m);
  EXPECT_THROW(load_dataset(tmp.path), IoError);
}

TEST(Dataset, SketchesBinarizedAtHalf) {
  TempDir tmp("sk3d_ds_gray");
  fs::create_directories(tmp.path);
  Image gray(4, 1, 1);
  gray.data = {0.0, 0.49, 0.51, 1.0};
  write_png_file(tmp.path / "s.png", gray);
  const CameraPose pose = orbit_pose(4.0, 0.0, 0.0, 50.0, 4, 1);
  std::vector<double> m(16);
  const Mat4 T = pose.to_matrix();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m[r * 4 + c] = T(r, c);
  write_manifest(tmp.path, {{"prompt", "x"},
                            {"views", {{{"file", "s.png"}, {"transform", m}, {"focal", pose.focal},
                                        {"width", 4}, {"height", 1}}}}});
  const auto ds = load_dataset(tmp.path);
  EXPECT_EQ(ds.views[0].sketch.data, (std::vector<std::uint8_t>{0, 0, 1, 1}));
  EXPECT_EQ(ds.views[0].view_id, "0");
}

TEST(PerturbPoses, ZeroIntensityIsIdentity) {
  const auto ds = synth_scene_dataset(sphere_scene(), 5, 16).dataset;
  const auto out = perturb_poses(ds, 0.0, 3);
  for (std::size_t i = 0; i < ds.views.size(); ++i) {
    EXPECT_EQ(out.views[i].pose.rotation, ds.views[i].pose.rotation);
    EXPECT_EQ(out.views[i].pose.translation, ds.views[i].pose.translation);
  }
}

TEST(PerturbPoses, DisplacementMatchesGaussianNorm) {
  SketchDataset ds;
  for (int i = 0; i < 1000; ++i)
    ds.views.push_back({Mask(8, 8), orbit_pose(4.0, 20.0, 0.36 * i, 50.0, 8, 8), std::to_string(i)});
  const auto out = perturb_poses(ds, 0.02, 7);
  double sq = 0.0;
  for (std::size_t i = 0; i < ds.views.size(); ++i)
    sq += (out.views[i].pose.translation - ds.views[i].pose.translation).squaredNorm();
  const double rms = std::sqrt(sq / ds.views.size());
  EXPECT_NEAR(rms, 0.02 * std::sqrt(3.0), 0.1 * 0.02 * std::sqrt(3.0));
  for (const auto& v : out.views) {
    EXPECT_NO_THROW(v.pose.validate());
    EXPECT_LT((v.pose.forward() + v.pose.center().normalized()).norm(), 1e-9);
  }
}

TEST(PerturbPoses, DeterministicPerSeed) {
  const auto ds = synth_scene_dataset(sphere_scene(), 6, 16).dataset;
  const auto a = perturb_poses(ds, 0.03, 11), b = perturb_poses(ds, 0.03, 11), c = perturb_poses(ds, 0.03, 12);
  for (std::size_t i = 0; i < ds.views.size(); ++i) {
    EXPECT_EQ(a.views[i].pose.translation, b.views[i].pose.translation);
    EXPECT_NE(a.views[i].pose.translation, c.views[i].pose.translation);
  }
}

TEST(LimitViews, KeepsLeadingViews) {
  const auto ds = synth_scene_dataset(sphere_scene(), 6, 16).dataset;
  const auto out = limit_views(ds, 2);
  ASSERT_EQ(out.views.size(), 2u);
  EXPECT_EQ(out.views[1].view_id, "1");
  EXPECT_EQ(limit_views(ds, 10).views.size(), 6u);
  EXPECT_THROW(limit_views(ds, 0), InvalidArgument);
}

TEST(Synth, DistinctAzimuths) {
  const auto ds = synth_scene_dataset(sphere_box_scene(), 6, 32).dataset;
  ASSERT_EQ(ds.views.size(), 6u);
  std::set<long> az;
  for (const auto& v : ds.views) {
    const Vec3 c = v.pose.center();
    az.insert(std::lround(std::atan2(c.y(), c.x()) * 180.0 / std::numbers::pi));
    EXPECT_GE(c.z(), 0.0);
  }
  EXPECT_EQ(az.size(), 6u);
}

TEST(Synth, SphereSketchesAreCircles) {
  const OracleScene scene = sphere_scene();
  const double radius = std::get<Sphere>(scene.primitives[0].shape).radius;
  const auto ds = synth_scene_dataset(scene, 6, 64).dataset;
  for (const auto& v : ds.views) {
    // The silhouette of a sphere is a circle centred on the principal point
    // for cameras aimed at its centre; its image radius follows from the
    // tangent cone half-angle.
    const double dist = v.pose.center().norm();
    const double r_px = v.pose.focal * std::tan(std::asin(radius / dist));
    ASSERT_GT(v.sketch.count(), 0u);
    for (int y = 0; y < v.sketch.height; ++y)
      for (int x = 0; x < v.sketch.width; ++x)
        if (v.sketch.at(y, x)) {
          const double r = std::hypot(x + 0.5 - v.pose.principal_point.x(), y + 0.5 - v.pose.principal_point.y());
          EXPECT_NEAR(r, r_px, 2.0);
        }
  }
}

TEST(Synth, RejectsEmptyScene) {
  EXPECT_THROW(synth_scene_dataset(OracleScene{}, 3, 16), InvalidArgument);
}
