// Batch commands: synth, generate, render, eval.

#include "sketch3d/checkpoint.hpp"
#include "sketch3d/dataset.hpp"
#include "sketch3d/metrics.hpp"
#include "sketch3d/mock_guidance.hpp"
#include "sketch3d/optimizer.hpp"
#include "sketch3d/remote_guidance.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>

namespace fs = std::filesystem;
using namespace sketch3d;

namespace {

constexpr const char* kEndpointEnv = "SKETCH3D_ENDPOINT";

struct SynthArgs {
  std::string scene;
  int views = 0;
  int resolution = 64;
  std::string out;
  std::string prompt;
};

struct GenerateArgs {
  std::string dataset;
  std::string out;
  std::string prompt_override;
  std::string guidance = "mock";
  std::string endpoint;
  std::string perceptual = "pyramid";
  int iters = -1;
  int resolution = -1;
  std::uint64_t seed = 0;
  bool desk_scale = false;
  double pose_noise = 0.0;
  int max_views = 0;
  double lambda_r = -1.0;
  bool quiet = false;
};

struct RenderArgs {
  std::string checkpoint;
  std::string out;
  int frames = 0;
  int resolution = 128;
  double radius = 4.0;
  double elevation = 20.0;
  double fov = 50.0;
  double scene_bound = 1.0;
  int samples = 64;
};

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string out;
  int samples = 64;
};

OracleScene scene_from_arg(const std::string& s) {
  if (s == "sphere") return sphere_scene();
  if (s == "sphere_box") return sphere_box_scene();
  if (fs::exists(s)) return scene_from_json(nlohmann::json::parse(read_file(s)));
  throw InvalidArgument("unknown scene '" + s + "' (expected sphere, sphere_box or a scene JSON file)");
}

int run_synth(const SynthArgs& a) {
  SynthOptions opt;
  if (!a.prompt.empty()) opt.prompt = a.prompt;
  const SynthResult r = synth_scene_dataset(scene_from_arg(a.scene), a.views, a.resolution, opt);
  save_dataset(r.dataset, a.out, &r.images);
  std::cout << "wrote " << r.dataset.views.size() << " views to " << a.out << "\n";
  return 0;
}

int run_generate(const GenerateArgs& a) {
  SketchDataset ds = load_dataset(a.dataset);
  if (a.max_views > 0) ds = limit_views(ds, static_cast<std::size_t>(a.max_views));
  if (a.pose_noise > 0.0) ds = perturb_poses(ds, a.pose_noise, mix_seed(a.seed, 0x706f7365ull));

  TrainConfig cfg = a.desk_scale ? TrainConfig::desk_scale() : TrainConfig::full_scale();
  cfg.seed = a.seed;
  if (a.iters > 0) cfg.set_iterations(a.iters);
  if (a.resolution > 0) cfg.render_resolution = a.resolution;
  if (a.lambda_r >= 0.0) cfg.weights.lambda_r = a.lambda_r;
  cfg.prompt_override = a.prompt_override;

  RemoteConfig remote;
  remote.endpoint = a.endpoint;
  if (remote.endpoint.empty())
    if (const char* env = std::getenv(kEndpointEnv)) remote.endpoint = env;

  std::unique_ptr<GuidanceProvider> provider;
  if (a.guidance == "mock") {
    if (!ds.oracle) throw Error("mock guidance needs a dataset with an oracle_scene (see `synth`)");
    provider = std::make_unique<MockGuidance>(*ds.oracle);
  } else {
    if (remote.endpoint.empty())
      throw InvalidArgument(std::string("remote guidance needs --endpoint or ") + kEndpointEnv);
    provider = std::make_unique<RemoteGuidance>(remote);
  }
  std::unique_ptr<PerceptualProvider> perceptual;
  if (a.perceptual == "pyramid") {
    perceptual = std::make_unique<PyramidPerceptual>();
  } else if (a.perceptual == "remote") {
    if (remote.endpoint.empty())
      throw InvalidArgument(std::string("remote perceptual loss needs --endpoint or ") + kEndpointEnv);
    perceptual = std::make_unique<RemotePerceptual>(remote);
  }

  const int every = std::max(1, cfg.iterations / 20);
  auto progress = [&](const IterationRecord& r) {
    if (a.quiet || (r.step + 1) % every != 0) return;
    std::fprintf(stderr, "step %d/%d  t=%.3f  loss=%.5f\n", r.step + 1, cfg.iterations, r.t_sampled,
                 r.loss_total);
  };
  train_to_directory(cfg, ds, *provider, perceptual.get(), a.out, progress);
  std::cout << "wrote " << (fs::path(a.out) / "checkpoint.bin").string() << "\n";
  return 0;
}

int run_render(const RenderArgs& a) {
  const FieldParams<float> params = load_checkpoint<float>(a.checkpoint);
  fs::create_directories(a.out);
  RenderOptions ro;
  ro.samples_per_ray = a.samples;
  ro.stratified = false;
  ro.compute_normals = true;
  ro.scene_bound = a.scene_bound;
  for (int f = 0; f < a.frames; ++f) {
    const CameraPose pose = orbit_pose(a.radius, a.elevation, 360.0 * f / a.frames, a.fov, a.resolution, a.resolution);
    const RenderOutput out = render(params, pose, ro);
    char name[64];
    std::snprintf(name, sizeof(name), "rgb_%04d.png", f);
    write_png_file(fs::path(a.out) / name, out.color);
    std::snprintf(name, sizeof(name), "normal_%04d.png", f);
    write_png_file(fs::path(a.out) / name, normal_to_rgb(out.normal));
  }
  std::cout << "wrote " << a.frames << " frames to " << a.out << "\n";
  return 0;
}

int run_eval(const EvalArgs& a) {
  const FieldParams<float> params = load_checkpoint<float>(a.checkpoint);
  const SketchDataset ds = load_dataset(a.dataset);
  RenderOptions ro;
  ro.samples_per_ray = a.samples;
  ro.stratified = false;
  const EvalReport rep = evaluate(params, ds, ro);
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_file(out, rep.to_json().dump(2) + "\n");
  std::cout << "mean_cd " << rep.mean_cd << "  mean_hd " << rep.mean_hd << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sketch-conditioned 3D generation"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset of an analytic scene");
  synth->add_option("--scene", sa.scene, "sphere, sphere_box or a scene JSON file")->required();
  synth->add_option("--views", sa.views, "number of sketch views")->required()->check(CLI::PositiveNumber);
  synth->add_option("--resolution", sa.resolution, "sketch resolution in pixels")->check(CLI::Range(8, 4096));
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--prompt", sa.prompt, "text prompt stored in the manifest");

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "optimize a field from a sketch dataset");
  gen->add_option("--dataset", ga.dataset, "dataset directory")->required();
  gen->add_option("--out", ga.out, "output directory")->default_val("out");
  gen->add_option("--prompt-override", ga.prompt_override, "replace the dataset prompt");
  gen->add_option("--iters", ga.iters, "iterations")->check(CLI::PositiveNumber);
  gen->add_option("--guidance", ga.guidance, "guidance provider")->check(CLI::IsMember({"mock", "remote"}));
  gen->add_option("--endpoint", ga.endpoint, std::string("guidance service URL (default $") + kEndpointEnv + ")");
  gen->add_option("--perceptual", ga.perceptual, "perceptual loss")->check(CLI::IsMember({"pyramid", "remote", "none"}));
  gen->add_option("--seed", ga.seed, "random seed");
  gen->add_option("--resolution", ga.resolution, "training render resolution")->check(CLI::Range(8, 4096));
  gen->add_flag("--desk-scale", ga.desk_scale, "small CPU profile (64 px, 2000 iterations)");
  gen->add_option("--pose-noise", ga.pose_noise, "Gaussian camera position noise (scene units)")->check(CLI::NonNegativeNumber);
  gen->add_option("--max-views", ga.max_views, "use only the first N sketch views")->check(CLI::PositiveNumber);
  gen->add_option("--lambda-r", ga.lambda_r, "weight of the random-view loss")->check(CLI::NonNegativeNumber);
  gen->add_flag("--quiet", ga.quiet, "suppress progress output");

  RenderArgs ra;
  auto* ren = app.add_subcommand("render", "render RGB and normal turntable frames");
  ren->add_option("--checkpoint", ra.checkpoint, "checkpoint file")->required();
  ren->add_option("--turntable", ra.frames, "number of frames")->required()->check(CLI::PositiveNumber);
  ren->add_option("--out", ra.out, "output directory")->required();
  ren->add_option("--resolution", ra.resolution, "frame resolution")->check(CLI::Range(8, 4096));
  ren->add_option("--radius", ra.radius, "orbit radius")->check(CLI::PositiveNumber);
  ren->add_option("--elevation", ra.elevation, "orbit elevation in degrees");
  ren->add_option("--fov", ra.fov, "field of view in degrees")->check(CLI::Range(1.0, 179.0));
  ren->add_option("--scene-bound", ra.scene_bound, "half extent of the scene box")->check(CLI::PositiveNumber);
  ren->add_option("--samples", ra.samples, "samples per ray")->check(CLI::PositiveNumber);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "score a checkpoint against dataset sketches");
  ev->add_option("--checkpoint", ea.checkpoint, "checkpoint file")->required();
  ev->add_option("--dataset", ea.dataset, "dataset directory")->required();
  ev->add_option("--out", ea.out, "report path")->required();
  ev->add_option("--samples", ea.samples, "samples per ray")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) return run_synth(sa);
    if (*gen) return run_generate(ga);
    if (*ren) return run_render(ra);
    if (*ev) return run_eval(ea);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
