// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/image_codec.hpp>
#include <endosplat/io.hpp>
#include <endosplat/metrics.hpp>
#include <endosplat/server.hpp>
#include <endosplat/simulation.hpp>
#include <endosplat/synthetic.hpp>
#include <endosplat/trainer.hpp>

#include <CLI11.hpp>
#include <Eigen/Eigenvalues>
#include <json.hpp>

#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace endosplat;
using json = nlohmann::json;

namespace {

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ArgumentError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// stdout for "-" or empty, otherwise the named file.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty() && path != "-") {
      file_.open(path);
      if (!file_) throw ArgumentError("cannot write " + path);
    }
  }
  std::ostream& get() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }

 private:
  std::ofstream file_;
};

struct TrainArgs {
  std::string scene, out, config, split = "all", report;
  std::optional<int> iterations, virtual_per_iter;
  std::optional<double> lambda_depth, lambda_dist, lambda_tv, lambda_dssim;
  std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : TrainConfig::from_json(read_text(a.config));
  if (a.iterations) cfg.iterations = *a.iterations;
  if (a.virtual_per_iter) cfg.virtual_per_iter = *a.virtual_per_iter;
  if (a.lambda_depth) cfg.objective.weights.depth = *a.lambda_depth;
  if (a.lambda_dist) cfg.objective.weights.distortion = *a.lambda_dist;
  if (a.lambda_tv) cfg.objective.weights.tv = *a.lambda_tv;
  if (a.lambda_dssim) cfg.objective.weights.dssim = *a.lambda_dssim;
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();
  const SceneBundle bundle = load_scene(a.scene);
  const auto views = bundle.indices(a.split, "train");
  TrainResult r = train(bundle, cfg, views);
  if (bundle.splits.count(a.split)) {
    const EvalResult e = evaluate(r.cloud, bundle, bundle.indices(a.split, "test"));
    r.report.final_metrics = {{"psnr", e.psnr}, {"ssim", e.ssim}, {"depth_rmse", e.depth_rmse}};
  }
  save_cloud(r.cloud, a.out);
  Output report(a.report.empty() ? a.out + ".report.jsonl" : a.report);
  report.get() << r.report.to_json_lines();
  std::cerr << "trained " << r.cloud.size() << " Gaussians in " << r.report.wall_seconds << " s\n";
  return 0;
}

int run_synth(const std::string& spec_path, const std::string& out) {
  const SyntheticSpec spec = spec_path.empty() ? SyntheticSpec{} : SyntheticSpec::from_json(read_text(spec_path));
  const SyntheticScene s = generate(spec);
  save_scene(s.bundle, out);
  save_cloud(s.ground_truth, std::filesystem::path(out) / "ground_truth.gsc");
  std::ofstream(std::filesystem::path(out) / "synthetic_spec.json") << spec.to_json() << "\n";
  std::cerr << "wrote " << s.bundle.records.size() << " views and " << s.ground_truth.size() << " Gaussians to " << out
            << "\n";
  return 0;
}

int run_eval(const std::string& cloud_path, const std::string& scene, const std::string& part,
             const std::vector<std::string>& protocols, bool normalize, const std::string& out) {
  const GaussianCloud cloud = load_cloud(cloud_path);
  const SceneBundle bundle = load_scene(scene);
  std::vector<std::string> names = protocols;
  if (names.empty()) {
    for (const auto& [name, split] : bundle.splits) names.push_back(name);
    if (names.empty()) names.push_back("all");
  }
  EvalOptions opts;
  opts.normalize_depth = normalize;
  json rows = json::array();
  for (const auto& name : names) {
    const auto views = bundle.indices(name, part);
    const EvalResult e = evaluate(cloud, bundle, views, opts);
    json per = json::array();
    for (const auto& v : e.views) {
      per.push_back({{"view", bundle.records[static_cast<std::size_t>(v.view)].name},
                     {"psnr", v.psnr},
                     {"ssim", v.ssim},
                     {"depth_rmse", v.depth_rmse}});
    }
    rows.push_back({{"protocol", name},
                    {"part", part},
                    {"views", views.size()},
                    {"psnr", e.psnr},
                    {"ssim", e.ssim},
                    {"depth_rmse", e.depth_rmse},
                    {"per_view", per}});
  }
  Output o(out);
  o.get() << json{{"cloud", cloud_path}, {"rows", rows}}.dump(2) << "\n";
  return 0;
}

int run_render(const std::string& cloud_path, const std::string& scene, const std::string& view, const std::string& out,
               const std::string& dump_aux) {
  const GaussianCloud cloud = load_cloud(cloud_path);
  Camera cam;
  if (scene.empty()) {
    cam = default_view(cloud);
  } else {
    const SceneBundle bundle = load_scene(scene);
    const auto it = std::find_if(bundle.records.begin(), bundle.records.end(), [&](const auto& r) { return r.name == view; });
    if (it != bundle.records.end()) {
      cam = it->camera;
    } else {
      std::size_t idx = 0;
      try {
        idx = std::stoul(view);
      } catch (const std::exception&) {
        throw ArgumentError("no view named '" + view + "'");
      }
      if (idx >= bundle.records.size()) throw ArgumentError("view index out of range");
      cam = bundle.records[idx].camera;
    }
  }
  const RenderOutput r = render(cloud, cam);
  write_png(r.rgb, out);
  if (!dump_aux.empty()) {
    write_pfm(r.depth, dump_aux + "_depth.pfm");
    write_pfm(r.alpha, dump_aux + "_alpha.pfm");
    write_pfm(r.distortion, dump_aux + "_distortion.pfm");
  }
  return 0;
}

struct SimArgs {
  std::string cloud, mode = "sparse", script, params, stats, frames_dir, final_cloud;
  int nodes = 512;
  std::uint64_t seed = 0;
  int width = 256;
};

int run_simulate(const SimArgs& a) {
  auto cloud = std::make_shared<const GaussianCloud>(load_cloud(a.cloud));
  SimulationOptions o;
  o.mode = simulation_mode_from_string(a.mode);
  o.nodes = a.nodes;
  o.seed = a.seed;
  if (!a.params.empty()) o.material = MaterialParams::from_json(json::parse(read_text(a.params)));
  ForceScript script;
  if (!a.script.empty()) {
    const json j = json::parse(read_text(a.script), nullptr, false);
    if (j.is_discarded()) throw ConfigError("force script is not valid JSON");
    script = ForceScript::from_json(j);
  }
  SceneSimulation sim(cloud, o);
  const Camera cam = default_view(*cloud, a.width, a.width);
  if (!a.frames_dir.empty()) std::filesystem::create_directories(a.frames_dir);
  Output stats(a.stats);
  for (int f = 0; f < script.frames; ++f) {
    const auto t0 = std::chrono::steady_clock::now();
    sim.advance_frame(script.at(f));
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    const ControlNodeSet& n = sim.simulator().nodes();
    double max_disp = 0.0;
    for (std::size_t i = 0; i < n.size(); ++i) max_disp = std::max(max_disp, (n.position[i] - n.rest[i]).norm());
    stats.get() << json{{"frame", sim.frame()},
                        {"sim_ms", ms},
                        {"force_active", script.at(f) != nullptr},
                        {"max_displacement", max_disp},
                        {"kinetic_energy", sim.simulator().kinetic_energy()},
                        {"elastic_energy", sim.simulator().elastic_energy()}}
                       .dump()
                << "\n";
    if (!a.frames_dir.empty()) {
      const DeformedCloud d = sim.deformed();
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%05ld.png", sim.frame());
      write_png(render(d.cloud, d.covariances, cam).rgb, std::filesystem::path(a.frames_dir) / name);
    }
  }
  if (!a.final_cloud.empty()) {
    // Rotations and scales are refit from the deformed covariances.
    const DeformedCloud d = sim.deformed();
    GaussianCloud out = d.cloud;
    for (std::size_t i = 0; i < out.size(); ++i) {
      Eigen::SelfAdjointEigenSolver<Mat3> es(d.covariances[i]);
      Mat3 r = es.eigenvectors();
      if (r.determinant() < 0.0) r.col(0) *= -1.0;
      out.rotations[i] = matrix_to_quat(r);
      out.scales[i] = es.eigenvalues().cwiseMax(1e-20).cwiseSqrt();
    }
    save_cloud(out, a.final_cloud);
  }
  return 0;
}

struct BenchArgs {
  std::vector<std::string> clouds;
  std::size_t synthetic = 50000;
  int nodes = 512, frames = 3;
  bool psnr = false;
  std::string out;
};

int run_bench(const BenchArgs& a) {
  std::vector<std::pair<std::string, std::shared_ptr<const GaussianCloud>>> scenes;
  for (const auto& c : a.clouds) scenes.emplace_back(c, std::make_shared<const GaussianCloud>(load_cloud(c)));
  if (scenes.empty()) {
    SyntheticSpec spec;
    spec.gaussian_count = a.synthetic;
    spec.subsurface_layers = 4;
    spec.camera_count = 2;
    spec.width = spec.height = 8;
    scenes.emplace_back("synthetic", std::make_shared<const GaussianCloud>(generate(spec).ground_truth));
  }
  json rows = json::array();
  for (const auto& [name, cloud] : scenes) {
    BenchOptions o;
    o.nodes = a.nodes;
    o.frames = a.frames;
    if (a.psnr) o.camera = default_view(*cloud);
    json row = bench_simulation(cloud, o).to_json();
    row["scene"] = name;
    rows.push_back(row);
    std::cerr << name << ": sparse " << row["sparse"]["fps"] << " fps, dense " << row["dense"]["fps"] << " fps\n";
  }
  Output o(a.out);
  o.get() << json{{"substeps", MaterialParams{}.substeps}, {"dt", MaterialParams{}.dt}, {"scenes", rows}}.dump(2) << "\n";
  return 0;
}

Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) std::thread([] { g_server->stop(); }).detach();
}

int run_serve(const ServerOptions& o) {
  Server server(o);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cerr << "listening on " << o.address << ":" << server.port() << " (clouds: " << o.clouds.string() << ")\n";
  server.run();
  g_server = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"endosplat: sparse-view Gaussian splatting reconstruction and MPM tissue simulation"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Optimize a Gaussian cloud on a scene bundle");
  train_cmd->add_option("--scene", ta.scene, "Scene bundle directory")->required();
  train_cmd->add_option("--out", ta.out, "Output cloud (.gsc)")->required();
  train_cmd->add_option("--config", ta.config, "Training config (JSON)");
  train_cmd->add_option("--split", ta.split, "Split protocol whose train part is used (default: all views)");
  train_cmd->add_option("--report", ta.report, "TrainReport JSON lines (default: <out>.report.jsonl, - for stdout)");
  train_cmd->add_option("--iterations", ta.iterations);
  train_cmd->add_option("--virtual-per-iter", ta.virtual_per_iter);
  train_cmd->add_option("--lambda-depth", ta.lambda_depth);
  train_cmd->add_option("--lambda-dist", ta.lambda_dist);
  train_cmd->add_option("--lambda-tv", ta.lambda_tv);
  train_cmd->add_option("--lambda-dssim", ta.lambda_dssim);
  train_cmd->add_option("--seed", ta.seed);

  std::string synth_spec, synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic tissue scene bundle");
  synth_cmd->add_option("--spec", synth_spec, "SyntheticSpec JSON (defaults when omitted)");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();

  std::string eval_cloud, eval_scene, eval_part = "test", eval_out;
  std::vector<std::string> eval_protocols;
  bool eval_normalize = false;
  auto* eval_cmd = app.add_subcommand("eval", "Held-out PSNR / SSIM / depth RMSE as a JSON table");
  eval_cmd->add_option("--cloud", eval_cloud)->required();
  eval_cmd->add_option("--scene", eval_scene)->required();
  eval_cmd->add_option("--split", eval_part, "Split part: test, train or all")
      ->check(CLI::IsMember({"test", "train", "all"}));
  eval_cmd->add_option("--protocol", eval_protocols, "Split protocols (default: every protocol in the bundle)");
  eval_cmd->add_flag("--normalize-depth", eval_normalize, "Compare depth / alpha");
  eval_cmd->add_option("--out", eval_out, "Output file (default stdout)");

  std::string r_cloud, r_scene, r_view = "0", r_out, r_aux;
  auto* render_cmd = app.add_subcommand("render", "Render a cloud from a bundle view (or the default view)");
  render_cmd->add_option("--cloud", r_cloud)->required();
  render_cmd->add_option("--scene", r_scene);
  render_cmd->add_option("--view", r_view, "Record name or index");
  render_cmd->add_option("--out", r_out, "Output PNG")->required();
  render_cmd->add_option("--dump-aux", r_aux, "Prefix for depth/alpha/distortion PFM files");

  SimArgs sa;
  auto* sim_cmd = app.add_subcommand("simulate", "Run a scripted headless simulation");
  sim_cmd->add_option("--cloud", sa.cloud)->required();
  sim_cmd->add_option("--nodes", sa.nodes);
  sim_cmd->add_option("--mode", sa.mode)->check(CLI::IsMember({"sparse", "dense"}));
  sim_cmd->add_option("--script", sa.script, "Force-event script (JSON)");
  sim_cmd->add_option("--params", sa.params, "MaterialParams (JSON)");
  sim_cmd->add_option("--seed", sa.seed);
  sim_cmd->add_option("--stats", sa.stats, "Per-frame stats, JSON lines (default stdout)");
  sim_cmd->add_option("--frames-dir", sa.frames_dir, "Write a PNG per frame here");
  sim_cmd->add_option("--width", sa.width, "Frame size for --frames-dir");
  sim_cmd->add_option("--final-cloud", sa.final_cloud, "Save the deformed cloud of the last frame");

  BenchArgs ba;
  auto* bench_cmd = app.add_subcommand("bench", "Sparse vs dense simulation frame rate");
  bench_cmd->add_option("--cloud", ba.clouds, "Clouds to benchmark (default: synthetic scene)");
  bench_cmd->add_option("--gaussians", ba.synthetic, "Gaussian count of the synthetic scene");
  bench_cmd->add_option("--nodes", ba.nodes);
  bench_cmd->add_option("--frames", ba.frames);
  bench_cmd->add_flag("--psnr", ba.psnr, "Also compare sparse and dense renders");
  bench_cmd->add_option("--out", ba.out, "Output file (default stdout)");

  ServerOptions so;
  std::string clouds_dir, static_dir;
  auto* serve_cmd = app.add_subcommand("serve", "Run the simulation session service");
  serve_cmd->add_option("--port", so.port);
  serve_cmd->add_option("--address", so.address);
  serve_cmd->add_option("--clouds", clouds_dir, "Directory of .gsc clouds")->required();
  serve_cmd->add_option("--static", static_dir, "Directory served under /");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return run_train(ta);
    if (*synth_cmd) return run_synth(synth_spec, synth_out);
    if (*eval_cmd) return run_eval(eval_cloud, eval_scene, eval_part, eval_protocols, eval_normalize, eval_out);
    if (*render_cmd) return run_render(r_cloud, r_scene, r_view, r_out, r_aux);
    if (*sim_cmd) return run_simulate(sa);
    if (*bench_cmd) return run_bench(ba);
    if (*serve_cmd) {
      so.clouds = clouds_dir;
      so.static_dir = static_dir;
      return run_serve(so);
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return 2;
  } catch (const NotFoundError& e) {
    std::cerr << "not found: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 3;
  } catch (const StructuralError& e) {
    std::cerr << "structural error: " << e.what() << "\n";
    return 3;
  } catch (const InitializationError& e) {
    std::cerr << "initialization error: " << e.what() << "\n";
    return 4;
  } catch (const TrainingDiverged& e) {
    std::cerr << "training diverged at iteration " << e.iteration() << ": " << e.what() << "\n";
    return 4;
  } catch (const SimulationFault& e) {
    std::cerr << "simulation fault: " << e.what() << "\n" << e.diagnostics() << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
