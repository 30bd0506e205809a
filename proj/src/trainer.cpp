// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/io.hpp>
#include <endosplat/knn.hpp>
#include <endosplat/trainer.hpp>
#include <endosplat/virtual_camera.hpp>

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace endosplat {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-15;
constexpr double kInitOpacity = 0.1;
constexpr int kInitNeighbors = 3;
constexpr int kBackprojectStride = 8;
constexpr double kSplitScaleDivisor = 1.6;
constexpr double kMinScale = 1e-7;
constexpr double kLonePointScale = 1e-2;

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }) == keys.end()) {
      throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
  }
}

ojson terms_json(const LossTerms& t) {
  return ojson{{"gs", t.gs}, {"depth", t.depth}, {"distortion", t.distortion}, {"tv", t.tv}, {"total", t.total}};
}

/// Adam moments for one flattened parameter block.
struct Moments {
  std::vector<double> m, v;

  void resize(std::size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
  }

  double step(std::size_t i, double g, double lr, double bias1, double bias2) {
    m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g;
    v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g * g;
    return lr * (m[i] / bias1) / (std::sqrt(v[i] / bias2) + kAdamEps);
  }

  /// Keeps rows listed in `source` (width values per row); -1 rows start at zero.
  void remap(const std::vector<long>& source, std::size_t width) {
    std::vector<double> nm(source.size() * width, 0.0), nv(source.size() * width, 0.0);
    for (std::size_t r = 0; r < source.size(); ++r) {
      if (source[r] < 0) continue;
      const auto from = static_cast<std::size_t>(source[r]) * width;
      std::copy_n(m.begin() + static_cast<long>(from), width, nm.begin() + static_cast<long>(r * width));
      std::copy_n(v.begin() + static_cast<long>(from), width, nv.begin() + static_cast<long>(r * width));
    }
    m = std::move(nm);
    v = std::move(nv);
  }
};

double log_lerp(double a, double b, double t) { return std::exp(std::log(a) * (1.0 - t) + std::log(b) * t); }

bool all_finite(const CloudGradients& g) {
  double s = 0.0;
  for (const auto& p : g.positions) s += p.sum();
  for (const auto& p : g.log_scales) s += p.sum();
  for (const auto& p : g.rotations) s += p.sum();
  for (double p : g.opacity_logits) s += p;
  for (double p : g.sh) s += p;
  return std::isfinite(s);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (iterations <= 0) throw ConfigError("iterations must be positive");
  if (densify.interval <= 0) throw ConfigError("densify interval must be positive");
  if (!(densify.grad_threshold > 0.0)) throw ConfigError("densify grad threshold must be positive");
  if (!(densify.prune_opacity > 0.0)) throw ConfigError("prune opacity threshold must be positive");
  if (!(densify.percent_dense > 0.0)) throw ConfigError("percent_dense must be positive");
  if (!(densify.max_prune_fraction >= 0.0 && densify.max_prune_fraction < 1.0)) {
    throw ConfigError("max_prune_fraction must lie in [0,1)");
  }
  if (!(lr.position > 0.0 && lr.position_final > 0.0)) throw ConfigError("position learning rates must be positive");
  if (lr.sh_dc < 0.0 || lr.opacity < 0.0 || lr.scale < 0.0 || lr.rotation < 0.0 || !(lr.sh_rest_divisor > 0.0)) {
    throw ConfigError("learning rates must be nonnegative");
  }
  if (sh_degree < 0 || sh_degree > kMaxShDegree) throw ConfigError("sh_degree must be in 0..3");
  if (sh_degree_cap < 0 || sh_degree_cap > kMaxShDegree) throw ConfigError("sh_degree_cap must be in 0..3");
  if (virtual_per_iter < 0) throw ConfigError("virtual_per_iter must be nonnegative");
  if (log_every <= 0) throw ConfigError("log_every must be positive");
  objective.weights.validate();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed training config: ") + e.what(), e.byte);
  }
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  TrainConfig c;
  try {
    reject_unknown(j, {"iterations", "lr", "densify", "weights", "align_depth", "normalize_depth", "sh_degree",
                       "sh_degree_cap", "seed", "virtual_per_iter", "render", "log_every", "snapshot_path"},
                   "training config");
    read_field(j, "iterations", c.iterations);
    read_field(j, "sh_degree", c.sh_degree);
    read_field(j, "sh_degree_cap", c.sh_degree_cap);
    read_field(j, "seed", c.seed);
    read_field(j, "virtual_per_iter", c.virtual_per_iter);
    read_field(j, "log_every", c.log_every);
    read_field(j, "snapshot_path", c.snapshot_path);
    read_field(j, "align_depth", c.objective.align_depth);
    read_field(j, "normalize_depth", c.objective.normalize_depth);
    if (j.contains("lr")) {
      const json& l = j["lr"];
      reject_unknown(l, {"position", "position_final", "sh_dc", "sh_rest_divisor", "opacity", "scale", "rotation"}, "lr");
      read_field(l, "position", c.lr.position);
      read_field(l, "position_final", c.lr.position_final);
      read_field(l, "sh_dc", c.lr.sh_dc);
      read_field(l, "sh_rest_divisor", c.lr.sh_rest_divisor);
      read_field(l, "opacity", c.lr.opacity);
      read_field(l, "scale", c.lr.scale);
      read_field(l, "rotation", c.lr.rotation);
    }
    if (j.contains("densify")) {
      const json& d = j["densify"];
      reject_unknown(d, {"enabled", "interval", "start", "stop", "grad_threshold", "prune_opacity", "percent_dense",
                         "max_prune_fraction", "max_gaussians"},
                     "densify");
      read_field(d, "enabled", c.densify.enabled);
      read_field(d, "interval", c.densify.interval);
      read_field(d, "start", c.densify.start);
      read_field(d, "stop", c.densify.stop);
      read_field(d, "grad_threshold", c.densify.grad_threshold);
      read_field(d, "prune_opacity", c.densify.prune_opacity);
      read_field(d, "percent_dense", c.densify.percent_dense);
      read_field(d, "max_prune_fraction", c.densify.max_prune_fraction);
      read_field(d, "max_gaussians", c.densify.max_gaussians);
    }
    if (j.contains("weights")) {
      const json& w = j["weights"];
      reject_unknown(w, {"depth", "distortion", "tv", "dssim"}, "weights");
      read_field(w, "depth", c.objective.weights.depth);
      read_field(w, "distortion", c.objective.weights.distortion);
      read_field(w, "tv", c.objective.weights.tv);
      read_field(w, "dssim", c.objective.weights.dssim);
    }
    if (j.contains("render")) {
      const json& r = j["render"];
      reject_unknown(r, {"background", "threads", "low_pass", "near_plane"}, "render");
      if (r.contains("background")) {
        const auto bg = r["background"].get<std::vector<double>>();
        if (bg.size() != 3) throw ConfigError("render.background must have 3 entries");
        c.render.background = Vec3(bg[0], bg[1], bg[2]);
      }
      read_field(r, "threads", c.render.threads);
      read_field(r, "low_pass", c.render.low_pass);
      read_field(r, "near_plane", c.render.near_plane);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string TrainConfig::to_json() const {
  ojson j;
  j["iterations"] = iterations;
  j["lr"] = {{"position", lr.position},   {"position_final", lr.position_final}, {"sh_dc", lr.sh_dc},
             {"sh_rest_divisor", lr.sh_rest_divisor}, {"opacity", lr.opacity}, {"scale", lr.scale},
             {"rotation", lr.rotation}};
  j["densify"] = {{"enabled", densify.enabled},
                  {"interval", densify.interval},
                  {"start", densify.start},
                  {"stop", densify.stop},
                  {"grad_threshold", densify.grad_threshold},
                  {"prune_opacity", densify.prune_opacity},
                  {"percent_dense", densify.percent_dense},
                  {"max_prune_fraction", densify.max_prune_fraction},
                  {"max_gaussians", densify.max_gaussians}};
  j["weights"] = {{"depth", objective.weights.depth},
                  {"distortion", objective.weights.distortion},
                  {"tv", objective.weights.tv},
                  {"dssim", objective.weights.dssim}};
  j["align_depth"] = objective.align_depth;
  j["normalize_depth"] = objective.normalize_depth;
  j["sh_degree"] = sh_degree;
  j["sh_degree_cap"] = sh_degree_cap;
  j["seed"] = seed;
  j["virtual_per_iter"] = virtual_per_iter;
  j["render"] = {{"background", {render.background.x(), render.background.y(), render.background.z()}},
                 {"threads", render.threads},
                 {"low_pass", render.low_pass},
                 {"near_plane", render.near_plane}};
  j["log_every"] = log_every;
  j["snapshot_path"] = snapshot_path;
  return j.dump(2);
}

std::string TrainReport::to_json_lines() const {
  std::ostringstream os;
  for (const auto& r : iterations) {
    ojson j{{"iteration", r.iteration}, {"view", r.view}, {"loss", terms_json(r.real)},
            {"virtual_loss", terms_json(r.virtual_terms)}, {"gaussians", r.gaussians}};
    os << j.dump() << '\n';
  }
  ojson summary;
  summary["summary"] = true;
  summary["wall_seconds"] = wall_seconds;
  ojson counts = ojson::array();
  for (const auto& [it, n] : gaussian_counts) counts.push_back({it, n});
  summary["gaussian_counts"] = counts;
  ojson events = ojson::array();
  for (const auto& e : densify_events) events.push_back({{"cloned", e.cloned}, {"split", e.split}, {"pruned", e.pruned}});
  summary["densify_events"] = events;
  ojson metrics = ojson::object();
  for (const auto& [k, v] : final_metrics) metrics[k] = v;
  summary["final_metrics"] = metrics;
  os << summary.dump() << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Initialization and density control

double scene_extent(std::span<const Vec3> positions) {
  if (positions.empty()) return 0.0;
  Vec3 c = Vec3::Zero();
  for (const auto& p : positions) c += p;
  c /= static_cast<double>(positions.size());
  double r = 0.0;
  for (const auto& p : positions) r = std::max(r, (p - c).norm());
  return r;
}

GaussianCloud initialize(const SceneBundle& bundle, std::span<const int> views, int sh_degree) {
  std::vector<Vec3> pos, col;
  if (bundle.init_points && !bundle.init_points->positions.empty()) {
    pos = bundle.init_points->positions;
    col = bundle.init_points->colors;
    if (col.size() != pos.size()) col.assign(pos.size(), Vec3::Constant(0.5));
  } else {
    std::vector<int> all;
    if (views.empty()) {
      all.resize(bundle.records.size());
      std::iota(all.begin(), all.end(), 0);
      views = all;
    }
    for (int v : views) {
      const auto& rec = bundle.records.at(static_cast<std::size_t>(v));
      if (!rec.depth) continue;
      const Camera& cam = rec.camera;
      const Mat3 rt = cam.rotation().transpose();
      for (int y = 0; y < rec.depth->height(); y += kBackprojectStride) {
        for (int x = 0; x < rec.depth->width(); x += kBackprojectStride) {
          const double d = rec.depth->at(x, y);
          if (!(d > 0.0) || !std::isfinite(d)) continue;
          const Vec3 pc((x - cam.cx) / cam.fx * d, (y - cam.cy) / cam.fy * d, d);
          pos.push_back(rt * (pc - cam.tvec));
          col.emplace_back(rec.rgb.at(x, y, 0), rec.rgb.at(x, y, 1), rec.rgb.at(x, y, 2));
        }
      }
    }
  }
  if (pos.empty()) throw InitializationError("no initialization points and no valid depth to back-project");

  GaussianCloud cloud(pos.size(), sh_degree);
  const KdTree tree(pos);
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const auto nn = tree.nearest(pos[i], kInitNeighbors, static_cast<int>(i));
    double scale = kLonePointScale;
    if (!nn.empty()) {
      double sum = 0.0;
      for (const auto& n : nn) sum += n.distance;
      scale = std::max(kMinScale, sum / static_cast<double>(nn.size()));
    }
    cloud.positions[i] = pos[i];
    cloud.rotations[i] = identity_quat();
    cloud.scales[i] = Vec3::Constant(scale);
    cloud.opacities[i] = kInitOpacity;
    double* sh = cloud.sh_of(i);
    std::fill(sh, sh + 3 * cloud.coeffs_per_channel(), 0.0);
    for (int c = 0; c < 3; ++c) sh[c * cloud.coeffs_per_channel()] = rgb_to_sh_dc(std::clamp(col[i][c], 0.0, 1.0));
  }
  return cloud;
}

DensifyStats densify_and_prune(GaussianCloud& cloud, std::span<const double> mean_grad, const DensifyConfig& config,
                               double extent, std::mt19937_64& rng, std::vector<long>* source) {
  const std::size_t n = cloud.size();
  if (mean_grad.size() != n) throw ArgumentError("densify: gradient statistics do not match the cloud");
  DensifyStats stats;

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < n; ++i) {
    if (mean_grad[i] >= config.grad_threshold) candidates.push_back(i);
  }
  if (config.max_gaussians > 0) {
    const std::size_t budget = config.max_gaussians > n ? config.max_gaussians - n : 0;
    if (candidates.size() > budget) {
      std::stable_sort(candidates.begin(), candidates.end(),
                       [&](std::size_t a, std::size_t b) { return mean_grad[a] > mean_grad[b]; });
      candidates.resize(budget);
      std::sort(candidates.begin(), candidates.end());
    }
  }
  std::vector<char> split(n, 0), clone(n, 0);
  for (std::size_t i : candidates) {
    if (cloud.scales[i].maxCoeff() <= config.percent_dense * extent) {
      clone[i] = 1;
    } else {
      split[i] = 1;
    }
  }

  std::vector<std::size_t> rows;
  std::vector<long> src;
  for (std::size_t i = 0; i < n; ++i) {
    if (split[i]) continue;
    rows.push_back(i);
    src.push_back(static_cast<long>(i));
  }
  GaussianCloud out = cloud.gathered(rows);
  out.set_active_sh_degree(cloud.active_sh_degree());
  for (std::size_t i = 0; i < n; ++i) {
    if (!clone[i]) continue;
    out.push_back(cloud.primitive(i));
    src.push_back(-1);
    ++stats.cloned;
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!split[i]) continue;
    GaussianPrimitive p = cloud.primitive(i);
    const Mat3 r = quat_to_matrix(p.rotation);
    const Vec3 s = p.scale;
    for (int child = 0; child < 2; ++child) {
      GaussianPrimitive c = p;
      const Vec3 offset(normal(rng) * s.x(), normal(rng) * s.y(), normal(rng) * s.z());
      c.position = p.position + r * offset;
      c.scale = s / kSplitScaleDivisor;
      out.push_back(c);
      src.push_back(-1);
    }
    ++stats.split;
  }

  // Prune, never more than the configured fraction and never to zero.
  const std::size_t m = out.size();
  std::vector<std::size_t> low;
  for (std::size_t i = 0; i < m; ++i) {
    if (out.opacities[i] < config.prune_opacity) low.push_back(i);
  }
  const auto cap = std::min(m > 0 ? m - 1 : 0,
                            static_cast<std::size_t>(std::floor(config.max_prune_fraction * static_cast<double>(m))));
  if (low.size() > cap) {
    std::stable_sort(low.begin(), low.end(), [&](std::size_t a, std::size_t b) { return out.opacities[a] < out.opacities[b]; });
    low.resize(cap);
  }
  if (!low.empty()) {
    std::vector<char> drop(m, 0);
    for (std::size_t i : low) drop[i] = 1;
    std::vector<std::size_t> keep;
    std::vector<long> kept_src;
    for (std::size_t i = 0; i < m; ++i) {
      if (drop[i]) continue;
      keep.push_back(i);
      kept_src.push_back(src[i]);
    }
    GaussianCloud pruned = out.gathered(keep);
    pruned.set_active_sh_degree(out.active_sh_degree());
    out = std::move(pruned);
    src = std::move(kept_src);
    stats.pruned = low.size();
  }
  cloud = std::move(out);
  if (source) *source = std::move(src);
  return stats;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

class Optimizer {
 public:
  Optimizer(GaussianCloud& cloud, const TrainConfig& config, double extent)
      : cloud_(cloud), config_(config), extent_(extent) {
    sync_from_cloud();
  }

  void step(const CloudGradients& g, int iteration) {
    ++t_;
    const double bias1 = 1.0 - std::pow(kBeta1, t_);
    const double bias2 = 1.0 - std::pow(kBeta2, t_);
    const double progress =
        config_.iterations > 1 ? static_cast<double>(iteration - 1) / (config_.iterations - 1) : 0.0;
    const double lr_pos = log_lerp(config_.lr.position * extent_, config_.lr.position_final * extent_, progress);
    const std::size_t n = cloud_.size();
    const int coeffs = cloud_.coeffs_per_channel();
    const int active = sh_coeff_count(std::min(config_.sh_degree_cap, cloud_.sh_degree()));
    for (std::size_t i = 0; i < n; ++i) {
      for (int k = 0; k < 3; ++k) {
        const std::size_t f = 3 * i + static_cast<std::size_t>(k);
        cloud_.positions[i][k] -= pos_.step(f, g.positions[i][k], lr_pos, bias1, bias2);
        log_scales_[i][k] -= scale_.step(f, g.log_scales[i][k], config_.lr.scale, bias1, bias2);
      }
      for (int k = 0; k < 4; ++k) {
        cloud_.rotations[i][k] -= rot_.step(4 * i + static_cast<std::size_t>(k), g.rotations[i][k], config_.lr.rotation, bias1, bias2);
      }
      logits_[i] -= opa_.step(i, g.opacity_logits[i], config_.lr.opacity, bias1, bias2);
      double* sh = cloud_.sh_of(i);
      const std::size_t base = i * 3 * static_cast<std::size_t>(coeffs);
      for (int ch = 0; ch < 3; ++ch) {
        for (int k = 0; k < active; ++k) {
          const std::size_t f = base + static_cast<std::size_t>(ch * coeffs + k);
          const double lr = k == 0 ? config_.lr.sh_dc : config_.lr.sh_dc / config_.lr.sh_rest_divisor;
          sh[ch * coeffs + k] -= sh_.step(f, g.sh[f], lr, bias1, bias2);
        }
      }
    }
    sync_to_cloud();
  }

  /// Rebuilds internal parameters after the cloud changed size.
  void remap(const std::vector<long>& source) {
    pos_.remap(source, 3);
    scale_.remap(source, 3);
    rot_.remap(source, 4);
    opa_.remap(source, 1);
    sh_.remap(source, 3 * static_cast<std::size_t>(cloud_.coeffs_per_channel()));
    log_scales_.resize(cloud_.size());
    logits_.resize(cloud_.size());
    for (std::size_t i = 0; i < cloud_.size(); ++i) {
      log_scales_[i] = cloud_.scales[i].array().log();
      logits_[i] = logit(cloud_.opacities[i]);
    }
  }

 private:
  void sync_from_cloud() {
    const std::size_t n = cloud_.size();
    log_scales_.resize(n);
    logits_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      log_scales_[i] = cloud_.scales[i].array().log();
      logits_[i] = logit(cloud_.opacities[i]);
    }
    pos_.resize(3 * n);
    scale_.resize(3 * n);
    rot_.resize(4 * n);
    opa_.resize(n);
    sh_.resize(cloud_.sh.size());
  }

  void sync_to_cloud() {
    for (std::size_t i = 0; i < cloud_.size(); ++i) {
      cloud_.rotations[i] = normalized_quat(cloud_.rotations[i]);
      cloud_.scales[i] = log_scales_[i].array().exp().max(kMinScale);
      // Keep opacity strictly inside (0,1) in double precision.
      logits_[i] = std::clamp(logits_[i], -30.0, 30.0);
      cloud_.opacities[i] = sigmoid(logits_[i]);
    }
  }

  GaussianCloud& cloud_;
  const TrainConfig& config_;
  double extent_;
  int t_ = 0;
  std::vector<Vec3> log_scales_;
  std::vector<double> logits_;
  Moments pos_, scale_, rot_, opa_, sh_;
};

void add_terms(LossTerms& acc, const LossTerms& t) {
  acc.gs += t.gs;
  acc.depth += t.depth;
  acc.distortion += t.distortion;
  acc.tv += t.tv;
  acc.total += t.total;
}

}  // namespace

TrainResult train(const SceneBundle& bundle, const TrainConfig& config, std::span<const int> train_views,
                  const GaussianCloud* initial, const TrainCallback& callback) {
  const auto t0 = std::chrono::steady_clock::now();
  bundle.validate();
  config.validate();
  std::vector<int> views(train_views.begin(), train_views.end());
  if (views.empty()) {
    views.resize(bundle.records.size());
    std::iota(views.begin(), views.end(), 0);
  }
  for (int v : views) {
    if (v < 0 || v >= static_cast<int>(bundle.records.size())) throw ArgumentError("training view index out of range");
  }

  TrainResult result;
  GaussianCloud& cloud = result.cloud;
  cloud = initial && !initial->empty() ? *initial : initialize(bundle, views, config.sh_degree);
  cloud.validate();
  cloud.set_active_sh_degree(std::min(config.sh_degree_cap, cloud.sh_degree()));
  const double extent = std::max(scene_extent(cloud.positions), 1e-9);

  std::vector<Camera> cams;
  for (int v : views) cams.push_back(bundle.records[static_cast<std::size_t>(v)].camera);
  const bool use_virtual = config.virtual_per_iter > 0 && cams.size() >= 2 &&
                           (config.objective.weights.distortion > 0.0 || config.objective.weights.tv > 0.0);

  std::mt19937_64 rng(config.seed);
  // View order: a fresh permutation each epoch, drawn from its own stream.
  std::mt19937_64 order_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<int> order;
  Optimizer opt(cloud, config, extent);
  CloudGradients grads(cloud.size(), 3 * cloud.coeffs_per_channel());
  std::vector<double> grad_accum(cloud.size(), 0.0);
  std::vector<int> grad_denom(cloud.size(), 0);
  result.report.gaussian_counts.emplace_back(0, cloud.size());

  for (int it = 1; it <= config.iterations; ++it) {
    IterationRecord rec;
    rec.iteration = it;
    if (order.empty()) {
      order = views;
      std::shuffle(order.begin(), order.end(), order_rng);
    }
    rec.view = order.back();
    order.pop_back();
    const auto& target = bundle.records[static_cast<std::size_t>(rec.view)];
    if (grads.size() != cloud.size()) {
      grads.reset(cloud.size(), 3 * cloud.coeffs_per_channel());
    } else {
      grads.set_zero();
    }

    const RenderOutput out = render(cloud, target.camera, config.render);
    const ObjectiveResult obj = total_loss(out, target.rgb, target.depth ? &*target.depth : nullptr, config.objective);
    rec.real = obj.terms;
    if (!std::isfinite(obj.terms.total)) {
      if (!config.snapshot_path.empty()) save_cloud(cloud, config.snapshot_path);
      throw TrainingDiverged("non-finite loss at iteration " + std::to_string(it), it);
    }
    render_backward(cloud, out, obj.image_gradients(), grads);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      if (grads.visible_count[i] > 0) {
        grad_accum[i] += grads.screen_grad_norm[i];
        grad_denom[i] += 1;
      }
    }

    if (use_virtual) {
      for (int k = 0; k < config.virtual_per_iter; ++k) {
        const VirtualView vv = sample_virtual(cams, rng);
        const RenderOutput vout = render(cloud, vv.camera, config.render);
        const ObjectiveResult vobj = virtual_loss(vout, config.objective);
        add_terms(rec.virtual_terms, vobj.terms);
        render_backward(cloud, vout, vobj.image_gradients(), grads);
      }
    }
    if (!std::isfinite(rec.virtual_terms.total) || !all_finite(grads)) {
      if (!config.snapshot_path.empty()) save_cloud(cloud, config.snapshot_path);
      throw TrainingDiverged("non-finite gradient at iteration " + std::to_string(it), it);
    }

    opt.step(grads, it);

    const auto& d = config.densify;
    if (d.enabled && it >= d.start && it <= d.stop && it % d.interval == 0) {
      std::vector<double> mean(cloud.size(), 0.0);
      for (std::size_t i = 0; i < cloud.size(); ++i) {
        if (grad_denom[i] > 0) mean[i] = grad_accum[i] / grad_denom[i];
      }
      std::vector<long> source;
      const DensifyStats stats = densify_and_prune(cloud, mean, d, extent, rng, &source);
      opt.remap(source);
      grad_accum.assign(cloud.size(), 0.0);
      grad_denom.assign(cloud.size(), 0);
      result.report.densify_events.push_back(stats);
      result.report.gaussian_counts.emplace_back(it, cloud.size());
    }
    rec.gaussians = cloud.size();
    if (it % config.log_every == 0 || it == config.iterations) result.report.iterations.push_back(rec);
    if (callback && !callback(it, rec)) break;
  }
  result.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace endosplat
