// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/synthetic.hpp>

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <algorithm>
#include <map>
#include <random>
#include <set>

namespace endosplat {

using json = nlohmann::json;

namespace {

constexpr std::size_t kMaxTestViews = 24;

struct Bump {
  Vec2 center;
  double height;
  double radius;
};

/// Bumps are drawn from their own stream so that the surface does not
/// depend on the Gaussian count.
std::vector<Bump> make_bumps(const SyntheticSpec& spec) {
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> pos(-0.5 * spec.patch_size, 0.5 * spec.patch_size);
  std::uniform_real_distribution<double> h(-0.5, 1.0), r(0.08, 0.2);
  std::vector<Bump> bumps;
  for (int i = 0; i < spec.bump_count; ++i) {
    bumps.push_back({Vec2(pos(rng), pos(rng)), spec.bump_height * h(rng), spec.patch_size * r(rng)});
  }
  return bumps;
}

double height_at(const std::vector<Bump>& bumps, double x, double y) {
  double z = 0.0;
  for (const auto& b : bumps) {
    const double d2 = (Vec2(x, y) - b.center).squaredNorm();
    z += b.height * std::exp(-0.5 * d2 / (b.radius * b.radius));
  }
  return z;
}

/// Smooth value noise on a lattice, hashed from integer coordinates.
class ValueNoise {
 public:
  explicit ValueNoise(std::uint64_t seed) : seed_(seed) {}

  double operator()(double x, double y) const {
    const double fx = std::floor(x), fy = std::floor(y);
    const auto ix = static_cast<long long>(fx), iy = static_cast<long long>(fy);
    const double tx = smooth(x - fx), ty = smooth(y - fy);
    const double a = lattice(ix, iy), b = lattice(ix + 1, iy), c = lattice(ix, iy + 1), d = lattice(ix + 1, iy + 1);
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
  }

  double fractal(double x, double y, int octaves) const {
    double sum = 0.0, amp = 0.5, freq = 1.0;
    for (int o = 0; o < octaves; ++o) {
      sum += amp * (*this)(x * freq, y * freq);
      amp *= 0.5;
      freq *= 2.0;
    }
    return sum;
  }

 private:
  static double smooth(double t) { return t * t * (3 - 2 * t); }

  double lattice(long long x, long long y) const {
    std::uint64_t h = seed_ ^ (static_cast<std::uint64_t>(x) * 0x9E3779B185EBCA87ULL) ^
                      (static_cast<std::uint64_t>(y) * 0xC2B2AE3D27D4EB4FULL);
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdULL;
    h ^= h >> 33;
    h *= 0xc4ceb9fe1a85ec53ULL;
    h ^= h >> 33;
    return static_cast<double>(h >> 11) / static_cast<double>(1ULL << 53);
  }

  std::uint64_t seed_;
};

Vec3 tissue_color(const ValueNoise& noise, const SyntheticSpec& spec, double x, double y) {
  const double u = x / spec.patch_size * 8.0, v = y / spec.patch_size * 8.0;
  const double n = noise.fractal(u, v, 4);
  // Thin dark ridges where a second noise field crosses its midline mimic vessels.
  const double vessel = std::exp(-std::pow((noise.fractal(0.6 * u + 17.0, 0.6 * v - 5.0, 3) - 0.5) / 0.025, 2));
  Vec3 base(0.85, 0.42 + 0.25 * (n - 0.5), 0.38 + 0.2 * (n - 0.5));
  base *= 0.75 + 0.5 * n;
  const Vec3 vessel_color(0.45, 0.08, 0.1);
  return ((1 - 0.8 * vessel) * base + 0.8 * vessel * vessel_color).cwiseMax(0.0).cwiseMin(1.0);
}

/// Rotation whose third column is the unit normal n.
Mat3 frame_from_normal(const Vec3& n) {
  Vec3 t = std::abs(n.x()) < 0.9 ? Vec3::UnitX() : Vec3::UnitY();
  t = (t - t.dot(n) * n).normalized();
  Mat3 r;
  r.col(0) = t;
  r.col(1) = n.cross(t);
  r.col(2) = n;
  return r;
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void SyntheticSpec::validate() const {
  if (camera_count < 2) throw ConfigError("synthetic scene needs at least 2 cameras");
  if (!(arc_span_deg > 0.0)) throw ConfigError("camera arc span must be positive");
  if (gaussian_count == 0) throw ConfigError("gaussian_count must be positive");
  if (width <= 0 || height <= 0) throw ConfigError("image size must be positive");
  if (!(patch_size > 0.0) || !(arc_radius > 0.0)) throw ConfigError("patch size and arc radius must be positive");
  if (!(fov_deg > 0.0 && fov_deg < 170.0)) throw ConfigError("fov must lie in (0,170) degrees");
  if (depth_noise < 0.0 || depth_scale_jitter < 0.0 || init_jitter < 0.0) throw ConfigError("noise levels must be nonnegative");
  if (subsurface_layers < 0) throw ConfigError("subsurface_layers must be nonnegative");
}

SyntheticSpec SyntheticSpec::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed synthetic spec: ") + e.what(), e.byte);
  }
  SyntheticSpec s;
  const std::set<std::string> known{"gaussian_count", "patch_size", "bump_count", "bump_height", "subsurface_layers",
                                    "layer_spacing", "arc_radius", "arc_span_deg", "camera_count", "width", "height",
                                    "fov_deg", "depth_scale_jitter", "depth_noise", "init_points", "init_jitter", "seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in synthetic spec");
  }
  try {
    read_field(j, "gaussian_count", s.gaussian_count);
    read_field(j, "patch_size", s.patch_size);
    read_field(j, "bump_count", s.bump_count);
    read_field(j, "bump_height", s.bump_height);
    read_field(j, "subsurface_layers", s.subsurface_layers);
    read_field(j, "layer_spacing", s.layer_spacing);
    read_field(j, "arc_radius", s.arc_radius);
    read_field(j, "arc_span_deg", s.arc_span_deg);
    read_field(j, "camera_count", s.camera_count);
    read_field(j, "width", s.width);
    read_field(j, "height", s.height);
    read_field(j, "fov_deg", s.fov_deg);
    read_field(j, "depth_scale_jitter", s.depth_scale_jitter);
    read_field(j, "depth_noise", s.depth_noise);
    read_field(j, "init_points", s.init_points);
    read_field(j, "init_jitter", s.init_jitter);
    read_field(j, "seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::string SyntheticSpec::to_json() const {
  nlohmann::ordered_json j{{"gaussian_count", gaussian_count}, {"patch_size", patch_size},
                           {"bump_count", bump_count},         {"bump_height", bump_height},
                           {"subsurface_layers", subsurface_layers}, {"layer_spacing", layer_spacing},
                           {"arc_radius", arc_radius},         {"arc_span_deg", arc_span_deg},
                           {"camera_count", camera_count},     {"width", width},
                           {"height", height},                 {"fov_deg", fov_deg},
                           {"depth_scale_jitter", depth_scale_jitter}, {"depth_noise", depth_noise},
                           {"init_points", init_points},       {"init_jitter", init_jitter},
                           {"seed", seed}};
  return j.dump(2);
}

double synthetic_height(const SyntheticSpec& spec, double x, double y) { return height_at(make_bumps(spec), x, y); }

SyntheticScene generate(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticScene scene;
  const auto bumps = make_bumps(spec);
  const ValueNoise noise(spec.seed + 17);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Jittered grid of surface samples; subsurface layers repeat the grid below.
  const int layers = 1 + spec.subsurface_layers;
  const std::size_t per_layer = std::max<std::size_t>(1, spec.gaussian_count / static_cast<std::size_t>(layers));
  const int side = std::max(1, static_cast<int>(std::ceil(std::sqrt(static_cast<double>(per_layer)))));
  const double cell = spec.patch_size / side;
  GaussianCloud& gt = scene.ground_truth;
  gt = GaussianCloud(0, 0);
  for (int layer = 0; layer < layers; ++layer) {
    for (std::size_t k = 0; k < per_layer; ++k) {
      const int gx = static_cast<int>(k % static_cast<std::size_t>(side)), gy = static_cast<int>(k / static_cast<std::size_t>(side));
      const double x = -0.5 * spec.patch_size + (gx + unit(rng)) * cell;
      const double y = -0.5 * spec.patch_size + (gy + unit(rng)) * cell;
      const double e = 1e-4;
      const double hx = (height_at(bumps, x + e, y) - height_at(bumps, x - e, y)) / (2 * e);
      const double hy = (height_at(bumps, x, y + e) - height_at(bumps, x, y - e)) / (2 * e);
      const Vec3 n = Vec3(-hx, -hy, 1.0).normalized();
      GaussianPrimitive p;
      p.position = Vec3(x, y, height_at(bumps, x, y)) - n * (layer * spec.layer_spacing);
      p.rotation = matrix_to_quat(frame_from_normal(n));
      const double tangent = cell * (0.6 + 0.3 * unit(rng));
      p.scale = Vec3(tangent, cell * (0.6 + 0.3 * unit(rng)), 0.12 * cell);
      p.opacity = 0.85 + 0.1 * unit(rng);
      const Vec3 c = tissue_color(noise, spec, x, y) * (layer == 0 ? 1.0 : 0.7);
      p.sh = {rgb_to_sh_dc(c.x()), rgb_to_sh_dc(c.y()), rgb_to_sh_dc(c.z())};
      gt.push_back(p);
    }
  }

  const double f = 0.5 * spec.width / std::tan(0.5 * spec.fov_deg * M_PI / 180.0);
  const double span = spec.arc_span_deg * M_PI / 180.0;
  SceneBundle& b = scene.bundle;
  for (int i = 0; i < spec.camera_count; ++i) {
    const double theta = -0.5 * span + span * i / (spec.camera_count - 1);
    const Vec3 center(spec.arc_radius * std::sin(theta), 0.0, spec.arc_radius * std::cos(theta));
    // Looking at the patch center; image y runs along world -y.
    const Vec3 z = (-center).normalized();
    const Vec3 x = Vec3(0, 1, 0).cross(z).normalized();
    Mat3 c2w;
    c2w.col(0) = x;
    c2w.col(1) = z.cross(x);
    c2w.col(2) = z;
    TrainingRecord rec;
    char name[32];
    std::snprintf(name, sizeof(name), "%05d", i);
    rec.name = name;
    rec.camera = Camera::from_center(center, c2w, f, f, 0.5 * spec.width, 0.5 * spec.height, spec.width, spec.height);
    const RenderOutput r = render(gt, rec.camera);
    rec.rgb = r.rgb;
    Image depth = r.depth;
    scene.clean_depth.push_back(r.depth);
    if (spec.depth_noise > 0.0 || spec.depth_scale_jitter > 0.0) {
      const double scale = 1.0 + spec.depth_scale_jitter * normal(rng);
      for (auto& d : depth.data()) {
        if (d > 0.0) d = std::max(0.0, d * scale + spec.depth_noise * normal(rng));
      }
    }
    rec.depth = std::move(depth);
    b.records.push_back(std::move(rec));
  }

  // SfM-like initialization: sparse noisy surface samples with image colors.
  PointCloud pc;
  for (std::size_t k = 0; k < spec.init_points; ++k) {
    const double x = (unit(rng) - 0.5) * spec.patch_size, y = (unit(rng) - 0.5) * spec.patch_size;
    pc.positions.emplace_back(x + spec.init_jitter * normal(rng), y + spec.init_jitter * normal(rng),
                              height_at(bumps, x, y) + spec.init_jitter * normal(rng));
    pc.colors.push_back((tissue_color(noise, spec, x, y) + 0.03 * Vec3(normal(rng), normal(rng), normal(rng)))
                            .cwiseMax(0.0)
                            .cwiseMin(1.0));
  }
  b.init_points = std::move(pc);

  // Fraction protocols train on evenly spaced cameras that include both
  // ends of the arc. All protocols share one held-out set drawn from the
  // cameras none of them trains on.
  const int n = spec.camera_count;
  auto spaced = [n](int k) {
    k = std::clamp(k, 2, n);
    std::vector<int> idx;
    for (int i = 0; i < k; ++i) {
      const int v = static_cast<int>(std::lround(static_cast<double>(i) * (n - 1) / (k - 1)));
      if (idx.empty() || idx.back() != v) idx.push_back(v);
    }
    return idx;
  };
  std::map<std::string, std::vector<int>> train;
  train["two_view"] = {0, n - 1};
  train["pct_4"] = spaced(static_cast<int>(std::lround(0.04 * n)));
  train["pct_25"] = spaced(static_cast<int>(std::lround(0.25 * n)));
  std::set<int> used;
  for (const auto& [name, idx] : train) used.insert(idx.begin(), idx.end());
  std::vector<int> unused;
  for (int i = 0; i < n; ++i) {
    if (!used.count(i)) unused.push_back(i);
  }
  std::vector<int> test;
  const std::size_t stride = std::max<std::size_t>(1, (unused.size() + kMaxTestViews - 1) / kMaxTestViews);
  for (std::size_t i = stride / 2; i < unused.size(); i += stride) test.push_back(unused[i]);
  std::vector<int> dense;
  for (int i = 0; i < n; ++i) {
    if (!std::binary_search(test.begin(), test.end(), i)) dense.push_back(i);
  }
  train["dense"] = std::move(dense);
  for (const auto& [name, idx] : train) b.splits[name] = Split{idx, test};
  return scene;
}

}  // namespace endosplat
