// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/rasterizer.hpp>
#include <endosplat/spherical_harmonics.hpp>

#include "parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace endosplat {

using Mat23 = Eigen::Matrix<double, 2, 3>;

struct ForwardState {
  struct Splat {
    int index = 0;
    Vec3 position;  // world position, used to detect a mismatched cloud
    Vec2 mean;
    Vec3 conic;  // (a, b, c) of the inverse screen covariance
    Mat2 cov;
    Vec3 p_cam;
    Mat23 proj;  // J W
    Mat3 cov3;
    Vec3 color;
    std::array<bool, 3> clamped{};
    double opacity = 0.0;
    Vec3 view_dir;
    double view_dist = 1.0;
    Vec2 extent;
  };

  /// Compact copy of what the per-pixel loop reads, in splat order.
  struct Blend {
    double mx, my;
    double ca, cb, cc;
    double opacity;
    /// Exponents below this give alpha < kMinAlpha (with a small safety margin).
    double power_min;
    double z;
    /// Axis-aligned half-widths of the region where alpha >= kMinAlpha.
    double ex, ey;
  };

  std::size_t count = 0;
  std::size_t sh_values = 0;
  int sh_degree = 0;
  bool differentiable = true;
  Camera camera;
  RenderSettings settings;
  Mat3 world_to_camera;
  Vec3 camera_center;
  std::vector<Splat> splats;  // ascending depth
  std::vector<Blend> blend;
  int tiles_x = 0;
  int tiles_y = 0;
  std::vector<int> tile_offsets;  // CSR over tiles
  std::vector<int> tile_entries;  // indices into splats

  /// Blended contributions recorded by the forward pass, replayed by the
  /// backward pass. Hits are stored per tile; each pixel points at a run.
  struct Hit {
    int splat;
    double gauss;
  };
  struct Run {
    int tile = 0;
    int begin = 0;
    int count = 0;
  };
  std::vector<std::vector<Hit>> tile_hits;
  std::vector<Run> pixel_runs;
};

namespace {

struct Projected {
  Splat2D splat;
  Vec3 p_cam;
  Mat23 proj;
};

std::optional<Projected> project_impl(const Vec3& position, const Mat3& cov3, double opacity, const Camera& cam,
                                      const Mat3& w2c, const RenderSettings& settings) {
  const Vec3 p = w2c * position + cam.tvec;
  const double z = p.z();
  if (!(z > settings.near_plane)) return std::nullopt;
  if (!(opacity >= kMinAlpha)) return std::nullopt;
  const double inv_z = 1.0 / z;
  Projected out;
  out.p_cam = p;
  out.splat.mean = Vec2(cam.fx * p.x() * inv_z + cam.cx, cam.fy * p.y() * inv_z + cam.cy);
  out.splat.depth = z;
  out.splat.opacity = opacity;
  Mat23 jac;
  jac << cam.fx * inv_z, 0.0, -cam.fx * p.x() * inv_z * inv_z, 0.0, cam.fy * inv_z, -cam.fy * p.y() * inv_z * inv_z;
  out.proj = jac * w2c;
  out.splat.cov = out.proj * cov3 * out.proj.transpose();
  out.splat.cov(0, 0) += settings.low_pass;
  out.splat.cov(1, 1) += settings.low_pass;
  if (!(out.splat.cov.determinant() > 0.0)) return std::nullopt;
  // Beyond this box sigma * G(p) < kMinAlpha, so no pixel outside it blends.
  const double k = std::log(opacity / kMinAlpha);
  out.splat.extent = Vec2(std::sqrt(2.0 * k * out.splat.cov(0, 0)), std::sqrt(2.0 * k * out.splat.cov(1, 1)));
  const Vec2& m = out.splat.mean;
  const Vec2& e = out.splat.extent;
  if (m.x() + e.x() < -1.0 || m.x() - e.x() > cam.width || m.y() + e.y() < -1.0 || m.y() - e.y() > cam.height) {
    return std::nullopt;
  }
  return out;
}

Vec3 conic_of(const Mat2& cov) {
  const double det = cov.determinant();
  return Vec3(cov(1, 1) / det, -cov(0, 1) / det, cov(0, 0) / det);
}

/// Color from SH with the 3DGS +0.5 offset and clamp at zero.
Vec3 eval_color(const double* sh, int coeffs, int degree, const Vec3& dir, std::array<bool, 3>& clamped) {
  std::array<double, 16> basis;
  sh_basis(degree, dir, basis);
  const int used = sh_coeff_count(degree);
  Vec3 c;
  for (int ch = 0; ch < 3; ++ch) {
    double s = 0.5;
    for (int k = 0; k < used; ++k) s += sh[ch * coeffs + k] * basis[k];
    clamped[ch] = s < 0.0;
    c[ch] = clamped[ch] ? 0.0 : s;
  }
  return c;
}

std::shared_ptr<ForwardState> prepare(const GaussianCloud& cloud, const Mat3* covariances, const Camera& camera,
                                      const RenderSettings& settings) {
  camera.validate();
  if (settings.tile_size <= 0) throw ArgumentError("tile size must be positive");
  auto st = std::make_shared<ForwardState>();
  st->count = cloud.size();
  st->sh_values = static_cast<std::size_t>(3 * cloud.coeffs_per_channel());
  st->sh_degree = cloud.active_sh_degree();
  st->differentiable = covariances == nullptr;
  st->camera = camera;
  st->settings = settings;
  st->world_to_camera = camera.rotation();
  st->camera_center = camera.center();

  const int coeffs = cloud.coeffs_per_channel();
  std::vector<ForwardState::Splat> splats;
  splats.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Mat3 cov3 = covariances ? covariances[i] : covariance_of(cloud.rotations[i], cloud.scales[i]);
    auto pr = project_impl(cloud.positions[i], cov3, cloud.opacities[i], camera, st->world_to_camera, settings);
    if (!pr) continue;
    ForwardState::Splat s;
    s.index = static_cast<int>(i);
    s.position = cloud.positions[i];
    s.mean = pr->splat.mean;
    s.cov = pr->splat.cov;
    s.extent = pr->splat.extent;
    s.conic = conic_of(s.cov);
    s.p_cam = pr->p_cam;
    s.proj = pr->proj;
    s.cov3 = cov3;
    s.opacity = cloud.opacities[i];
    const Vec3 v = cloud.positions[i] - st->camera_center;
    s.view_dist = v.norm();
    s.view_dir = s.view_dist > 0.0 ? Vec3(v / s.view_dist) : Vec3(0, 0, 1);
    s.color = eval_color(cloud.sh_of(i), coeffs, st->sh_degree, s.view_dir, s.clamped);
    splats.push_back(s);
  }
  std::stable_sort(splats.begin(), splats.end(),
                   [](const auto& a, const auto& b) { return a.p_cam.z() < b.p_cam.z(); });
  st->splats = std::move(splats);
  st->blend.reserve(st->splats.size());
  for (const auto& sp : st->splats) {
    st->blend.push_back({sp.mean.x(), sp.mean.y(), sp.conic.x(), sp.conic.y(), sp.conic.z(), sp.opacity,
                         std::log(kMinAlpha / sp.opacity) - 1e-9, sp.p_cam.z(), sp.extent.x(), sp.extent.y()});
  }

  const int ts = settings.tile_size;
  st->tiles_x = (camera.width + ts - 1) / ts;
  st->tiles_y = (camera.height + ts - 1) / ts;
  const int tiles = st->tiles_x * st->tiles_y;
  std::vector<std::array<int, 4>> rects(st->splats.size());
  std::vector<int> counts(static_cast<std::size_t>(tiles) + 1, 0);
  for (std::size_t s = 0; s < st->splats.size(); ++s) {
    const auto& sp = st->splats[s];
    const Vec2 e = Vec2(sp.cov(0, 0), sp.cov(1, 1)).cwiseSqrt() * std::sqrt(2.0 * std::log(sp.opacity / kMinAlpha));
    auto tile_lo = [&](double v, int n) { return std::clamp(static_cast<int>(std::floor((v - 1.0) / ts)), 0, n - 1); };
    auto tile_hi = [&](double v, int n) { return std::clamp(static_cast<int>(std::floor((v + 1.0) / ts)), 0, n - 1); };
    auto& r = rects[s];
    r = {tile_lo(sp.mean.x() - e.x(), st->tiles_x), tile_hi(sp.mean.x() + e.x(), st->tiles_x),
         tile_lo(sp.mean.y() - e.y(), st->tiles_y), tile_hi(sp.mean.y() + e.y(), st->tiles_y)};
    for (int ty = r[2]; ty <= r[3]; ++ty)
      for (int tx = r[0]; tx <= r[1]; ++tx) ++counts[static_cast<std::size_t>(ty * st->tiles_x + tx) + 1];
  }
  std::partial_sum(counts.begin(), counts.end(), counts.begin());
  st->tile_offsets = counts;
  st->tile_entries.resize(static_cast<std::size_t>(counts.back()));
  std::vector<int> cursor(counts.begin(), counts.end() - 1);
  for (std::size_t s = 0; s < st->splats.size(); ++s) {
    const auto& r = rects[s];
    for (int ty = r[2]; ty <= r[3]; ++ty)
      for (int tx = r[0]; tx <= r[1]; ++tx)
        st->tile_entries[static_cast<std::size_t>(cursor[static_cast<std::size_t>(ty * st->tiles_x + tx)]++)] =
            static_cast<int>(s);
  }
  return st;
}

/// One blended contribution at a pixel.
struct Contribution {
  int splat;
  double alpha;
  double gauss;  // exp(power)
  bool clamped;
  double transmittance;  // before this splat
  Vec2 d;                // pixel - mean
};

/// Walks a tile list front to back applying the blending rules. Calls
/// visit(contribution) for each blended splat; returns final transmittance.
template <class Visit>
double blend_pixel(const ForwardState& st, const int* begin, const int* end, double px, double py, Visit&& visit) {
  double t = 1.0;
  for (const int* it = begin; it != end; ++it) {
    const auto& s = st.blend[static_cast<std::size_t>(*it)];
    const double dx = px - s.mx, dy = py - s.my;
    const double power = -0.5 * (s.ca * dx * dx + s.cc * dy * dy) - s.cb * dx * dy;
    if (power > 0.0 || power < s.power_min) continue;
    const double g = std::exp(power);
    const double raw = s.opacity * g;
    const bool clamped = raw > kMaxAlpha;
    const double alpha = clamped ? kMaxAlpha : raw;
    if (alpha < kMinAlpha) continue;
    const double next_t = t * (1.0 - alpha);
    if (next_t < kMinTransmittance) break;
    visit(Contribution{*it, alpha, g, clamped, t, Vec2(dx, dy)});
    t = next_t;
  }
  return t;
}

/// Replays hits recorded by blend_pixel with the same arithmetic.
template <class Visit>
double replay_pixel(const ForwardState& st, const ForwardState::Hit* begin, const ForwardState::Hit* end, double px,
                    double py, Visit&& visit) {
  double t = 1.0;
  for (const auto* h = begin; h != end; ++h) {
    const auto& s = st.blend[static_cast<std::size_t>(h->splat)];
    const double raw = s.opacity * h->gauss;
    const bool clamped = raw > kMaxAlpha;
    const double alpha = clamped ? kMaxAlpha : raw;
    visit(Contribution{h->splat, alpha, h->gauss, clamped, t, Vec2(px - s.mx, py - s.my)});
    t = t * (1.0 - alpha);
  }
  return t;
}

constexpr int kBlock = 4;

/// Splits a tile into kBlock x kBlock pixel blocks, narrows the tile list to
/// splats whose alpha >= kMinAlpha box reaches each block, and calls
/// fn(x0, x1, y0, y1, begin, end) with inclusive pixel bounds.
template <class Fn>
void for_each_block(const ForwardState& st, int tile, std::vector<int>& scratch, bool visit_empty, Fn&& fn) {
  const int ts = st.settings.tile_size;
  const int tx = tile % st.tiles_x, ty = tile / st.tiles_x;
  const int* lb = st.tile_entries.data() + st.tile_offsets[static_cast<std::size_t>(tile)];
  const int* le = st.tile_entries.data() + st.tile_offsets[static_cast<std::size_t>(tile) + 1];
  if (lb == le && !visit_empty) return;
  const int xe = std::min(st.camera.width, (tx + 1) * ts), ye = std::min(st.camera.height, (ty + 1) * ts);
  for (int y0 = ty * ts; y0 < ye; y0 += kBlock) {
    const int y1 = std::min(ye, y0 + kBlock) - 1;
    for (int x0 = tx * ts; x0 < xe; x0 += kBlock) {
      const int x1 = std::min(xe, x0 + kBlock) - 1;
      scratch.clear();
      for (const int* it = lb; it != le; ++it) {
        const auto& b = st.blend[static_cast<std::size_t>(*it)];
        const double dx = b.mx < x0 ? x0 - b.mx : (b.mx > x1 ? b.mx - x1 : 0.0);
        const double dy = b.my < y0 ? y0 - b.my : (b.my > y1 ? b.my - y1 : 0.0);
        if (dx <= b.ex + 1e-6 && dy <= b.ey + 1e-6) scratch.push_back(*it);
      }
      if (!scratch.empty() || visit_empty) fn(x0, x1, y0, y1, scratch.data(), scratch.data() + scratch.size());
    }
  }
}

RenderOutput run_forward(std::shared_ptr<ForwardState> st) {
  const Camera& cam = st->camera;
  RenderOutput out;
  out.rgb = Image(cam.width, cam.height, 3);
  out.depth = Image(cam.width, cam.height, 1);
  out.alpha = Image(cam.width, cam.height, 1);
  out.distortion = Image(cam.width, cam.height, 1);
  const Vec3 bg = st->settings.background;
  const int tiles = st->tiles_x * st->tiles_y;
  const bool record = st->differentiable;
  if (record) {
    st->tile_hits.assign(static_cast<std::size_t>(tiles), {});
    st->pixel_runs.assign(static_cast<std::size_t>(cam.width) * cam.height, {});
  }
  detail::parallel_chunks(tiles, detail::resolve_threads(st->settings.threads), [&](int b, int e, int) {
    std::vector<int> scratch;
    for (int tile = b; tile < e; ++tile) {
      std::vector<ForwardState::Hit>* hits = record ? &st->tile_hits[static_cast<std::size_t>(tile)] : nullptr;
      for_each_block(*st, tile, scratch, true, [&](int x0, int x1, int y0, int y1, const int* lb, const int* le) {
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          Vec3 c = Vec3::Zero();
          double depth = 0.0, sum_w = 0.0, sum_wz = 0.0, dist = 0.0;
          const int first = hits ? static_cast<int>(hits->size()) : 0;
          const double t = blend_pixel(*st, lb, le, x, y, [&](const Contribution& k) {
            if (hits) hits->push_back({k.splat, k.gauss});
            const auto& s = st->splats[static_cast<std::size_t>(k.splat)];
            const double w = k.alpha * k.transmittance;
            const double z = s.p_cam.z();
            c += w * s.color;
            depth += w * z;
            dist += w * (z * sum_w - sum_wz);
            sum_w += w;
            sum_wz += w * z;
          });
          for (int ch = 0; ch < 3; ++ch) out.rgb.at(x, y, ch) = c[ch] + t * bg[ch];
          out.depth.at(x, y) = depth;
          out.alpha.at(x, y) = 1.0 - t;
          out.distortion.at(x, y) = dist;
          if (hits) {
            st->pixel_runs[static_cast<std::size_t>(y) * cam.width + x] = {tile, first,
                                                                         static_cast<int>(hits->size()) - first};
          }
        }
      }
      });
    }
  });
  out.state = std::move(st);
  return out;
}

struct SplatGrad {
  Vec2 mean = Vec2::Zero();
  Vec3 conic = Vec3::Zero();
  double opacity = 0.0;
  Vec3 color = Vec3::Zero();
  double z = 0.0;

  SplatGrad& operator+=(const SplatGrad& o) {
    mean += o.mean;
    conic += o.conic;
    opacity += o.opacity;
    color += o.color;
    z += o.z;
    return *this;
  }
};

double pixel_value(const Image* img, int x, int y, int c = 0) { return img ? img->at(x, y, c) : 0.0; }

void check_gradient_image(const Image* img, const Camera& cam, int channels, const char* name) {
  if (img && (img->width() != cam.width || img->height() != cam.height || img->channels() != channels)) {
    throw ArgumentError(std::string("gradient image '") + name + "' has the wrong shape");
  }
}

}  // namespace

std::optional<Splat2D> project(const Vec3& position, const Mat3& covariance, double opacity, const Camera& camera,
                               const RenderSettings& settings) {
  auto p = project_impl(position, covariance, opacity, camera, camera.rotation(), settings);
  if (!p) return std::nullopt;
  return p->splat;
}

std::optional<Splat2D> project(const GaussianPrimitive& primitive, int sh_degree, const Camera& camera,
                               const RenderSettings& settings) {
  auto s = project(primitive.position, covariance_of(primitive), primitive.opacity, camera, settings);
  if (!s) return s;
  const int coeffs = static_cast<int>(primitive.sh.size() / 3);
  const int degree = std::min(sh_degree, static_cast<int>(std::lround(std::sqrt(coeffs))) - 1);
  const Vec3 dir = (primitive.position - camera.center()).normalized();
  std::array<bool, 3> clamped;
  s->color = eval_color(primitive.sh.data(), coeffs, degree, dir, clamped);
  return s;
}

RenderOutput render(const GaussianCloud& cloud, const Camera& camera, const RenderSettings& settings) {
  return run_forward(prepare(cloud, nullptr, camera, settings));
}

RenderOutput render(const GaussianCloud& cloud, std::span<const Mat3> covariances, const Camera& camera,
                    const RenderSettings& settings) {
  if (covariances.size() != cloud.size()) throw StructuralError("covariance count does not match cloud size");
  return run_forward(prepare(cloud, covariances.data(), camera, settings));
}

void CloudGradients::reset(std::size_t count, int sh_values_per_gaussian) {
  positions.assign(count, Vec3::Zero());
  rotations.assign(count, Quat::Zero());
  log_scales.assign(count, Vec3::Zero());
  opacity_logits.assign(count, 0.0);
  sh.assign(count * static_cast<std::size_t>(sh_values_per_gaussian), 0.0);
  screen_grad_norm.assign(count, 0.0);
  visible_count.assign(count, 0);
}

void CloudGradients::set_zero() {
  std::fill(positions.begin(), positions.end(), Vec3::Zero());
  std::fill(rotations.begin(), rotations.end(), Quat::Zero());
  std::fill(log_scales.begin(), log_scales.end(), Vec3::Zero());
  std::fill(opacity_logits.begin(), opacity_logits.end(), 0.0);
  std::fill(sh.begin(), sh.end(), 0.0);
  std::fill(screen_grad_norm.begin(), screen_grad_norm.end(), 0.0);
  std::fill(visible_count.begin(), visible_count.end(), 0);
}

CloudGradients render_backward(const GaussianCloud& cloud, const RenderOutput& forward, const ImageGradients& grads) {
  CloudGradients out(cloud.size(), 3 * cloud.coeffs_per_channel());
  render_backward(cloud, forward, grads, out);
  return out;
}

void render_backward(const GaussianCloud& cloud, const RenderOutput& forward, const ImageGradients& grads,
                     CloudGradients& out) {
  if (!forward.state) throw UsageError("render output carries no forward state");
  const ForwardState& st = *forward.state;
  if (!st.differentiable) throw UsageError("renders with supplied covariances have no backward pass");
  if (st.count != cloud.size() || st.sh_values != static_cast<std::size_t>(3 * cloud.coeffs_per_channel()) ||
      st.sh_degree != cloud.active_sh_degree()) {
    throw UsageError("forward state was produced for a different cloud");
  }
  for (const auto& s : st.splats) {
    if (cloud.positions[static_cast<std::size_t>(s.index)] != s.position) {
      throw UsageError("forward state was produced for a different cloud");
    }
  }
  if (out.size() != cloud.size() || out.sh.size() != cloud.sh.size()) {
    throw UsageError("gradient buffers do not match the cloud");
  }
  const Camera& cam = st.camera;
  check_gradient_image(grads.rgb, cam, 3, "rgb");
  check_gradient_image(grads.depth, cam, 1, "depth");
  check_gradient_image(grads.distortion, cam, 1, "distortion");
  check_gradient_image(grads.alpha, cam, 1, "alpha");

  const Vec3 bg = st.settings.background;
  const int tiles = st.tiles_x * st.tiles_y;
  const int threads = std::clamp(detail::resolve_threads(st.settings.threads), 1, std::max(1, tiles));
  std::vector<std::vector<SplatGrad>> partial(static_cast<std::size_t>(threads),
                                              std::vector<SplatGrad>(st.splats.size()));

  detail::parallel_chunks(tiles, threads, [&](int b, int e, int worker) {
    auto& acc = partial[static_cast<std::size_t>(worker)];
    std::vector<Contribution> list;
    std::vector<double> prefix_w, prefix_wz;
    const int ts = st.settings.tile_size;
    for (int tile = b; tile < e; ++tile) {
      const int x0 = (tile % st.tiles_x) * ts, y0 = (tile / st.tiles_x) * ts;
      const int x1 = std::min(cam.width, x0 + ts) - 1, y1 = std::min(cam.height, y0 + ts) - 1;
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          const Vec3 g_rgb(pixel_value(grads.rgb, x, y, 0), pixel_value(grads.rgb, x, y, 1),
                           pixel_value(grads.rgb, x, y, 2));
          const double g_depth = pixel_value(grads.depth, x, y);
          const double g_dist = pixel_value(grads.distortion, x, y);
          const double g_alpha = pixel_value(grads.alpha, x, y);
          if (g_rgb.isZero() && g_depth == 0.0 && g_dist == 0.0 && g_alpha == 0.0) continue;

          list.clear();
          prefix_w.clear();
          prefix_wz.clear();
          double sum_w = 0.0, sum_wz = 0.0;
          const auto& run = st.pixel_runs[static_cast<std::size_t>(y) * cam.width + x];
          const ForwardState::Hit* hb = st.tile_hits[static_cast<std::size_t>(run.tile)].data() + run.begin;
          const double t_end = replay_pixel(st, hb, hb + run.count, x, y, [&](const Contribution& k) {
            list.push_back(k);
            prefix_w.push_back(sum_w);
            prefix_wz.push_back(sum_wz);
            const double w = k.alpha * k.transmittance;
            sum_w += w;
            sum_wz += w * st.splats[static_cast<std::size_t>(k.splat)].p_cam.z();
          });
          // alpha output = 1 - T_end; the background term also depends on T_end.
          double suffix = (g_rgb.dot(bg) - g_alpha) * t_end;
          for (std::size_t n = list.size(); n-- > 0;) {
            const Contribution& k = list[n];
            const auto& s = st.splats[static_cast<std::size_t>(k.splat)];
            const double z = s.p_cam.z();
            const double w = k.alpha * k.transmittance;
            const double w_before = prefix_w[n], wz_before = prefix_wz[n];
            const double w_after = sum_w - w_before - w, wz_after = sum_wz - wz_before - w * z;
            const double g_w = g_rgb.dot(s.color) + g_depth * z +
                               g_dist * (z * (w_before - w_after) - wz_before + wz_after);
            const double g_a = g_w * k.transmittance - suffix / (1.0 - k.alpha);
            suffix += g_w * w;

            SplatGrad& sg = acc[static_cast<std::size_t>(k.splat)];
            sg.color += g_rgb * w;
            sg.z += w * (g_depth + g_dist * (w_before - w_after));
            if (!k.clamped) {
              sg.opacity += g_a * k.gauss;
              const double g_power = g_a * k.alpha;
              const Vec3& q = s.conic;
              sg.mean += g_power * Vec2(q.x() * k.d.x() + q.y() * k.d.y(), q.y() * k.d.x() + q.z() * k.d.y());
              sg.conic += g_power * Vec3(-0.5 * k.d.x() * k.d.x(), -k.d.x() * k.d.y(), -0.5 * k.d.y() * k.d.y());
            }
          }
        }
      }
    }
  });
  for (int t = 1; t < threads; ++t) {
    for (std::size_t s = 0; s < st.splats.size(); ++s) partial[0][s] += partial[static_cast<std::size_t>(t)][s];
  }
  const std::vector<SplatGrad>& g2d = partial[0];

  const Mat3& W = st.world_to_camera;
  const int coeffs = cloud.coeffs_per_channel();
  const int used = sh_coeff_count(st.sh_degree);
  for (std::size_t si = 0; si < st.splats.size(); ++si) {
    const auto& s = st.splats[si];
    const auto& g = g2d[si];
    const auto idx = static_cast<std::size_t>(s.index);

    // Screen covariance: conic = cov^-1.
    Mat2 q;
    q << s.conic.x(), s.conic.y(), s.conic.y(), s.conic.z();
    Mat2 g_q;
    g_q << g.conic.x(), 0.5 * g.conic.y(), 0.5 * g.conic.y(), g.conic.z();
    const Mat2 g_cov2 = -q * g_q * q;
    const Mat3 g_cov3 = s.proj.transpose() * g_cov2 * s.proj;
    const Mat23 g_proj = 2.0 * g_cov2 * s.proj * s.cov3;
    const Mat23 g_jac = g_proj * W.transpose();

    const Vec3& p = s.p_cam;
    const double iz = 1.0 / p.z(), iz2 = iz * iz, iz3 = iz2 * iz;
    Vec3 g_p = Vec3::Zero();
    g_p.x() += g_jac(0, 2) * (-cam.fx * iz2);
    g_p.y() += g_jac(1, 2) * (-cam.fy * iz2);
    g_p.z() += g_jac(0, 0) * (-cam.fx * iz2) + g_jac(0, 2) * (2.0 * cam.fx * p.x() * iz3) +
               g_jac(1, 1) * (-cam.fy * iz2) + g_jac(1, 2) * (2.0 * cam.fy * p.y() * iz3);
    g_p.x() += g.mean.x() * cam.fx * iz;
    g_p.y() += g.mean.y() * cam.fy * iz;
    g_p.z() += -g.mean.x() * cam.fx * p.x() * iz2 - g.mean.y() * cam.fy * p.y() * iz2;
    g_p.z() += g.z;
    Vec3 g_pos = W.transpose() * g_p;

    // SH color.
    std::array<double, 16> basis;
    std::array<Vec3, 16> basis_jac;
    sh_basis(st.sh_degree, s.view_dir, basis, &basis_jac);
    double* g_sh = out.sh.data() + idx * 3 * static_cast<std::size_t>(coeffs);
    const double* sh = cloud.sh_of(idx);
    Vec3 g_dir = Vec3::Zero();
    for (int ch = 0; ch < 3; ++ch) {
      if (s.clamped[static_cast<std::size_t>(ch)]) continue;
      const double gc = g.color[ch];
      for (int k = 0; k < used; ++k) {
        g_sh[ch * coeffs + k] += gc * basis[static_cast<std::size_t>(k)];
        g_dir += gc * sh[ch * coeffs + k] * basis_jac[static_cast<std::size_t>(k)];
      }
    }
    g_pos += (g_dir - g_dir.dot(s.view_dir) * s.view_dir) / s.view_dist;
    out.positions[idx] += g_pos;

    // Sigma = M M^T with M = R diag(s).
    const Quat qn = normalized_quat(cloud.rotations[idx]);
    const Mat3 rot = quat_to_matrix(qn);
    const Vec3& scale = cloud.scales[idx];
    const Mat3 m = rot * scale.asDiagonal();
    const Mat3 g_m = 2.0 * g_cov3 * m;
    Vec3 g_scale;
    for (int c = 0; c < 3; ++c) g_scale[c] = g_m.col(c).dot(rot.col(c));
    out.log_scales[idx] += g_scale.cwiseProduct(scale);
    const Mat3 g_r = g_m * scale.asDiagonal();
    const double w = qn[0], x = qn[1], y = qn[2], z = qn[3];
    Quat g_qn;
    g_qn[0] = 2.0 * (-z * g_r(0, 1) + y * g_r(0, 2) + z * g_r(1, 0) - x * g_r(1, 2) - y * g_r(2, 0) + x * g_r(2, 1));
    g_qn[1] = 2.0 * (y * g_r(0, 1) + z * g_r(0, 2) + y * g_r(1, 0) - 2.0 * x * g_r(1, 1) - w * g_r(1, 2) +
                     z * g_r(2, 0) + w * g_r(2, 1) - 2.0 * x * g_r(2, 2));
    g_qn[2] = 2.0 * (-2.0 * y * g_r(0, 0) + x * g_r(0, 1) + w * g_r(0, 2) + x * g_r(1, 0) + z * g_r(1, 2) -
                     w * g_r(2, 0) + z * g_r(2, 1) - 2.0 * y * g_r(2, 2));
    g_qn[3] = 2.0 * (-2.0 * z * g_r(0, 0) - w * g_r(0, 1) + x * g_r(0, 2) + w * g_r(1, 0) - 2.0 * z * g_r(1, 1) +
                     y * g_r(1, 2) + x * g_r(2, 0) + y * g_r(2, 1));
    const double qnorm = cloud.rotations[idx].norm();
    out.rotations[idx] += (g_qn - g_qn.dot(qn) * qn) / qnorm;

    const double o = s.opacity;
    out.opacity_logits[idx] += g.opacity * o * (1.0 - o);

    const Vec2 g_ndc(g.mean.x() * 0.5 * cam.width, g.mean.y() * 0.5 * cam.height);
    out.screen_grad_norm[idx] += g_ndc.norm();
    out.visible_count[idx] += 1;
  }
}

}  // namespace endosplat
