// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/losses.hpp>

#include <array>
#include <cmath>

namespace endosplat {

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> g{};
  double sum = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double x = i - kWindow / 2;
    g[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * kSigma * kSigma));
    sum += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v /= sum;
  return g;
}

/// Separable Gaussian filter with zero padding. Symmetric as a linear
/// operator, so it is also its own adjoint.
Image blur(const Image& in) {
  static const auto g = gaussian_window();
  const int w = in.width(), h = in.height(), c = in.channels();
  constexpr int r = kWindow / 2;
  Image tmp(w, h, c), out(w, h, c);
  const double* src = in.data().data();
  double* t = tmp.data().data();
  const std::size_t row = static_cast<std::size_t>(w) * c;
  for (int y = 0; y < h; ++y) {
    const double* sr = src + y * row;
    double* tr = t + y * row;
    for (int x = 0; x < w; ++x) {
      const int k0 = std::max(-r, -x), k1 = std::min(r, w - 1 - x);
      for (int ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (int k = k0; k <= k1; ++k) s += g[static_cast<std::size_t>(k + r)] * sr[(x + k) * c + ch];
        tr[x * c + ch] = s;
      }
    }
  }
  double* o = out.data().data();
  for (int y = 0; y < h; ++y) {
    const int k0 = std::max(-r, -y), k1 = std::min(r, h - 1 - y);
    double* orow = o + y * row;
    for (int k = k0; k <= k1; ++k) {
      const double gk = g[static_cast<std::size_t>(k + r)];
      const double* trow = t + (y + k) * row;
      for (std::size_t i = 0; i < row; ++i) orow[i] += gk * trow[i];
    }
  }
  return out;
}

Image product(const Image& a, const Image& b) {
  Image out(a.width(), a.height(), a.channels());
  for (std::size_t i = 0; i < a.data().size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (!a.same_shape(b)) throw ArgumentError(std::string(what) + ": image dimensions differ");
}

}  // namespace

void LossWeights::validate() const {
  if (depth < 0.0 || distortion < 0.0 || tv < 0.0) throw ConfigError("loss weights must be nonnegative");
  if (dssim < 0.0 || dssim > 1.0) throw ConfigError("dssim weight must lie in [0,1]");
}

double ssim_with_grad(const Image& a, const Image& b, Image* grad_a) {
  require_same_shape(a, b, "ssim");
  if (a.data().empty()) throw ArgumentError("ssim: empty images");
  const Image mu_a = blur(a), mu_b = blur(b);
  const Image saa = blur(product(a, a)), sbb = blur(product(b, b)), sab = blur(product(a, b));
  const std::size_t n = a.data().size();
  Image d_mu(a.width(), a.height(), a.channels()), d_saa = d_mu, d_sab = d_mu;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double ma = mu_a.data()[i], mb = mu_b.data()[i];
    const double var_a = saa.data()[i] - ma * ma, var_b = sbb.data()[i] - mb * mb;
    const double cov = sab.data()[i] - ma * mb;
    const double a1 = 2.0 * ma * mb + kC1, a2 = 2.0 * cov + kC2;
    const double b1 = ma * ma + mb * mb + kC1, b2 = var_a + var_b + kC2;
    const double denom = b1 * b2;
    const double s = a1 * a2 / denom;
    total += s;
    if (grad_a) {
      d_mu.data()[i] = (2.0 * mb * a2 - 2.0 * mb * a1) / denom + s * (-2.0 * ma / b1 + 2.0 * ma / b2);
      d_saa.data()[i] = -s / b2;
      d_sab.data()[i] = 2.0 * a1 / denom;
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  if (grad_a) {
    const Image bm = blur(d_mu), baa = blur(d_saa), bab = blur(d_sab);
    *grad_a = Image(a.width(), a.height(), a.channels());
    for (std::size_t i = 0; i < n; ++i) {
      grad_a->data()[i] = inv_n * (bm.data()[i] + 2.0 * a.data()[i] * baa.data()[i] + b.data()[i] * bab.data()[i]);
    }
  }
  return total * inv_n;
}

ImageLoss loss_gs(const Image& rendered, const Image& target, double lambda_dssim) {
  require_same_shape(rendered, target, "loss_gs");
  const std::size_t n = rendered.data().size();
  if (n == 0) throw ArgumentError("loss_gs: empty images");
  ImageLoss out;
  out.grad = Image(rendered.width(), rendered.height(), rendered.channels());
  const double inv_n = 1.0 / static_cast<double>(n);
  double l1 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = rendered.data()[i] - target.data()[i];
    l1 += std::abs(d);
    out.grad.data()[i] = (1.0 - lambda_dssim) * sign(d) * inv_n;
  }
  l1 *= inv_n;
  double ssim_term = 0.0;
  if (lambda_dssim > 0.0) {
    Image g;
    const double s = ssim_with_grad(rendered, target, &g);
    ssim_term = 0.5 * (1.0 - s);
    for (std::size_t i = 0; i < n; ++i) out.grad.data()[i] -= 0.5 * lambda_dssim * g.data()[i];
  }
  out.value = (1.0 - lambda_dssim) * l1 + lambda_dssim * ssim_term;
  return out;
}

DepthLoss loss_depth(const Image& rendered, const Image& target, std::span<const unsigned char> mask,
                     bool align_scale_shift) {
  require_same_shape(rendered, target, "loss_depth");
  if (rendered.channels() != 1) throw ArgumentError("loss_depth: depth images must have one channel");
  if (mask.size() != rendered.pixel_count()) throw ArgumentError("loss_depth: mask size does not match image");
  DepthLoss out;
  out.grad = Image(rendered.width(), rendered.height(), 1);
  const auto& r = rendered.data();
  const auto& t = target.data();
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  if (count == 0) {
    out.no_valid_pixels = true;
    return out;
  }
  const double inv_n = 1.0 / static_cast<double>(count);

  double scale = 1.0, shift = 0.0, mean_r = 0.0, mean_t = 0.0, srr = 0.0;
  if (align_scale_shift) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (!mask[i]) continue;
      mean_r += r[i];
      mean_t += t[i];
    }
    mean_r *= inv_n;
    mean_t *= inv_n;
    double srt = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (!mask[i]) continue;
      srr += (r[i] - mean_r) * (r[i] - mean_r);
      srt += (r[i] - mean_r) * (t[i] - mean_t);
    }
    if (srr > 0.0) scale = srt / srr;
    shift = mean_t - scale * mean_r;
  }

  double sum = 0.0, sum_sign = 0.0, sum_sign_r = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (!mask[i]) continue;
    const double e = scale * r[i] + shift - t[i];
    sum += std::abs(e);
    sum_sign += sign(e);
    sum_sign_r += sign(e) * r[i];
  }
  out.value = sum * inv_n;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (!mask[i]) continue;
    const double e = scale * r[i] + shift - t[i];
    double g = scale * sign(e);
    if (align_scale_shift && srr > 0.0) {
      // scale and shift are functions of the rendered depth.
      const double d_scale = ((t[i] - mean_t) - 2.0 * scale * (r[i] - mean_r)) / srr;
      const double d_shift = -mean_r * d_scale - scale * inv_n;
      g += sum_sign_r * d_scale + sum_sign * d_shift;
    }
    out.grad.data()[i] = g * inv_n;
  }
  return out;
}

ImageLoss loss_tv(const Image& depth) {
  if (depth.channels() != 1) throw ArgumentError("loss_tv: depth images must have one channel");
  const int w = depth.width(), h = depth.height();
  if (w == 0 || h == 0) throw ArgumentError("loss_tv: empty image");
  ImageLoss out;
  out.grad = Image(w, h, 1);
  const double inv_n = 1.0 / static_cast<double>(depth.pixel_count());
  double sum = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (x + 1 < w) {
        const double d = depth.at(x + 1, y) - depth.at(x, y);
        sum += std::abs(d);
        out.grad.at(x + 1, y) += sign(d) * inv_n;
        out.grad.at(x, y) -= sign(d) * inv_n;
      }
      if (y + 1 < h) {
        const double d = depth.at(x, y + 1) - depth.at(x, y);
        sum += std::abs(d);
        out.grad.at(x, y + 1) += sign(d) * inv_n;
        out.grad.at(x, y) -= sign(d) * inv_n;
      }
    }
  }
  out.value = sum * inv_n;
  return out;
}

ImageLoss loss_distortion(const Image& distortion) {
  if (distortion.channels() != 1 || distortion.pixel_count() == 0) {
    throw ArgumentError("loss_distortion: expected a non-empty single-channel image");
  }
  const double inv_n = 1.0 / static_cast<double>(distortion.pixel_count());
  ImageLoss out;
  double sum = 0.0;
  for (double v : distortion.data()) sum += v;
  out.value = sum * inv_n;
  out.grad = Image(distortion.width(), distortion.height(), 1, inv_n);
  return out;
}

namespace {

constexpr double kAlphaFloor = 1e-6;

/// Depth image used by the depth and TV terms.
Image effective_depth(const RenderOutput& r, bool normalize) {
  if (!normalize) return r.depth;
  Image d(r.depth.width(), r.depth.height(), 1);
  for (std::size_t i = 0; i < d.data().size(); ++i) {
    const double a = r.alpha.data()[i];
    d.data()[i] = a > kAlphaFloor ? r.depth.data()[i] / a : 0.0;
  }
  return d;
}

/// Pushes a gradient on the effective depth back to the raw depth and alpha.
void route_depth_grad(const RenderOutput& r, bool normalize, const Image& g, double weight, ObjectiveResult& out) {
  for (std::size_t i = 0; i < g.data().size(); ++i) {
    const double gi = weight * g.data()[i];
    if (!normalize) {
      out.grad_depth.data()[i] += gi;
      continue;
    }
    const double a = r.alpha.data()[i];
    if (a <= kAlphaFloor) continue;
    out.grad_depth.data()[i] += gi / a;
    out.grad_alpha.data()[i] -= gi * r.depth.data()[i] / (a * a);
  }
}

ObjectiveResult empty_result(const RenderOutput& r) {
  ObjectiveResult out;
  const int w = r.depth.width(), h = r.depth.height();
  out.grad_rgb = Image(w, h, 3);
  out.grad_depth = Image(w, h, 1);
  out.grad_distortion = Image(w, h, 1);
  out.grad_alpha = Image(w, h, 1);
  return out;
}

void add_geometry_terms(const RenderOutput& rendered, const Image& depth, const ObjectiveOptions& options,
                        ObjectiveResult& out) {
  const auto& w = options.weights;
  if (w.distortion > 0.0) {
    const ImageLoss dist = loss_distortion(rendered.distortion);
    out.terms.distortion = dist.value;
    for (std::size_t i = 0; i < dist.grad.data().size(); ++i) out.grad_distortion.data()[i] += w.distortion * dist.grad.data()[i];
  } else {
    out.terms.distortion = loss_distortion(rendered.distortion).value;
  }
  const ImageLoss tv = loss_tv(depth);
  out.terms.tv = tv.value;
  if (w.tv > 0.0) route_depth_grad(rendered, options.normalize_depth, tv.grad, w.tv, out);
}

}  // namespace

ObjectiveResult total_loss(const RenderOutput& rendered, const Image& target_rgb, const DepthMap* target_depth,
                           const ObjectiveOptions& options) {
  options.weights.validate();
  ObjectiveResult out = empty_result(rendered);
  const auto& w = options.weights;
  ImageLoss gs = loss_gs(rendered.rgb, target_rgb, w.dssim);
  out.terms.gs = gs.value;
  out.grad_rgb = std::move(gs.grad);

  const Image depth = effective_depth(rendered, options.normalize_depth);
  if (target_depth) {
    const auto mask = valid_depth_mask(*target_depth);
    const DepthLoss dl = loss_depth(depth, *target_depth, mask, options.align_depth);
    out.terms.depth = dl.value;
    out.depth_missing = dl.no_valid_pixels;
    if (w.depth > 0.0) route_depth_grad(rendered, options.normalize_depth, dl.grad, w.depth, out);
  } else {
    out.depth_missing = true;
  }
  add_geometry_terms(rendered, depth, options, out);
  out.terms.total = out.terms.gs + w.depth * out.terms.depth + w.distortion * out.terms.distortion + w.tv * out.terms.tv;
  return out;
}

ObjectiveResult virtual_loss(const RenderOutput& rendered, const ObjectiveOptions& options) {
  options.weights.validate();
  ObjectiveResult out = empty_result(rendered);
  add_geometry_terms(rendered, effective_depth(rendered, options.normalize_depth), options, out);
  out.terms.total = options.weights.distortion * out.terms.distortion + options.weights.tv * out.terms.tv;
  return out;
}

}  // namespace endosplat
