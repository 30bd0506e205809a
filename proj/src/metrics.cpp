// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#include <endosplat/errors.hpp>
#include <endosplat/losses.hpp>
#include <endosplat/metrics.hpp>

#include <cmath>

namespace endosplat {

double psnr(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw ArgumentError("psnr: image dimensions differ");
  if (a.empty()) throw ArgumentError("psnr: empty images");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.data().size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(mse));
}

double ssim(const Image& a, const Image& b) { return ssim_with_grad(a, b, nullptr); }

double depth_rmse(const Image& a, const Image& b, std::span<const unsigned char> mask) {
  if (!a.same_shape(b)) throw ArgumentError("depth_rmse: image dimensions differ");
  if (mask.size() != a.pixel_count()) throw ArgumentError("depth_rmse: mask size does not match image");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    const double d = a.data()[i] - b.data()[i];
    sum += d * d;
    ++n;
  }
  return n ? std::sqrt(sum / static_cast<double>(n)) : 0.0;
}

Image comparable_depth(const RenderOutput& rendered, bool normalize) {
  if (!normalize) return rendered.depth;
  Image d = rendered.depth;
  for (std::size_t i = 0; i < d.data().size(); ++i) {
    const double a = rendered.alpha.data()[i];
    d.data()[i] = a > 1e-6 ? d.data()[i] / a : 0.0;
  }
  return d;
}

EvalResult evaluate(const GaussianCloud& cloud, const SceneBundle& bundle, std::span<const int> views,
                    const EvalOptions& options) {
  EvalResult out;
  int depth_views = 0;
  for (int v : views) {
    if (v < 0 || v >= static_cast<int>(bundle.records.size())) throw ArgumentError("evaluate: view index out of range");
    const auto& rec = bundle.records[static_cast<std::size_t>(v)];
    const RenderOutput r = render(cloud, rec.camera, options.render);
    ViewMetrics m;
    m.view = v;
    m.psnr = psnr(r.rgb, rec.rgb);
    m.ssim = ssim(r.rgb, rec.rgb);
    if (rec.depth) {
      m.depth_rmse = depth_rmse(comparable_depth(r, options.normalize_depth), *rec.depth, valid_depth_mask(*rec.depth));
      out.depth_rmse += m.depth_rmse;
      ++depth_views;
    }
    out.psnr += m.psnr;
    out.ssim += m.ssim;
    out.views.push_back(m);
  }
  if (!out.views.empty()) {
    out.psnr /= static_cast<double>(out.views.size());
    out.ssim /= static_cast<double>(out.views.size());
  }
  if (depth_views) out.depth_rmse /= depth_views;
  return out;
}

}  // namespace endosplat
