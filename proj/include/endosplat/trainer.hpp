// Copyright Contributors to the endosplat project
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <endosplat/losses.hpp>
#include <endosplat/rasterizer.hpp>
#include <endosplat/scene.hpp>

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace endosplat {

struct LearningRates {
  /// Position rate, multiplied by the scene extent, decayed log-linearly to
  /// position_final over the run.
  double position = 1.6e-4;
  double position_final = 1.6e-6;
  double sh_dc = 2.5e-3;
  /// Higher-order SH coefficients use sh_dc / sh_rest_divisor.
  double sh_rest_divisor = 20.0;
  double opacity = 5e-2;
  double scale = 5e-3;
  double rotation = 1e-3;
};

struct DensifyConfig {
  bool enabled = true;
  int interval = 100;
  int start = 100;
  int stop = 2000;
  /// Mean screen-space (NDC) positional gradient above which a Gaussian grows.
  double grad_threshold = 2e-4;
  double prune_opacity = 5e-3;
  /// Gaussians with max scale <= percent_dense * extent are cloned, larger ones split.
  double percent_dense = 0.01;
  /// Largest fraction of the cloud removed in one prune event.
  double max_prune_fraction = 0.5;
  /// Clone/split stops adding Gaussians past this count; 0 means no limit.
  std::size_t max_gaussians = 0;
};

struct TrainConfig {
  int iterations = 3000;
  LearningRates lr;
  DensifyConfig densify;
  ObjectiveOptions objective;
  /// SH degree stored in the cloud and the degree allowed to affect rendering.
  int sh_degree = 0;
  int sh_degree_cap = 0;
  std::uint64_t seed = 0;
  int virtual_per_iter = 1;
  RenderSettings render;
  /// Record every n-th iteration in the report (the final one is always kept).
  int log_every = 1;
  /// Written when training diverges; empty disables the snapshot.
  std::string snapshot_path;

  void validate() const;
  /// JSON object with the field names above; unknown keys are rejected.
  static TrainConfig from_json(const std::string& text);
  std::string to_json() const;
};

struct IterationRecord {
  int iteration = 0;
  int view = -1;
  LossTerms real;
  /// Sum over the virtual views of this iteration.
  LossTerms virtual_terms;
  std::size_t gaussians = 0;
};

struct DensifyStats {
  std::size_t cloned = 0;
  std::size_t split = 0;
  std::size_t pruned = 0;
};

struct TrainReport {
  std::vector<IterationRecord> iterations;
  /// (iteration, count) after every densify event, plus the initial count.
  std::vector<std::pair<int, std::size_t>> gaussian_counts;
  std::vector<DensifyStats> densify_events;
  double wall_seconds = 0.0;
  /// Filled by callers that evaluate held-out views.
  std::vector<std::pair<std::string, double>> final_metrics;

  /// One JSON object per line: iteration records, then a summary line.
  std::string to_json_lines() const;
};

/// One Gaussian per initialization point (isotropic scale = mean distance to
/// the 3 nearest points, opacity 0.1, DC color from the point). Without
/// points, back-projects a stride-8 grid of valid depth pixels of `views`
/// (all records when empty). Throws InitializationError when neither exists.
GaussianCloud initialize(const SceneBundle& bundle, std::span<const int> views = {}, int sh_degree = 0);

/// Radius of the bounding sphere (about the centroid) of the positions.
double scene_extent(std::span<const Vec3> positions);

/// Adaptive density control. `mean_grad` holds the per-Gaussian mean
/// screen-space gradient norm. Clones small and splits large Gaussians above
/// the threshold, then prunes low opacity. `source`, when given, receives for
/// each output Gaussian the input row it continues, or -1 for new Gaussians.
DensifyStats densify_and_prune(GaussianCloud& cloud, std::span<const double> mean_grad, const DensifyConfig& config,
                               double extent, std::mt19937_64& rng, std::vector<long>* source = nullptr);

struct TrainResult {
  GaussianCloud cloud;
  TrainReport report;
};

/// Called after every iteration with (iteration, record); return false to stop early.
using TrainCallback = std::function<bool(int, const IterationRecord&)>;

/// Optimizes a cloud on the listed views (all records when empty), starting
/// from `initial` or from initialize() when it is empty.
TrainResult train(const SceneBundle& bundle, const TrainConfig& config, std::span<const int> train_views = {},
                  const GaussianCloud* initial = nullptr, const TrainCallback& callback = {});

}  // namespace endosplat
