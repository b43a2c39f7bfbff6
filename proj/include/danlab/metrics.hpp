#pragma once

#include <optional>
#include <vector>

#include "danlab/label_volume.hpp"

namespace danlab {

using Coord = std::vector<Index>;

/// 2|P∩T| / (|P|+|T|) for class c; 1 when both sets are empty.
double dice(const LabelVolume& pred, const LabelVolume& truth, int c);

/// Voxels of class c with a face neighbour of another class, or on the
/// volume border. Row-major order.
std::vector<Coord> boundary_voxels(const LabelVolume& labels, int c);

/// Nearest Euclidean distance from every voxel to the boundary of class c,
/// row-major; empty if that boundary is empty. Exact: integer squared
/// distances from a separable transform, then one sqrt.
std::vector<double> boundary_distance_map(const LabelVolume& labels, int c);

/// Symmetric average boundary distance. nullopt when either boundary is empty.
std::optional<double> avg_boundary_distance(const LabelVolume& pred, const LabelVolume& truth, int c);

/// max over the source boundary of the nearest distance to the target boundary.
std::optional<double> directed_hausdorff(const LabelVolume& from, const LabelVolume& to, int c);

std::optional<double> hausdorff(const LabelVolume& pred, const LabelVolume& truth, int c);

struct ClassMetrics {
  int label = 0;
  double dice = 0;
  std::optional<double> adb;
  std::optional<double> hdd;
};

/// Metrics for every foreground class 1..C-1.
std::vector<ClassMetrics> evaluate(const LabelVolume& pred, const LabelVolume& truth);

double volume_diagonal(const Shape& shape);

struct ScoreWeights {
  double adb = 0.5;
  double hdd = 0.5;
};

/// Mean over classes of dice - w.adb * adb / diag - w.hdd * hdd / diag.
/// nullopt if any distance is undefined or the list is empty.
std::optional<double> composite_score(const std::vector<ClassMetrics>& classes, double diagonal,
                                      ScoreWeights weights = {});

/// Means over classes; a missing distance makes the mean missing.
double mean_dice(const std::vector<ClassMetrics>& classes);
std::optional<double> mean_adb(const std::vector<ClassMetrics>& classes);
std::optional<double> mean_hdd(const std::vector<ClassMetrics>& classes);

}  // namespace danlab
