#include "danlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "danlab/error.hpp"

namespace danlab {

namespace {

constexpr std::int64_t kFar = std::numeric_limits<std::int64_t>::max() / 4;

void check_class(const LabelVolume& labels, int c) {
  if (c < 0 || c >= labels.classes()) {
    throw DomainError("class " + std::to_string(c) + " outside [0, " + std::to_string(labels.classes()) + ")");
  }
}

void check_pair(const LabelVolume& a, const LabelVolume& b, int c) {
  if (a.shape() != b.shape()) {
    throw ShapeError("label shapes differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  check_class(a, c);
  check_class(b, c);
}

std::vector<Index> strides_of(const Shape& shape) {
  std::vector<Index> s(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
  return s;
}

std::vector<bool> boundary_mask(const LabelVolume& labels, int c) {
  const Shape& shape = labels.shape();
  const auto strides = strides_of(shape);
  std::vector<bool> mask(static_cast<std::size_t>(labels.size()), false);
  for (Index v = 0; v < labels.size(); ++v) {
    if (labels[v] != c) continue;
    bool edge = false;
    Index rest = v;
    for (std::size_t a = 0; a < shape.size() && !edge; ++a) {
      const Index i = (rest / strides[a]) % shape[a];
      if (i == 0 || i == shape[a] - 1) edge = true;
      else if (labels[v - strides[a]] != c || labels[v + strides[a]] != c) edge = true;
    }
    mask[static_cast<std::size_t>(v)] = edge;
  }
  return mask;
}

// Squared distance to the nearest set voxel, one axis at a time.
std::vector<std::int64_t> squared_distance(const std::vector<bool>& seeds, const Shape& shape) {
  std::vector<std::int64_t> d(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) d[i] = seeds[i] ? 0 : kFar;
  const auto strides = strides_of(shape);
  const Index total = static_cast<Index>(seeds.size());
  std::vector<std::int64_t> line;
  for (std::size_t a = 0; a < shape.size(); ++a) {
    const Index n = shape[a];
    const Index stride = strides[a];
    line.resize(static_cast<std::size_t>(n));
    for (Index start = 0; start < total; ++start) {
      if ((start / stride) % n != 0) continue;
      for (Index i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = d[static_cast<std::size_t>(start + i * stride)];
      for (Index i = 0; i < n; ++i) {
        std::int64_t best = kFar;
        for (Index j = 0; j < n; ++j) {
          const std::int64_t f = line[static_cast<std::size_t>(j)];
          if (f >= kFar) continue;
          best = std::min(best, f + (i - j) * (i - j));
        }
        d[static_cast<std::size_t>(start + i * stride)] = best;
      }
    }
  }
  return d;
}

// Nearest distances from the boundary of `from` to the boundary of `to`, row-major.
std::optional<std::vector<double>> nearest(const LabelVolume& from, const LabelVolume& to, int c) {
  const auto source = boundary_mask(from, c);
  const auto target = boundary_mask(to, c);
  if (std::find(source.begin(), source.end(), true) == source.end()) return std::nullopt;
  if (std::find(target.begin(), target.end(), true) == target.end()) return std::nullopt;
  const auto d2 = squared_distance(target, to.shape());
  std::vector<double> out;
  for (std::size_t v = 0; v < source.size(); ++v) {
    if (source[v]) out.push_back(std::sqrt(static_cast<double>(d2[v])));
  }
  return out;
}

double mean_of(const std::vector<double>& v) {
  double sum = 0;
  for (double x : v) sum += x;
  return sum / static_cast<double>(v.size());
}

}  // namespace

double dice(const LabelVolume& pred, const LabelVolume& truth, int c) {
  check_pair(pred, truth, c);
  Index p = 0, t = 0, both = 0;
  for (Index v = 0; v < pred.size(); ++v) {
    const bool a = pred[v] == c;
    const bool b = truth[v] == c;
    p += a;
    t += b;
    both += a && b;
  }
  if (p + t == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + t);
}

std::vector<Coord> boundary_voxels(const LabelVolume& labels, int c) {
  check_class(labels, c);
  const auto mask = boundary_mask(labels, c);
  const Shape& shape = labels.shape();
  std::vector<Coord> out;
  for (Index v = 0; v < labels.size(); ++v) {
    if (!mask[static_cast<std::size_t>(v)]) continue;
    Coord coord(shape.size());
    Index rest = v;
    for (std::size_t a = shape.size(); a-- > 0;) {
      coord[a] = rest % shape[a];
      rest /= shape[a];
    }
    out.push_back(std::move(coord));
  }
  return out;
}

std::vector<double> boundary_distance_map(const LabelVolume& labels, int c) {
  check_class(labels, c);
  const auto mask = boundary_mask(labels, c);
  if (std::find(mask.begin(), mask.end(), true) == mask.end()) return {};
  const auto d2 = squared_distance(mask, labels.shape());
  std::vector<double> out(d2.size());
  for (std::size_t i = 0; i < d2.size(); ++i) out[i] = std::sqrt(static_cast<double>(d2[i]));
  return out;
}

std::optional<double> avg_boundary_distance(const LabelVolume& pred, const LabelVolume& truth, int c) {
  check_pair(pred, truth, c);
  const auto forward = nearest(pred, truth, c);
  const auto backward = nearest(truth, pred, c);
  if (!forward || !backward) return std::nullopt;
  return (mean_of(*forward) + mean_of(*backward)) / 2;
}

std::optional<double> directed_hausdorff(const LabelVolume& from, const LabelVolume& to, int c) {
  check_pair(from, to, c);
  const auto d = nearest(from, to, c);
  if (!d) return std::nullopt;
  return *std::max_element(d->begin(), d->end());
}

std::optional<double> hausdorff(const LabelVolume& pred, const LabelVolume& truth, int c) {
  const auto a = directed_hausdorff(pred, truth, c);
  const auto b = directed_hausdorff(truth, pred, c);
  if (!a || !b) return std::nullopt;
  return std::max(*a, *b);
}

std::vector<ClassMetrics> evaluate(const LabelVolume& pred, const LabelVolume& truth) {
  if (pred.classes() != truth.classes()) throw DomainError("class counts differ");
  std::vector<ClassMetrics> out;
  for (int c = 1; c < truth.classes(); ++c) {
    out.push_back({c, dice(pred, truth, c), avg_boundary_distance(pred, truth, c), hausdorff(pred, truth, c)});
  }
  return out;
}

double volume_diagonal(const Shape& shape) {
  double sum = 0;
  for (Index d : shape) sum += static_cast<double>(d) * static_cast<double>(d);
  return std::sqrt(sum);
}

std::optional<double> composite_score(const std::vector<ClassMetrics>& classes, double diagonal,
                                      ScoreWeights weights) {
  if (classes.empty()) return std::nullopt;
  if (!(diagonal > 0)) throw DomainError("volume diagonal must be positive");
  double total = 0;
  for (const auto& m : classes) {
    if (!m.adb || !m.hdd) return std::nullopt;
    total += m.dice - weights.adb * *m.adb / diagonal - weights.hdd * *m.hdd / diagonal;
  }
  return total / static_cast<double>(classes.size());
}

double mean_dice(const std::vector<ClassMetrics>& classes) {
  if (classes.empty()) return 0;
  double total = 0;
  for (const auto& m : classes) total += m.dice;
  return total / static_cast<double>(classes.size());
}

std::optional<double> mean_adb(const std::vector<ClassMetrics>& classes) {
  if (classes.empty()) return std::nullopt;
  double total = 0;
  for (const auto& m : classes) {
    if (!m.adb) return std::nullopt;
    total += *m.adb;
  }
  return total / static_cast<double>(classes.size());
}

std::optional<double> mean_hdd(const std::vector<ClassMetrics>& classes) {
  if (classes.empty()) return std::nullopt;
  double total = 0;
  for (const auto& m : classes) {
    if (!m.hdd) return std::nullopt;
    total += *m.hdd;
  }
  return total / static_cast<double>(classes.size());
}

}  // namespace danlab
