#include "danlab/distillation.hpp"

#include <iomanip>
#include <sstream>

#include "danlab/metrics.hpp"
#include "danlab/parallel.hpp"

namespace danlab {

namespace {

// Source voxel (row-major spatial index) of every output voxel.
std::vector<Index> gather_map(const GeometricTransform& t, const Shape& spatial) {
  const std::size_t rank = spatial.size();
  const Index total = numel(spatial);
  std::vector<Index> map(static_cast<std::size_t>(total));
  std::vector<Index> c(rank);
  for (Index o = 0; o < total; ++o) {
    Index rest = o;
    for (std::size_t a = rank; a-- > 0;) {
      c[a] = rest % spatial[a];
      rest /= spatial[a];
    }
    // Undo the rotations: out[i][j] = in[j][n-1-i] per quarter turn.
    for (int k = 0; k < t.quarter_turns; ++k) {
      const Index i = c[rank - 2];
      const Index j = c[rank - 1];
      c[rank - 2] = j;
      c[rank - 1] = spatial[rank - 2] - 1 - i;
    }
    if (t.flip_axis >= 0) {
      const auto a = static_cast<std::size_t>(t.flip_axis);
      c[a] = spatial[a] - 1 - c[a];
    }
    Index src = 0;
    for (std::size_t a = 0; a < rank; ++a) src = src * spatial[a] + c[a];
    map[static_cast<std::size_t>(o)] = src;
  }
  return map;
}

void check_shape(const GeometricTransform& t, const Shape& spatial) {
  t.validate(static_cast<Index>(spatial.size()));
  if (t.quarter_turns % 2 == 1 && spatial[spatial.size() - 2] != spatial[spatial.size() - 1]) {
    throw ShapeError("quarter-turn rotations need square in-plane dimensions, got " + to_string(spatial));
  }
}

Tensor<float> with_batch_axis(const Tensor<float>& image) {
  Shape shape{1};
  shape.insert(shape.end(), image.shape().begin(), image.shape().end());
  return Tensor<float>(shape, image.data());
}

}  // namespace

void GeometricTransform::validate(Index spatial_rank) const {
  if (spatial_rank < 2) throw ShapeError("geometric transforms need at least two spatial axes");
  if (quarter_turns < 0 || quarter_turns > 3) throw ConfigError("quarter_turns must lie in 0..3");
  if (flip_axis < -1 || flip_axis >= spatial_rank) throw ConfigError("flip axis outside the volume");
}

GeometricTransform GeometricTransform::inverse() const {
  // A mirror followed by a rotation is itself a mirror, hence an involution.
  if (flip_axis >= 0) return *this;
  return GeometricTransform{(4 - quarter_turns) % 4, -1};
}

std::string GeometricTransform::name() const {
  std::string s = "rot" + std::to_string(quarter_turns * 90);
  if (flip_axis >= 0) s += "-flip" + std::to_string(flip_axis);
  return s;
}

template <typename Scalar>
Tensor<Scalar> GeometricTransform::apply(const Tensor<Scalar>& x, Index spatial_rank) const {
  if (x.rank() < spatial_rank) throw ShapeError("tensor has fewer axes than the spatial rank");
  const Shape spatial(x.shape().end() - spatial_rank, x.shape().end());
  check_shape(*this, spatial);
  const auto map = gather_map(*this, spatial);
  const Index n = numel(spatial);
  const Index slices = x.size() / n;
  Tensor<Scalar> out(x.shape());
  for (Index s = 0; s < slices; ++s) {
    for (Index o = 0; o < n; ++o) out.data()[s * n + o] = x.data()[s * n + map[static_cast<std::size_t>(o)]];
  }
  return out;
}

LabelVolume GeometricTransform::apply(const LabelVolume& labels) const {
  check_shape(*this, labels.shape());
  const auto map = gather_map(*this, labels.shape());
  LabelVolume out(labels.shape(), labels.classes());
  for (Index o = 0; o < labels.size(); ++o) out[o] = labels[map[static_cast<std::size_t>(o)]];
  return out;
}

template Tensor<float> GeometricTransform::apply(const Tensor<float>&, Index) const;
template Tensor<double> GeometricTransform::apply(const Tensor<double>&, Index) const;

std::vector<GeometricTransform> default_transforms(Index spatial_rank) {
  if (spatial_rank < 2) throw ShapeError("geometric transforms need at least two spatial axes");
  const int a = static_cast<int>(spatial_rank) - 2;
  std::vector<GeometricTransform> out;
  for (int k = 0; k < 4; ++k) {
    for (int flip : {-1, a, a + 1}) out.push_back({k, flip});
  }
  return out;
}

std::vector<GeometricTransform> identity_transform() { return {GeometricTransform{}}; }

LabelVolume Teacher::predict(const Tensor<float>& x) {
  auto labels = argmax_labels(probabilities(x));
  if (labels.size() != 1) throw ShapeError("teachers predict one volume at a time");
  return LabelVolume(labels.front().shape(), classes(), std::move(labels.front().data()));
}

Tensor<float> DanTeacher::probabilities(const Tensor<float>& x) {
  NoGradScope<float> no_grad;
  auto out = dan_.forward(x, BatchNormMode::kEval);
  if (!stream_) return out.fused;
  return softmax(*stream_ == 0 ? out.p : out.q, 1);
}

LabelVolume vote(std::span<const LabelVolume> maps) {
  if (maps.empty()) throw std::invalid_argument("vote over an empty list");
  const auto& first = maps.front();
  for (const auto& m : maps) {
    if (m.shape() != first.shape() || m.classes() != first.classes()) {
      throw ShapeError("voted label maps must share shape and class count");
    }
  }
  LabelVolume out(first.shape(), first.classes());
  std::vector<int> counts(static_cast<std::size_t>(first.classes()));
  for (Index v = 0; v < first.size(); ++v) {
    std::fill(counts.begin(), counts.end(), 0);
    for (const auto& m : maps) ++counts[m[v]];
    std::size_t best = 0;
    for (std::size_t c = 1; c < counts.size(); ++c) {
      if (counts[c] > counts[best]) best = c;
    }
    out[v] = static_cast<std::uint8_t>(best);
  }
  return out;
}

LabelVolume data_distill(Teacher& teacher, const Tensor<float>& image,
                         std::span<const GeometricTransform> transforms, DistillOptions options) {
  if (transforms.empty()) throw std::invalid_argument("data distillation needs at least one transform");
  const Tensor<float> x = with_batch_axis(image);
  const Index rank = image.rank() - 1;
  if (options.soft) {
    Tensor<float> total;
    for (const auto& t : transforms) {
      const Tensor<float> back = t.inverse().apply(teacher.probabilities(t.apply(x, rank)), rank);
      if (!total.defined()) {
        total = back.clone();
      } else {
        total.data() += back.data();
      }
    }
    auto labels = argmax_labels(total);
    return LabelVolume(labels.front().shape(), teacher.classes(), std::move(labels.front().data()));
  }
  std::vector<LabelVolume> maps;
  for (const auto& t : transforms) maps.push_back(t.inverse().apply(teacher.predict(t.apply(x, rank))));
  return vote(maps);
}

LabelVolume model_distill(std::span<Teacher* const> teachers, const Tensor<float>& image) {
  if (teachers.empty()) throw std::invalid_argument("model distillation needs at least one teacher");
  const Tensor<float> x = with_batch_axis(image);
  std::vector<LabelVolume> maps;
  for (Teacher* t : teachers) maps.push_back(t->predict(x));
  return vote(maps);
}

LabelVolume hierarchical_distill(std::span<Teacher* const> teachers, const Tensor<float>& image,
                                 std::span<const GeometricTransform> transforms, DistillOptions options) {
  if (teachers.empty()) throw std::invalid_argument("hierarchical distillation needs at least one teacher");
  std::vector<LabelVolume> maps;
  for (Teacher* t : teachers) maps.push_back(data_distill(*t, image, transforms, options));
  return vote(maps);
}

DistillMode parse_distill_mode(const std::string& name) {
  if (name == "data") return DistillMode::kData;
  if (name == "model") return DistillMode::kModel;
  if (name == "hierarchical") return DistillMode::kHierarchical;
  throw ConfigError("unknown distillation mode '" + name + "' (expected data, model or hierarchical)");
}

std::string to_string(DistillMode mode) {
  switch (mode) {
    case DistillMode::kData: return "data";
    case DistillMode::kModel: return "model";
    case DistillMode::kHierarchical: return "hierarchical";
  }
  return "?";
}

std::vector<LabelVolume> distill_all(std::span<Teacher* const> teachers, std::span<const Tensor<float>> images,
                                     DistillMode mode, std::span<const GeometricTransform> transforms,
                                     DistillOptions options) {
  if (teachers.empty()) throw std::invalid_argument("distillation needs at least one teacher");
  std::vector<LabelVolume> out(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    switch (mode) {
      case DistillMode::kData: out[i] = data_distill(*teachers.front(), images[i], transforms, options); break;
      case DistillMode::kModel: out[i] = model_distill(teachers, images[i]); break;
      case DistillMode::kHierarchical: out[i] = hierarchical_distill(teachers, images[i], transforms, options); break;
    }
  });
  return out;
}

double PseudoLabelQuality::mean_foreground_dice() const {
  if (dice.size() < 2) return 0;
  double total = 0;
  for (std::size_t c = 1; c < dice.size(); ++c) total += dice[c];
  return total / static_cast<double>(dice.size() - 1);
}

PseudoLabelQuality pseudo_label_quality(const LabelVolume& pseudo, const LabelVolume& truth) {
  if (pseudo.shape() != truth.shape()) {
    throw ShapeError("pseudo-label shape " + to_string(pseudo.shape()) + " differs from truth " +
                     to_string(truth.shape()));
  }
  PseudoLabelQuality q;
  const int classes = std::max(pseudo.classes(), truth.classes());
  const LabelVolume p(pseudo.shape(), classes, pseudo.data());
  const LabelVolume t(truth.shape(), classes, truth.data());
  for (int c = 0; c < classes; ++c) q.dice.push_back(dice(p, t, c));
  Index differ = 0;
  for (Index v = 0; v < p.size(); ++v) differ += p[v] != t[v];
  q.flip_rate = static_cast<double>(differ) / static_cast<double>(p.size());
  return q;
}

std::string format_manifest(const std::vector<ManifestRow>& rows) {
  std::ostringstream os;
  os << "id,input,pseudo,mean_dice,flip_rate\n" << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.id << ',' << r.input << ',' << r.pseudo << ',';
    if (r.quality) os << r.quality->mean_foreground_dice() << ',' << r.quality->flip_rate;
    else os << ',';
    os << '\n';
  }
  return os.str();
}

}  // namespace danlab
