#pragma once

// Pseudo-labels from ensembles over input transforms (data distillation),
// over teachers (model distillation), or both in two voting stages.

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "danlab/dan.hpp"
#include "danlab/label_volume.hpp"

namespace danlab {

/// k quarter turns in the plane of the last two spatial axes, applied after
/// an optional mirror of one spatial axis. Every element is a permutation of
/// voxels, so apply/inverse round trips are exact.
struct GeometricTransform {
  int quarter_turns = 0;  // 0..3
  int flip_axis = -1;     // spatial axis to mirror, -1 for none

  void validate(Index spatial_rank) const;
  GeometricTransform inverse() const;
  std::string name() const;

  /// Transforms the spatial axes of a [lead..., spatial...] tensor.
  template <typename Scalar>
  Tensor<Scalar> apply(const Tensor<Scalar>& x, Index spatial_rank) const;
  LabelVolume apply(const LabelVolume& labels) const;

  bool operator==(const GeometricTransform&) const = default;
};

/// The 12 transforms {0, 90, 180, 270 degrees} x {no flip, flip of either
/// in-plane axis}, identity first.
std::vector<GeometricTransform> default_transforms(Index spatial_rank);
std::vector<GeometricTransform> identity_transform();

/// Anything that maps a [1, channels, spatial...] input to [1, classes, spatial...] probabilities.
class Teacher {
 public:
  virtual ~Teacher() = default;
  virtual Tensor<float> probabilities(const Tensor<float>& x) = 0;
  virtual int classes() const = 0;
  virtual std::string id() const = 0;

  /// Channel argmax of probabilities().
  LabelVolume predict(const Tensor<float>& x);
};

/// Fused-probability output of a trained DAN, or the softmax of one stream
/// when `stream` is set.
class DanTeacher : public Teacher {
 public:
  DanTeacher(TwoStreamDAN<float> dan, std::string id, std::optional<int> stream = std::nullopt)
      : dan_(std::move(dan)), id_(std::move(id)), stream_(stream) {}
  Tensor<float> probabilities(const Tensor<float>& x) override;
  int classes() const override { return static_cast<int>(dan_.arch().classes); }
  std::string id() const override { return id_; }
  TwoStreamDAN<float>& model() { return dan_; }

 private:
  TwoStreamDAN<float> dan_;
  std::string id_;
  std::optional<int> stream_;
};

/// Wraps a callable, mainly for hand-built predictors.
class FunctionTeacher : public Teacher {
 public:
  using Fn = std::function<Tensor<float>(const Tensor<float>&)>;
  FunctionTeacher(Fn fn, int classes, std::string id) : fn_(std::move(fn)), classes_(classes), id_(std::move(id)) {}
  Tensor<float> probabilities(const Tensor<float>& x) override { return fn_(x); }
  int classes() const override { return classes_; }
  std::string id() const override { return id_; }

 private:
  Fn fn_;
  int classes_;
  std::string id_;
};

/// Per-voxel majority; ties go to the smallest class index.
LabelVolume vote(std::span<const LabelVolume> maps);

struct DistillOptions {
  /// Average inverse-transformed probabilities before hardening instead of
  /// voting hard labels in the inner stage.
  bool soft = false;
};

/// `image` is a single [channels, spatial...] volume.
LabelVolume data_distill(Teacher& teacher, const Tensor<float>& image,
                         std::span<const GeometricTransform> transforms, DistillOptions options = {});
LabelVolume model_distill(std::span<Teacher* const> teachers, const Tensor<float>& image);
LabelVolume hierarchical_distill(std::span<Teacher* const> teachers, const Tensor<float>& image,
                                 std::span<const GeometricTransform> transforms, DistillOptions options = {});

enum class DistillMode { kData, kModel, kHierarchical };

DistillMode parse_distill_mode(const std::string& name);
std::string to_string(DistillMode mode);

/// Distils every image; data mode uses the first teacher only. Runs on
/// worker_threads() threads; the result does not depend on the thread count.
std::vector<LabelVolume> distill_all(std::span<Teacher* const> teachers, std::span<const Tensor<float>> images,
                                     DistillMode mode, std::span<const GeometricTransform> transforms,
                                     DistillOptions options = {});

struct PseudoLabelQuality {
  std::vector<double> dice;  // one entry per class, background included
  double flip_rate = 0;      // fraction of voxels that differ from the truth

  double mean_foreground_dice() const;
};

PseudoLabelQuality pseudo_label_quality(const LabelVolume& pseudo, const LabelVolume& truth);

struct ManifestRow {
  std::string id;
  std::string input;
  std::string pseudo;
  std::optional<PseudoLabelQuality> quality;
};

/// CSV with header id,input,pseudo,mean_dice,flip_rate; quality cells are
/// empty when no truth was available.
std::string format_manifest(const std::vector<ManifestRow>& rows);

}  // namespace danlab
