#include "danlab/label_volume.hpp"

#include <string>

namespace danlab {

LabelVolume::LabelVolume(Shape shape, int classes, std::uint8_t fill)
    : shape_(std::move(shape)), classes_(classes) {
  if (classes < 2 || classes > 255) throw DomainError("label volumes need 2..255 classes");
  data_.assign(static_cast<std::size_t>(numel(shape_)), fill);
  validate();
}

LabelVolume::LabelVolume(Shape shape, int classes, std::vector<std::uint8_t> data)
    : shape_(std::move(shape)), classes_(classes), data_(std::move(data)) {
  if (classes < 2 || classes > 255) throw DomainError("label volumes need 2..255 classes");
  if (static_cast<Index>(data_.size()) != numel(shape_)) {
    throw ShapeError("label data length does not match shape " + to_string(shape_));
  }
  validate();
}

void LabelVolume::validate() const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (data_[i] >= classes_) {
      throw DomainError("label " + std::to_string(data_[i]) + " at voxel " + std::to_string(i) +
                        " outside [0, " + std::to_string(classes_) + ")");
    }
  }
}

template <typename Scalar>
std::vector<LabelVolume> argmax_labels(const Tensor<Scalar>& scores) {
  if (scores.rank() < 3) throw ShapeError("argmax_labels expects [B,C,spatial...]");
  const Index batch = scores.dim(0);
  const Index classes = scores.dim(1);
  const Shape spatial(scores.shape().begin() + 2, scores.shape().end());
  const Index voxels = numel(spatial);
  std::vector<LabelVolume> out;
  out.reserve(static_cast<std::size_t>(batch));
  const auto& s = scores.data();
  for (Index b = 0; b < batch; ++b) {
    LabelVolume labels(spatial, static_cast<int>(classes));
    const Index base = b * classes * voxels;
    for (Index v = 0; v < voxels; ++v) {
      Index best = 0;
      Scalar best_value = s[base + v];
      for (Index c = 1; c < classes; ++c) {
        const Scalar value = s[base + c * voxels + v];
        if (value > best_value) {
          best_value = value;
          best = c;
        }
      }
      labels[v] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(labels));
  }
  return out;
}

template std::vector<LabelVolume> argmax_labels(const Tensor<float>&);
template std::vector<LabelVolume> argmax_labels(const Tensor<double>&);

}  // namespace danlab
