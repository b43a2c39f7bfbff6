#pragma once

#include <cstdint>
#include <vector>

#include "danlab/tensor.hpp"

namespace danlab {

/// Integer class-label array over spatial dimensions, row-major. Every value
/// lies in [0, classes).
class LabelVolume {
 public:
  LabelVolume() = default;
  LabelVolume(Shape shape, int classes, std::uint8_t fill = 0);
  LabelVolume(Shape shape, int classes, std::vector<std::uint8_t> data);

  const Shape& shape() const { return shape_; }
  int classes() const { return classes_; }
  Index size() const { return static_cast<Index>(data_.size()); }

  std::uint8_t operator[](Index i) const { return data_[static_cast<std::size_t>(i)]; }
  std::uint8_t& operator[](Index i) { return data_[static_cast<std::size_t>(i)]; }
  const std::vector<std::uint8_t>& data() const { return data_; }
  std::vector<std::uint8_t>& data() { return data_; }

  /// Throws DomainError if any value is outside [0, classes).
  void validate() const;

  bool operator==(const LabelVolume& other) const = default;

 private:
  Shape shape_;
  int classes_ = 2;
  std::vector<std::uint8_t> data_;
};

/// Channel argmax of [B,C,spatial...] logits or probabilities with a
/// first-index tie-break; one LabelVolume per batch element.
template <typename Scalar>
std::vector<LabelVolume> argmax_labels(const Tensor<Scalar>& scores);

}  // namespace danlab
