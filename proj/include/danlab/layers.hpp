#pragma once

// Network building blocks over [B, C, spatial...] tensors with one, two or
// three spatial axes. All ops record adjoints on the active tape.

#include <random>
#include <span>
#include <string>
#include <vector>

#include "danlab/label_volume.hpp"
#include "danlab/tensor.hpp"

namespace danlab {

struct ConvSpec {
  std::vector<Index> kernel;
  std::vector<Index> stride;
  std::vector<Index> padding;
  Index in_channels = 1;
  Index out_channels = 1;

  static ConvSpec isotropic(Index spatial_rank, Index kernel, Index stride, Index padding,
                            Index in_channels, Index out_channels);

  Index spatial_rank() const { return static_cast<Index>(kernel.size()); }
  /// floor((in + 2*pad - kernel)/stride) + 1 per axis; throws if any is < 1.
  Shape output_spatial(const Shape& input_spatial) const;
  void validate() const;
};

/// weight: [out, in, kernel...], bias: [out].
template <typename Scalar>
Tensor<Scalar> conv_forward(const Tensor<Scalar>& x, const ConvSpec& spec,
                            const Tensor<Scalar>& weight, const Tensor<Scalar>& bias);

enum class BatchNormMode { kTrain, kEval };

template <typename Scalar>
struct BatchNormState {
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;

  explicit BatchNormState(Index channels = 1);
};

inline constexpr double kBatchNormMomentum = 0.9;
inline constexpr double kBatchNormEpsilon = 1e-5;

/// Per-channel normalisation. Train mode uses batch statistics and updates
/// the running estimates as running = momentum*running + (1-momentum)*batch.
template <typename Scalar>
Tensor<Scalar> batchnorm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                         const Tensor<Scalar>& beta, BatchNormState<Scalar>& state,
                         BatchNormMode mode, Scalar momentum = Scalar(kBatchNormMomentum),
                         Scalar epsilon = Scalar(kBatchNormEpsilon));

/// Pooling keeps floor((in - window)/stride) + 1 outputs per axis; trailing
/// voxels that do not fill a window are dropped. Max pooling routes the
/// gradient to the first maximum in scan order.
template <typename Scalar>
Tensor<Scalar> maxpool(const Tensor<Scalar>& x, Index window, Index stride);
template <typename Scalar>
Tensor<Scalar> avgpool(const Tensor<Scalar>& x, Index window, Index stride);

template <typename Scalar>
Tensor<Scalar> upsample_nearest(const Tensor<Scalar>& x, Index factor);

template <typename Scalar>
Tensor<Scalar> concat_channels(const std::vector<Tensor<Scalar>>& parts);

/// x: [B, in], weight: [out, in], bias: [out] -> [B, out].
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias);

/// Max over each cell of a grid x grid (x grid) partition of the spatial axes.
/// Cell i of an axis of length n spans [floor(i*n/g), ceil((i+1)*n/g)).
template <typename Scalar>
Tensor<Scalar> grid_max_pool(const Tensor<Scalar>& x, Index grid);

/// Mean over all spatial axes: [B, C, spatial...] -> [B, C].
template <typename Scalar>
Tensor<Scalar> spatial_mean(const Tensor<Scalar>& x);

/// sum_i w_i * (-log softmax(logits)_i[label_i]) / (number of voxels).
/// labels holds one volume per batch element; voxel_weights is [B,1,spatial].
template <typename Scalar>
Tensor<Scalar> weighted_softmax_ce(const Tensor<Scalar>& logits,
                                   std::span<const LabelVolume> labels,
                                   const Tensor<Scalar>& voxel_weights);

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

template <typename Scalar>
class Conv {
 public:
  Conv() = default;
  /// He-normal weights, zero bias.
  Conv(ConvSpec spec, std::mt19937_64& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    return conv_forward(x, spec_, weight, bias);
  }
  const ConvSpec& spec() const { return spec_; }

  template <typename F>
  void for_each_tensor(const std::string& prefix, F&& f) {
    f(prefix + "weight", weight, true);
    f(prefix + "bias", bias, true);
  }

  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

 private:
  ConvSpec spec_;
};

template <typename Scalar>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(Index channels);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, BatchNormMode mode) {
    return batchnorm(x, gamma, beta, state, mode);
  }

  template <typename F>
  void for_each_tensor(const std::string& prefix, F&& f) {
    f(prefix + "gamma", gamma, true);
    f(prefix + "beta", beta, true);
    f(prefix + "running_mean", state.running_mean, false);
    f(prefix + "running_var", state.running_var, false);
  }

  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  BatchNormState<Scalar> state;
};

struct DenseBlockSpec {
  Index units = 3;
  Index growth = 4;

  Index output_channels(Index input_channels) const { return input_channels + units * growth; }
};

/// Each unit is BN -> ReLU -> Conv(kernel 3, stride 1, pad 1) over the
/// concatenation of the block input and all earlier unit outputs.
template <typename Scalar>
class DenseBlock {
 public:
  DenseBlock() = default;
  DenseBlock(Index spatial_rank, Index input_channels, DenseBlockSpec spec, std::mt19937_64& rng);

  Tensor<Scalar> forward(const Tensor<Scalar>& x, BatchNormMode mode);

  const DenseBlockSpec& spec() const { return spec_; }

  template <typename F>
  void for_each_tensor(const std::string& prefix, F&& f) {
    for (std::size_t u = 0; u < convs_.size(); ++u) {
      const std::string unit = prefix + "unit" + std::to_string(u) + ".";
      norms_[u].for_each_tensor(unit + "bn.", f);
      convs_[u].for_each_tensor(unit + "conv.", f);
    }
  }

 private:
  DenseBlockSpec spec_;
  std::vector<BatchNorm<Scalar>> norms_;
  std::vector<Conv<Scalar>> convs_;
};

template <typename Scalar>
Tensor<Scalar> dense_block(const Tensor<Scalar>& x, DenseBlock<Scalar>& block, BatchNormMode mode) {
  return block.forward(x, mode);
}

}  // namespace danlab
