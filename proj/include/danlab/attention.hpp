#pragma once

// Loss attention (stream disagreement), spatial attention, channel
// attention, and the noise-diffusion model used to place them.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "danlab/architecture.hpp"
#include "danlab/layers.hpp"

namespace danlab {

/// Isotropic Gaussian with odd support `size` per axis. The 1-D profile is
/// normalised to sum 1; the N-d kernel is the outer product of profiles,
/// which equals exp(-|i-c|^2 / (2 sigma^2)) normalised over the N-d support.
struct GaussianKernel {
  Index size = 1;
  double sigma = 1.0;
  std::vector<double> profile;

  /// Full row-major N-d weights (size^rank entries).
  std::vector<double> dense(Index rank) const;
};

GaussianKernel gaussian_kernel(Index size, double sigma);

/// Smoothing kernel used by default for loss attention: size 3, variance 0.5.
GaussianKernel default_loss_attention_kernel();

/// Separable smoothing of [B,1,spatial...] maps with replicate padding.
template <typename Scalar>
Tensor<Scalar> gaussian_smooth(const Tensor<Scalar>& map, const GaussianKernel& kernel);

/// Voxel weights from the disagreement of two streams' hard predictions
/// (channel argmax, first-index tie-break): 1 where they differ, 0 where
/// they agree, optionally smoothed. Returns a [B,1,spatial...] constant.
template <typename Scalar>
Tensor<Scalar> loss_attention(const Tensor<Scalar>& p_logits, const Tensor<Scalar>& q_logits,
                              const std::optional<GaussianKernel>& kernel = std::nullopt);

/// Per-voxel gate sigmoid(conv3(C->C/2) -> ReLU -> conv3(C/2->1)) computed
/// from the fused features of both streams.
template <typename Scalar>
class SpatialAttention {
 public:
  SpatialAttention() = default;
  /// The scoring conv starts at zero weights and bias `gate_bias`.
  SpatialAttention(Index spatial_rank, Index channels, std::mt19937_64& rng, Scalar gate_bias = Scalar(2));

  Tensor<Scalar> forward(const Tensor<Scalar>& fused) const;

  template <typename F>
  void for_each_tensor(const std::string& prefix, F&& f) {
    transform.for_each_tensor(prefix + "transform.", f);
    score.for_each_tensor(prefix + "score.", f);
  }

  Conv<Scalar> transform;
  Conv<Scalar> score;
};

/// Per-channel gate. Descriptor: max over each cell of a grid x grid spatial
/// partition, averaged over cells; gate = sigmoid(FC(C->C/r) -> ReLU -> FC(C/r->C)).
template <typename Scalar>
class ChannelAttention {
 public:
  ChannelAttention() = default;
  ChannelAttention(Index channels, std::mt19937_64& rng, Index grid = 2, Index reduction = 4,
                   Scalar gate_bias = Scalar(2));

  /// [B,C,spatial...] -> [B,C,1,...].
  Tensor<Scalar> forward(const Tensor<Scalar>& fused) const;

  Index grid() const { return grid_; }

  template <typename F>
  void for_each_tensor(const std::string& prefix, F&& f) {
    f(prefix + "fc1.weight", fc1_weight, true);
    f(prefix + "fc1.bias", fc1_bias, true);
    f(prefix + "fc2.weight", fc2_weight, true);
    f(prefix + "fc2.bias", fc2_bias, true);
  }

  Tensor<Scalar> fc1_weight;
  Tensor<Scalar> fc1_bias;
  Tensor<Scalar> fc2_weight;
  Tensor<Scalar> fc2_bias;

 private:
  Index grid_ = 2;
};

template <typename Scalar>
Tensor<Scalar> spatial_attention(const Tensor<Scalar>& fused, const SpatialAttention<Scalar>& module) {
  return module.forward(fused);
}

template <typename Scalar>
Tensor<Scalar> channel_attention(const Tensor<Scalar>& fused, const ChannelAttention<Scalar>& module) {
  return module.forward(fused);
}

struct NoiseDiffusionParams {
  double mu = 0.1;   // label flip probability, in [0, 0.5)
  double tau = 0.1;  // diffusion scaling factor, > 0

  void validate() const;
};

/// Probability that a unit with receptive field rho to the loss aggregates at
/// least one flipped label: 1 - (1 - mu)^(tau * rho * rho).
double noise_probability(const NoiseDiffusionParams& params, Index rho);

struct PlacementRow {
  int site_id = 0;
  Index position = 0;
  Index rho = 0;
  double probability = 0;
  AttentionFamily recommended = AttentionFamily::kSpatial;
};

/// Spatial attention where the contamination probability is below
/// `threshold`, channel attention otherwise; the loss site always gets loss attention.
std::vector<PlacementRow> placement_report(const ArchitectureSpec& arch,
                                           const NoiseDiffusionParams& params,
                                           double threshold = 0.5);

/// Plain-text table: site, rho, prob, family.
std::string format_placement_report(const std::vector<PlacementRow>& rows);

}  // namespace danlab
