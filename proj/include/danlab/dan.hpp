#pragma once

// Two parallel segmentation streams joined by attention sites.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "danlab/architecture.hpp"
#include "danlab/attention.hpp"
#include "danlab/data.hpp"
#include "danlab/layers.hpp"

namespace danlab {

/// One stream: the layers of an ArchitectureSpec with their own weights.
template <typename Scalar>
class Stream {
 public:
  Stream() = default;
  Stream(const ArchitectureSpec& arch, std::mt19937_64& rng);

  /// Runs layers [from, to).
  Tensor<Scalar> forward(const Tensor<Scalar>& x, Index from, Index to, BatchNormMode mode);
  Tensor<Scalar> forward(const Tensor<Scalar>& x, BatchNormMode mode) {
    return forward(x, 0, static_cast<Index>(layers_.size()), mode);
  }

  template <typename F>
  void for_each_tensor(const std::string& prefix, F&& f) {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string name = prefix + "layer" + std::to_string(i) + ".";
      std::visit(
          [&](auto& m) {
            if constexpr (!std::is_same_v<std::decay_t<decltype(m)>, LayerSpec>) m.for_each_tensor(name, f);
          },
          layers_[i]);
    }
  }

 private:
  using Layer = std::variant<LayerSpec, Conv<Scalar>, BatchNorm<Scalar>, DenseBlock<Scalar>>;
  std::vector<LayerSpec> specs_;
  std::vector<Layer> layers_;
};

struct DanOptions {
  /// Loss-attention smoothing; nullopt uses the raw disagreement mask.
  std::optional<GaussianKernel> la_kernel = default_loss_attention_kernel();
  double gate_bias = 2.0;
  GateMode gate_mode = GateMode::kMultiplyForward;
};

template <typename Scalar>
struct DanOutput {
  Tensor<Scalar> p;      // stream A logits
  Tensor<Scalar> q;      // stream B logits
  Tensor<Scalar> fused;  // softmax(p + q) over channels, not differentiated
  std::map<int, double> mean_gate;  // per gating site; 1 where disabled
};

template <typename Scalar>
struct DanLoss {
  Tensor<Scalar> loss;
  Tensor<Scalar> weights;  // [B,1,spatial...]
};

template <typename Scalar>
class TwoStreamDAN {
 public:
  TwoStreamDAN() = default;
  /// Stream A is initialised from `seed`, stream B from `seed + 1`, the
  /// attention modules from `seed + 2`.
  TwoStreamDAN(ArchitectureSpec arch, std::uint64_t seed, DanOptions options = {});
  /// Both streams start from the same weights.
  static TwoStreamDAN symmetric(ArchitectureSpec arch, std::uint64_t seed, DanOptions options = {});

  DanOutput<Scalar> forward(const Tensor<Scalar>& x, BatchNormMode mode);

  /// Weighted cross-entropy of both streams with loss-attention weights, or
  /// unit weights when the loss site is disabled or gates are forced open.
  DanLoss<Scalar> compute_loss(const Tensor<Scalar>& p, const Tensor<Scalar>& q,
                               std::span<const LabelVolume> labels) const;

  /// Argmax of the fused probabilities (eval-mode normalisation).
  std::vector<LabelVolume> predict(const Tensor<Scalar>& x);

  /// Deep copy with only `sites` active; the others behave as identity.
  TwoStreamDAN ablate(const std::set<int>& sites) const;
  TwoStreamDAN clone() const;

  const ArchitectureSpec& arch() const { return arch_; }
  const std::set<int>& enabled_sites() const { return enabled_; }
  void set_enabled_sites(std::set<int> sites);
  /// Every gate and loss weight becomes exactly 1.
  void force_open(bool open) { force_open_ = open; }
  bool forced_open() const { return force_open_; }
  const DanOptions& options() const { return options_; }

  Stream<Scalar>& stream(int which) { return streams_[static_cast<std::size_t>(which)]; }
  void swap_streams() { std::swap(streams_[0], streams_[1]); }

  /// Visits every tensor as (name, tensor, trainable). Names are stable and
  /// prefixed "a.", "b." or "site<id>.".
  template <typename F>
  void for_each_tensor(F&& f) {
    streams_[0].for_each_tensor("a.", f);
    streams_[1].for_each_tensor("b.", f);
    for (auto& [id, module] : gates_) {
      const std::string prefix = "site" + std::to_string(id) + ".";
      std::visit([&](auto& m) { m.for_each_tensor(prefix, f); }, module);
    }
  }
  std::vector<Tensor<Scalar>> parameters();

 private:
  bool site_active(const SiteSpec& site) const { return !force_open_ && enabled_.contains(site.id); }

  ArchitectureSpec arch_;
  DanOptions options_;
  std::array<Stream<Scalar>, 2> streams_;
  std::map<int, std::variant<ChannelAttention<Scalar>, SpatialAttention<Scalar>>> gates_;
  std::set<int> enabled_;
  bool force_open_ = false;
};

/// Copies float samples into a [B,1,spatial...] batch of the requested scalar.
template <typename Scalar>
Tensor<Scalar> make_batch(std::span<const Sample> samples, std::span<const Index> indices);

struct TrainConfig {
  Index iterations = 2000;
  Index batch = 4;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double decay = 0.5;           // multiplied into the rate every `decay_fraction` of the run
  double decay_fraction = 0.25;
  std::uint64_t seed = 0;       // minibatch order
};

double learning_rate_at(const TrainConfig& config, Index iteration);

struct TrainLogRow {
  Index iter = 0;
  double loss = 0;
  std::map<int, double> mean_gate;
  std::optional<double> val_dice;
};

/// SGD with momentum (v = m v + g; w -= lr v) over reshuffled epochs.
/// Validation mean Dice is logged at the end of each epoch when `validation`
/// is non-empty. Throws TrainingError on a non-finite loss.
std::vector<TrainLogRow> train(TwoStreamDAN<float>& dan, std::span<const Sample> training,
                               std::span<const Sample> validation, const TrainConfig& config);

/// Mean foreground Dice of the fused prediction over a sample set.
double mean_validation_dice(TwoStreamDAN<float>& dan, std::span<const Sample> samples);

/// CSV with header iter,loss,mean_gate_site1..4,val_dice.
std::string format_train_log(const std::vector<TrainLogRow>& rows);

// DANCKPT1 checkpoints: magic, then per tensor u32 name length, name bytes,
// u32 rank, u32 dims, float32 values; little-endian, read to end of file.

inline constexpr char kCheckpointMagic[8] = {'D', 'A', 'N', 'C', 'K', 'P', 'T', '1'};

std::string encode_checkpoint(TwoStreamDAN<float>& dan);
/// Every tensor of `dan` must appear exactly once with a matching shape.
void decode_checkpoint(const std::string& bytes, TwoStreamDAN<float>& dan);
void save_checkpoint(const std::filesystem::path& path, TwoStreamDAN<float>& dan);
void load_checkpoint(const std::filesystem::path& path, TwoStreamDAN<float>& dan);

}  // namespace danlab
