#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "danlab/tensor.hpp"

namespace danlab {

enum class LayerKind { kConv, kBatchNorm, kRelu, kMaxPool, kAvgPool, kUpsample, kDenseBlock };

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  Index kernel = 1;  // conv kernel or pooling window
  Index stride = 1;
  Index padding = 0;
  Index out_channels = 0;
  Index factor = 1;  // upsampling
  Index units = 0;   // dense block
  Index growth = 0;

  static LayerSpec conv(Index kernel, Index stride, Index padding, Index out_channels);
  static LayerSpec batchnorm();
  static LayerSpec relu();
  static LayerSpec maxpool(Index window, Index stride);
  static LayerSpec avgpool(Index window, Index stride);
  static LayerSpec upsample(Index factor);
  static LayerSpec dense_block(Index units, Index growth);

  bool operator==(const LayerSpec&) const = default;
};

enum class AttentionFamily { kChannel, kSpatial, kLoss };

std::string_view to_string(AttentionFamily family);

/// An attention site sits at a position between layers: position p is the
/// feature map produced by layers [0, p), so 0 is the network input and
/// layers.size() is the loss layer.
struct SiteSpec {
  int id = 0;
  Index position = 0;
  AttentionFamily family = AttentionFamily::kChannel;

  bool operator==(const SiteSpec&) const = default;
};

struct ArchitectureSpec {
  Index spatial_rank = 2;
  Index input_channels = 1;
  Index classes = 3;
  std::vector<LayerSpec> layers;
  std::vector<SiteSpec> sites;

  /// Unique site ids at existing positions, loss attention only at the loss
  /// layer, and a final channel count equal to `classes`.
  void validate() const;

  /// Channel count of the feature map at a position.
  Index channels_at(Index position) const;
  const SiteSpec* site(int id) const;

  /// Line-oriented text form; parse(to_text()) reproduces the architecture.
  std::string to_text() const;
  static ArchitectureSpec parse(std::string_view text);

  /// Built-in layouts: "desk2d" (32x32, 3 classes), "desk3d" (24^3, 3 classes)
  /// and "mini2d" (8x8, 2 classes, for gradient checks).
  static ArchitectureSpec preset(std::string_view name);

  bool operator==(const ArchitectureSpec&) const = default;
};

/// Widest extent along one axis of the feature map at `position` that influences a
/// single unit of the loss layer, from exact index intervals propagated back
/// through layers [position, end) for every phase of the unit.
Index receptive_field(const ArchitectureSpec& arch, Index position);

}  // namespace danlab
