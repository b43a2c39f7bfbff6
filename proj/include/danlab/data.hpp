#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <variant>
#include <vector>

#include "danlab/label_volume.hpp"
#include "danlab/tensor.hpp"

namespace danlab {

/// Nested-shell phantoms: background (0), a shell ("myocardium", 1) around
/// an ellipsoidal core ("blood pool", 2). With classes == 2 shell and core
/// merge into a single foreground class.
struct SyntheticSpec {
  Index count = 20;
  Shape shape{32, 32};
  std::uint64_t seed = 0;
  int classes = 3;
  double noise_sigma = 0.1;
  double deformation = 0.15;  // relative amplitude of the boundary random walk
  double bias_amplitude = 0.1;
  Index shell_min = 2;  // shell thickness range in voxels
  Index shell_max = 3;
  double core_min = 0.15;  // core semi-axis range as a fraction of the smallest extent
  double core_max = 0.26;

  void validate() const;
  // core_max lowered, if needed, so the deformed phantom stays inside small volumes.
  double fitted_core_max() const;
};

/// Per-sample geometry; membership is decided on the normalised radius
/// r = |R (x - center) / axes|: core if r <= 1 + d(dir), shell if
/// r <= 1 + d(dir) + thickness / min(axes), where d is the boundary perturbation.
struct PhantomGeometry {
  std::vector<double> center;
  std::vector<double> axes;
  double angle = 0;  // in-plane rotation of the last two axes
  Index thickness = 2;
};

struct Sample {
  Tensor<float> image;  // [1, spatial...]
  LabelVolume labels;
  PhantomGeometry geometry;
};

/// Class means of background, shell and core.
inline constexpr double kClassIntensity[3] = {0.2, 0.9, 0.55};

std::vector<Sample> generate(const SyntheticSpec& spec);

/// Returns the class of a voxel for an unperturbed phantom.
int phantom_class(const PhantomGeometry& g, const std::vector<double>& point, int classes);

/// Stacks images into a [B, 1, spatial...] batch.
Tensor<float> stack_images(const std::vector<const Tensor<float>*>& images);

// DANVOL1 volume files: magic "DANVOL1\0", u32 kind (0 = float32 intensity,
// 1 = u8 labels), u32 rank, u32 dims (outermost first), row-major payload.
// Every field is little-endian.

inline constexpr char kVolumeMagic[8] = {'D', 'A', 'N', 'V', 'O', 'L', '1', '\0'};

std::string encode_volume(const Tensor<float>& volume);
std::string encode_volume(const LabelVolume& labels);
/// Labels decode with classes = max(2, largest value + 1) unless given.
std::variant<Tensor<float>, LabelVolume> decode_volume(const std::string& bytes, int classes = 0);

void write_volume(const std::filesystem::path& path, const Tensor<float>& volume);
void write_volume(const std::filesystem::path& path, const LabelVolume& labels);
std::variant<Tensor<float>, LabelVolume> read_volume(const std::filesystem::path& path, int classes = 0);
Tensor<float> read_intensity(const std::filesystem::path& path);
LabelVolume read_labels(const std::filesystem::path& path, int classes = 0);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

/// A dataset directory as written by gen-data: NNNN_img.vol, NNNN_lbl.vol
/// and index.csv (id,image,labels,classes).
void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);
std::vector<Sample> read_dataset(const std::filesystem::path& dir);

}  // namespace danlab
