#pragma once

// The three-stage pipeline: teachers on the labelled fraction, distilled
// pseudo-labels for the rest, and retraining on the union.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "danlab/dan.hpp"
#include "danlab/data.hpp"
#include "danlab/distillation.hpp"
#include "danlab/metrics.hpp"

namespace danlab {

struct SplitSpec {
  double xi = 1.0;  // labelled fraction, in (0, 1]
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<Index> labeled;    // ascending
  std::vector<Index> unlabeled;  // ascending
};

/// round(xi * n) labelled indices drawn by a seeded permutation.
Split split(Index n, const SplitSpec& spec);

enum class NoiseMode { kIid, kBlob };

NoiseMode parse_noise_mode(const std::string& name);
std::string to_string(NoiseMode mode);

struct NoiseSpec {
  double mu = 0;  // flip probability, in [0, 0.5)
  NoiseMode mode = NoiseMode::kIid;
  Index radius_min = 2;  // blob radii in voxels
  Index radius_max = 4;
  std::uint64_t seed = 0;

  void validate() const;
};

/// `offset` holds 0 where a label is kept and k in 1..C-1 where it was
/// flipped to (label + k) mod C, so noisy = apply_flips(clean, offset).
struct NoisyLabels {
  LabelVolume labels;
  std::vector<std::uint8_t> offset;

  Index flipped() const;
};

/// iid: every voxel flips with probability mu to a uniformly drawn other
/// class. blob: whole digital balls |x - c| <= r, r uniform in the radius
/// range, fully inside the volume and never touching one another, are
/// flipped until the flipped fraction lies in [0.9 mu, 1.1 mu].
NoisyLabels inject_noise(const LabelVolume& labels, const NoiseSpec& spec);

LabelVolume apply_flips(const LabelVolume& clean, const std::vector<std::uint8_t>& offset);

/// Copies of pool[indices] with noisy labels. Sample i draws its noise from
/// a stream derived from (noise.seed, i), so it gets the same noise in every
/// run and in every subset it belongs to.
std::vector<Sample> with_label_noise(const std::vector<Sample>& pool, const std::vector<Index>& indices,
                                     const NoiseSpec& noise);

struct PipelineConfig {
  std::string arch = "desk2d";
  std::optional<std::filesystem::path> data;  // dataset directory; synthetic when absent
  SyntheticSpec synthetic;                     // count is the training pool size
  Index val_count = 40;                        // validation samples, drawn after the pool
  double xi = 0.5;
  NoiseSpec noise;
  std::set<int> sites{1, 2, 3, 4};
  Index teachers = 3;
  /// Teachers are full DANs, or single streams: stream A of a DAN trained
  /// with every site disabled, which learns exactly as a standalone network.
  bool single_stream_teachers = false;
  std::vector<Index> teacher_iterations{500, 750, 1000};
  DistillMode distill = DistillMode::kHierarchical;
  bool all_transforms = true;  // the 12-element group, else identity only
  DistillOptions distill_options;
  TrainConfig train;  // final stage; teachers reuse it with their own iteration counts
  DanOptions dan;
  std::uint64_t seed = 0;
};

struct Evaluation {
  double dice = 0;
  double adb = 0;
  double hdd = 0;
  double score = 0;
};

/// Mean over samples of the foreground-class means. An undefined distance
/// (a class missing from the prediction or the truth) counts as the volume
/// diagonal.
Evaluation evaluate_predictions(const std::vector<LabelVolume>& pred, const std::vector<LabelVolume>& truth);
Evaluation evaluate_model(TwoStreamDAN<float>& dan, std::span<const Sample> samples);

struct ExperimentReport {
  double xi = 0;
  double mu = 0;
  std::uint64_t seed = 0;
  Index n_labeled = 0;
  Index n_unlabeled = 0;
  double teacher_val_dice = 0;  // mean over teachers
  std::optional<double> pseudo_dice;
  std::optional<double> pseudo_flip_rate;
  Evaluation final_val;
};

/// report.csv: xi,mu,seed,n_labeled,n_unlabeled,teacher_val_dice,pseudo_dice,
/// pseudo_flip_rate,final_val_dice,final_val_adb,final_val_hdd,final_score
std::string format_report(const std::vector<ExperimentReport>& rows);

/// Raised when a stage fails; artifacts written so far are kept.
class PipelineError : public std::runtime_error {
 public:
  PipelineError(const std::string& stage, const std::string& what)
      : std::runtime_error("stage " + stage + ": " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

/// Training pool and validation set for a config, read or generated.
struct PipelineData {
  std::vector<Sample> pool;
  std::vector<Sample> validation;
};
PipelineData load_pipeline_data(const PipelineConfig& config);

/// Writes teachers/*.ckpt, teachers/*.log.csv, pseudo/*.lbl, pseudo/manifest.csv,
/// provenance.csv, final.ckpt, final.log.csv and report.csv under `run_dir`.
ExperimentReport run_pipeline(const PipelineConfig& config, const std::filesystem::path& run_dir);

struct AblationRow {
  std::set<int> sites;
  Evaluation val;
};

std::vector<std::set<int>> default_ablation_chain();

/// Trains one DAN per site subset on the same noisy pool, seed and
/// minibatch order, and evaluates each on the clean validation set.
std::vector<AblationRow> ablation_sweep(const PipelineConfig& config, const std::vector<std::set<int>>& subsets,
                                        const std::optional<std::filesystem::path>& run_dir = std::nullopt);

/// CSV: variant,sites,val_dice,val_adb,val_hdd,score; sites joined by '+'.
std::string format_ablation(const std::vector<AblationRow>& rows);

}  // namespace danlab
