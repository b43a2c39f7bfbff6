#include "danlab/selftrain.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace danlab {

namespace {

std::mt19937_64 seeded(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

constexpr std::uint64_t kSplitStream = 1;
constexpr std::uint64_t kNoiseStream = 2;

std::string sample_id(Index i) {
  std::ostringstream os;
  os << std::setw(4) << std::setfill('0') << i;
  return os.str();
}

std::string join_sites(const std::set<int>& sites) {
  std::string s;
  for (int id : sites) s += (s.empty() ? "" : "+") + std::to_string(id);
  return s.empty() ? "none" : s;
}

template <typename F>
auto stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const PipelineError&) {
    throw;
  } catch (const std::exception& e) {
    throw PipelineError(name, e.what());
  }
}

void append_cell(std::ostringstream& os, const std::optional<double>& v) {
  os << ',';
  if (v) os << *v;
}

}  // namespace

Split split(Index n, const SplitSpec& spec) {
  if (n < 2) throw ConfigError("split needs at least two samples");
  if (!(spec.xi > 0 && spec.xi <= 1)) throw ConfigError("xi must lie in (0, 1]");
  const auto labeled = static_cast<Index>(std::lround(spec.xi * static_cast<double>(n)));
  if (labeled < 1) throw ConfigError("xi leaves no labelled sample");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  auto rng = seeded(spec.seed, kSplitStream);
  std::shuffle(order.begin(), order.end(), rng);
  Split s;
  s.labeled.assign(order.begin(), order.begin() + labeled);
  s.unlabeled.assign(order.begin() + labeled, order.end());
  std::sort(s.labeled.begin(), s.labeled.end());
  std::sort(s.unlabeled.begin(), s.unlabeled.end());
  return s;
}

NoiseMode parse_noise_mode(const std::string& name) {
  if (name == "iid") return NoiseMode::kIid;
  if (name == "blob") return NoiseMode::kBlob;
  throw ConfigError("unknown noise mode '" + name + "' (expected iid or blob)");
}

std::string to_string(NoiseMode mode) { return mode == NoiseMode::kIid ? "iid" : "blob"; }

void NoiseSpec::validate() const {
  if (!(mu >= 0 && mu < 0.5)) throw DomainError("mu must lie in [0, 0.5)");
  if (radius_min < 1 || radius_max < radius_min) throw ConfigError("invalid blob radius range");
}

Index NoisyLabels::flipped() const {
  return static_cast<Index>(std::count_if(offset.begin(), offset.end(), [](std::uint8_t o) { return o != 0; }));
}

LabelVolume apply_flips(const LabelVolume& clean, const std::vector<std::uint8_t>& offset) {
  if (static_cast<Index>(offset.size()) != clean.size()) throw ShapeError("flip mask size differs from labels");
  LabelVolume out = clean;
  for (Index v = 0; v < clean.size(); ++v) {
    out[v] = static_cast<std::uint8_t>((clean[v] + offset[static_cast<std::size_t>(v)]) % clean.classes());
  }
  return out;
}

NoisyLabels inject_noise(const LabelVolume& labels, const NoiseSpec& spec) {
  spec.validate();
  NoisyLabels out{labels, std::vector<std::uint8_t>(static_cast<std::size_t>(labels.size()), 0)};
  if (spec.mu == 0) return out;
  auto rng = seeded(spec.seed, kNoiseStream);
  std::uniform_int_distribution<int> other(1, labels.classes() - 1);
  if (spec.mode == NoiseMode::kIid) {
    std::bernoulli_distribution flip(spec.mu);
    for (auto& o : out.offset) {
      if (flip(rng)) o = static_cast<std::uint8_t>(other(rng));
    }
  } else {
    const Shape& shape = labels.shape();
    const std::size_t rank = shape.size();
    const double target = spec.mu * static_cast<double>(labels.size());
    struct Ball {
      std::vector<Index> center;
      Index radius;
    };
    std::vector<Ball> balls;
    Index mass = 0;
    std::uniform_int_distribution<Index> radius(spec.radius_min, spec.radius_max);
    constexpr int kAttempts = 200000;
    for (int attempt = 0; attempt < kAttempts && static_cast<double>(mass) < 0.9 * target; ++attempt) {
      Ball b{std::vector<Index>(rank), radius(rng)};
      bool fits = true;
      for (std::size_t a = 0; a < rank; ++a) {
        if (shape[a] < 2 * b.radius + 1) {
          fits = false;
          break;
        }
        b.center[a] = std::uniform_int_distribution<Index>(b.radius, shape[a] - 1 - b.radius)(rng);
      }
      if (!fits) continue;
      // Centres further apart than r1 + r2 + 1 keep balls from touching.
      const bool apart = std::all_of(balls.begin(), balls.end(), [&](const Ball& o) {
        Index d2 = 0;
        for (std::size_t a = 0; a < rank; ++a) d2 += (b.center[a] - o.center[a]) * (b.center[a] - o.center[a]);
        const Index gap = b.radius + o.radius + 1;
        return d2 > gap * gap;
      });
      if (!apart) continue;
      std::vector<Index> voxels;
      std::vector<Index> c(rank);
      for (Index v = 0; v < labels.size(); ++v) {
        Index rest = v;
        Index d2 = 0;
        for (std::size_t a = rank; a-- > 0;) {
          c[a] = rest % shape[a];
          rest /= shape[a];
          d2 += (c[a] - b.center[a]) * (c[a] - b.center[a]);
        }
        if (d2 <= b.radius * b.radius) voxels.push_back(v);
      }
      if (static_cast<double>(mass + static_cast<Index>(voxels.size())) > 1.1 * target) continue;
      for (Index v : voxels) out.offset[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(other(rng));
      mass += static_cast<Index>(voxels.size());
      balls.push_back(std::move(b));
    }
    if (static_cast<double>(mass) < 0.9 * target) {
      throw DomainError("blob noise could not reach flip fraction " + std::to_string(spec.mu) +
                        " with radii " + std::to_string(spec.radius_min) + ".." + std::to_string(spec.radius_max));
    }
  }
  out.labels = apply_flips(labels, out.offset);
  return out;
}

std::vector<Sample> with_label_noise(const std::vector<Sample>& pool, const std::vector<Index>& indices,
                                     const NoiseSpec& noise) {
  std::vector<Sample> out;
  for (Index i : indices) {
    NoiseSpec spec = noise;
    spec.seed = seeded(noise.seed, kNoiseStream + static_cast<std::uint64_t>(i) * 16)();
    const auto& s = pool[static_cast<std::size_t>(i)];
    out.push_back(Sample{s.image, inject_noise(s.labels, spec).labels, {}});
  }
  return out;
}

Evaluation evaluate_predictions(const std::vector<LabelVolume>& pred, const std::vector<LabelVolume>& truth) {
  if (pred.size() != truth.size() || pred.empty()) throw std::invalid_argument("prediction and truth counts differ");
  Evaluation total;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double diag = volume_diagonal(truth[i].shape());
    auto metrics = evaluate(pred[i], truth[i]);
    for (auto& m : metrics) {
      if (!m.adb) m.adb = diag;
      if (!m.hdd) m.hdd = diag;
    }
    total.dice += mean_dice(metrics);
    total.adb += *mean_adb(metrics);
    total.hdd += *mean_hdd(metrics);
    total.score += *composite_score(metrics, diag);
  }
  const auto n = static_cast<double>(pred.size());
  return {total.dice / n, total.adb / n, total.hdd / n, total.score / n};
}

Evaluation evaluate_model(TwoStreamDAN<float>& dan, std::span<const Sample> samples) {
  std::vector<LabelVolume> pred;
  std::vector<LabelVolume> truth;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Index idx = static_cast<Index>(i);
    pred.push_back(dan.predict(make_batch<float>(samples, std::span<const Index>(&idx, 1))).front());
    truth.push_back(samples[i].labels);
  }
  return evaluate_predictions(pred, truth);
}

std::string format_report(const std::vector<ExperimentReport>& rows) {
  std::ostringstream os;
  os << "xi,mu,seed,n_labeled,n_unlabeled,teacher_val_dice,pseudo_dice,pseudo_flip_rate,final_val_dice,"
        "final_val_adb,final_val_hdd,final_score\n"
     << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.xi << ',' << r.mu << ',' << r.seed << ',' << r.n_labeled << ',' << r.n_unlabeled << ','
       << r.teacher_val_dice;
    append_cell(os, r.pseudo_dice);
    append_cell(os, r.pseudo_flip_rate);
    os << ',' << r.final_val.dice << ',' << r.final_val.adb << ',' << r.final_val.hdd << ',' << r.final_val.score
       << '\n';
  }
  return os.str();
}

PipelineData load_pipeline_data(const PipelineConfig& config) {
  std::vector<Sample> all;
  if (config.data) {
    all = read_dataset(*config.data);
  } else {
    SyntheticSpec spec = config.synthetic;
    spec.count = config.synthetic.count + config.val_count;
    all = generate(spec);
  }
  if (config.val_count < 1 || static_cast<Index>(all.size()) < config.val_count + 2) {
    throw ConfigError("dataset of " + std::to_string(all.size()) + " samples cannot hold " +
                      std::to_string(config.val_count) + " validation samples and a training pool");
  }
  PipelineData out;
  const auto cut = all.end() - config.val_count;
  out.pool.assign(all.begin(), cut);
  out.validation.assign(cut, all.end());
  return out;
}

ExperimentReport run_pipeline(const PipelineConfig& config, const std::filesystem::path& run_dir) {
  std::filesystem::create_directories(run_dir / "teachers");
  const ArchitectureSpec arch = ArchitectureSpec::preset(config.arch);
  const PipelineData data = stage("data", [&] { return load_pipeline_data(config); });
  const Split parts = split(static_cast<Index>(data.pool.size()), SplitSpec{config.xi, config.seed});
  if (config.teachers < 1) throw ConfigError("at least one teacher is required");

  ExperimentReport report;
  report.xi = config.xi;
  report.mu = config.noise.mu;
  report.seed = config.seed;
  report.n_labeled = static_cast<Index>(parts.labeled.size());
  report.n_unlabeled = static_cast<Index>(parts.unlabeled.size());

  // Label provenance: the only labels that reach training are noisy manual
  // labels (labelled part) and distilled labels (unlabelled part).
  std::ostringstream provenance;
  provenance << "id,role,label_source,stages\n";
  for (Index i : parts.labeled) provenance << sample_id(i) << ",labeled,manual_noisy,a;c\n";
  for (Index i : parts.unlabeled) provenance << sample_id(i) << ",unlabeled,pseudo,b;c\n";
  for (std::size_t i = 0; i < data.validation.size(); ++i) {
    provenance << "val" << sample_id(static_cast<Index>(i)) << ",validation,truth,eval\n";
  }
  write_file(run_dir / "provenance.csv", provenance.str());

  const std::vector<Sample> labeled = with_label_noise(data.pool, parts.labeled, config.noise);

  // Stage a: teachers on the labelled fraction.
  std::vector<std::unique_ptr<DanTeacher>> teachers;
  stage("a", [&] {
    double dice_sum = 0;
    for (Index t = 0; t < config.teachers; ++t) {
      const std::uint64_t seed = config.seed + 1000 * static_cast<std::uint64_t>(t + 1);
      TwoStreamDAN<float> dan(arch, seed, config.dan);
      dan.set_enabled_sites(config.single_stream_teachers ? std::set<int>{} : config.sites);
      TrainConfig tc = config.train;
      tc.seed = seed;
      tc.iterations = config.teacher_iterations[static_cast<std::size_t>(t) % config.teacher_iterations.size()];
      const auto log = train(dan, labeled, data.validation, tc);
      const std::string name = "teacher" + std::to_string(t);
      write_file(run_dir / "teachers" / (name + ".log.csv"), format_train_log(log));
      save_checkpoint(run_dir / "teachers" / (name + ".ckpt"), dan);
      if (config.single_stream_teachers) {
        auto teacher = std::make_unique<DanTeacher>(std::move(dan), name, 0);
        std::vector<LabelVolume> pred;
        std::vector<LabelVolume> truth;
        for (const auto& s : data.validation) {
          Shape shape{1};
          shape.insert(shape.end(), s.image.shape().begin(), s.image.shape().end());
          pred.push_back(teacher->predict(Tensor<float>(shape, s.image.data())));
          truth.push_back(s.labels);
        }
        dice_sum += evaluate_predictions(pred, truth).dice;
        teachers.push_back(std::move(teacher));
      } else {
        dice_sum += evaluate_model(dan, data.validation).dice;
        teachers.push_back(std::make_unique<DanTeacher>(std::move(dan), name));
      }
    }
    report.teacher_val_dice = dice_sum / static_cast<double>(config.teachers);
    return 0;
  });

  // Stage b: pseudo-labels for the unlabelled fraction.
  std::vector<Sample> pseudo;
  stage("b", [&] {
    if (parts.unlabeled.empty()) return 0;
    std::filesystem::create_directories(run_dir / "pseudo");
    std::vector<Teacher*> handles;
    for (auto& t : teachers) handles.push_back(t.get());
    std::vector<Tensor<float>> images;
    for (Index i : parts.unlabeled) images.push_back(data.pool[static_cast<std::size_t>(i)].image);
    const auto transforms = config.all_transforms ? default_transforms(arch.spatial_rank) : identity_transform();
    const auto labels = distill_all(handles, images, config.distill, transforms, config.distill_options);
    std::vector<ManifestRow> manifest;
    double dice_sum = 0;
    double flip_sum = 0;
    for (std::size_t k = 0; k < labels.size(); ++k) {
      const Index i = parts.unlabeled[k];
      const std::string file = sample_id(i) + ".lbl";
      write_volume(run_dir / "pseudo" / file, labels[k]);
      // The retained truth is read here for reporting only.
      const auto quality = pseudo_label_quality(labels[k], data.pool[static_cast<std::size_t>(i)].labels);
      dice_sum += quality.mean_foreground_dice();
      flip_sum += quality.flip_rate;
      manifest.push_back({sample_id(i), config.data ? (*config.data / (sample_id(i) + "_img.vol")).string()
                                                    : "synthetic:" + sample_id(i),
                          file, quality});
      pseudo.push_back(Sample{images[k], labels[k], {}});
    }
    write_file(run_dir / "pseudo" / "manifest.csv", format_manifest(manifest));
    report.pseudo_dice = dice_sum / static_cast<double>(labels.size());
    report.pseudo_flip_rate = flip_sum / static_cast<double>(labels.size());
    return 0;
  });

  // Stage c: retrain on the union, in pool order.
  stage("c", [&] {
    std::vector<Sample> union_set;
    std::size_t a = 0;
    std::size_t b = 0;
    while (a < labeled.size() || b < pseudo.size()) {
      const bool take_labeled =
          b == pseudo.size() || (a < labeled.size() && parts.labeled[a] < parts.unlabeled[b]);
      union_set.push_back(take_labeled ? labeled[a++] : pseudo[b++]);
    }
    TwoStreamDAN<float> dan(arch, config.seed, config.dan);
    dan.set_enabled_sites(config.sites);
    TrainConfig tc = config.train;
    tc.seed = config.seed;
    const auto log = train(dan, union_set, data.validation, tc);
    write_file(run_dir / "final.log.csv", format_train_log(log));
    save_checkpoint(run_dir / "final.ckpt", dan);
    report.final_val = evaluate_model(dan, data.validation);
    return 0;
  });

  write_file(run_dir / "report.csv", format_report({report}));
  return report;
}

std::vector<std::set<int>> default_ablation_chain() { return {{}, {4}, {3, 4}, {2, 3, 4}, {1, 2, 3, 4}}; }

std::vector<AblationRow> ablation_sweep(const PipelineConfig& config, const std::vector<std::set<int>>& subsets,
                                        const std::optional<std::filesystem::path>& run_dir) {
  const ArchitectureSpec arch = ArchitectureSpec::preset(config.arch);
  const PipelineData data = load_pipeline_data(config);
  std::vector<Index> all(data.pool.size());
  std::iota(all.begin(), all.end(), 0);
  const std::vector<Sample> noisy = with_label_noise(data.pool, all, config.noise);
  std::vector<AblationRow> rows;
  for (std::size_t v = 0; v < subsets.size(); ++v) {
    TwoStreamDAN<float> dan(arch, config.seed, config.dan);
    dan.set_enabled_sites(subsets[v]);
    TrainConfig tc = config.train;
    tc.seed = config.seed;
    const auto log = train(dan, noisy, data.validation, tc);
    if (run_dir) {
      write_file(*run_dir / ("variant" + std::to_string(v) + ".log.csv"), format_train_log(log));
    }
    rows.push_back({subsets[v], evaluate_model(dan, data.validation)});
  }
  if (run_dir) write_file(*run_dir / "ablation.csv", format_ablation(rows));
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "variant,sites,val_dice,val_adb,val_hdd,score\n" << std::setprecision(9);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    os << i << ',' << join_sites(r.sites) << ',' << r.val.dice << ',' << r.val.adb << ',' << r.val.hdd << ','
       << r.val.score << '\n';
  }
  return os.str();
}

}  // namespace danlab
