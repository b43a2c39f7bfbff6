// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. Exit status is nonzero when any criterion fails.

#include <sys/wait.h>

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include "danlab/attention.hpp"
#include "danlab/distillation.hpp"
#include "danlab/metrics.hpp"
#include "danlab/selfcheck.hpp"
#include "danlab/selftrain.hpp"
#include "test_util.hpp"

using namespace danlab;
using namespace danlab::testing;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

template <typename Scalar>
bool bit_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), sizeof(Scalar) * static_cast<std::size_t>(a.size())) == 0;
}

Verdict noise_diffusion() {
  const double p4 = noise_probability({0.1, 0.1}, 4);
  const double p52 = noise_probability({0.1, 0.1}, 52);
  const double p64 = noise_probability({0.1, 0.1}, 64);
  const bool ok = std::abs(p4 - 0.1551) <= 1e-4 && std::abs(p52 - 1) <= 1e-12 && std::abs(p64 - 1) <= 1e-12;
  return {ok, "rho=4 -> " + fmt(p4, 6) + ", rho=52 -> " + fmt(p52, 15) + ", rho=64 -> " + fmt(p64, 15)};
}

Verdict gradient_suite() {
  const std::set<std::string> required = {
      "grad:conv2d",  "grad:conv3d",   "grad:batchnorm",         "grad:maxpool",           "grad:avgpool",
      "grad:upsample", "grad:dense_block", "grad:linear",        "grad:softmax",           "grad:weighted_ce",
      "grad:spatial_attention", "grad:channel_attention", "grad:mini_dan"};
  std::set<std::string> seen;
  int failed = 0;
  std::string worst;
  for (const auto& r : run_selfcheck()) {
    if (!r.name.starts_with("grad:")) continue;
    seen.insert(r.name);
    if (!r.passed) {
      ++failed;
      worst += " " + r.name;
    }
  }
  int missing = 0;
  for (const auto& name : required) missing += !seen.contains(name);
  return {failed == 0 && missing == 0, std::to_string(seen.size()) + " float64 checks at rel err < 1e-4, " +
                                           std::to_string(failed) + " failed" + worst + ", " +
                                           std::to_string(missing) + " missing"};
}

Verdict reduction_identities() {
  std::mt19937_64 rng(31);
  int broken = 0;
  std::string which;
  auto check = [&](bool ok, const std::string& name) {
    if (!ok) {
      ++broken;
      which += " " + name;
    }
  };

  // Distillation lattice over three untrained but distinct teachers.
  std::vector<DanTeacher> owned;
  for (int t = 0; t < 3; ++t) owned.emplace_back(TwoStreamDAN<float>(ArchitectureSpec::preset("desk2d"), 40 + t), "t");
  std::vector<Teacher*> teachers{&owned[0], &owned[1], &owned[2]};
  const std::span<Teacher* const> one(teachers.data(), 1);
  const auto all = default_transforms(2);
  const auto identity = identity_transform();
  for (int i = 0; i < 4; ++i) {
    const auto image = random_tensor<float>({1, 12, 12}, rng);
    check(hierarchical_distill(one, image, all) == data_distill(*teachers[0], image, all), "HD(T=1)=DD");
    check(hierarchical_distill(teachers, image, identity) == model_distill(teachers, image), "HD(identity)=MD");
  }

  // All sites disabled: each stream trains exactly as a standalone network.
  auto dan = TwoStreamDAN<double>(ArchitectureSpec::preset("desk2d"), 41).ablate({});
  auto standalone = dan.clone();
  const auto x = random_tensor({2, 1, 10, 10}, rng);
  const std::vector<LabelVolume> labels{random_labels({10, 10}, 3, rng), random_labels({10, 10}, 3, rng)};
  {
    Tape<double> tape;
    DanOutput<double> out;
    DanLoss<double> loss;
    {
      TapeScope<double> scope(tape);
      out = dan.forward(x, BatchNormMode::kTrain);
      loss = dan.compute_loss(out.p, out.q, labels);
    }
    tape.backward(loss.loss);
    for (int s = 0; s < 2; ++s) {
      Tape<double> single;
      Tensor<double> logits;
      Tensor<double> ce;
      {
        TapeScope<double> scope(single);
        logits = standalone.stream(s).forward(x, BatchNormMode::kTrain);
        Shape ws = logits.shape();
        ws[1] = 1;
        ce = weighted_softmax_ce(logits, std::span<const LabelVolume>(labels), Tensor<double>::full(ws, 1.0));
      }
      single.backward(ce);
      check(bit_equal(logits, s == 0 ? out.p : out.q), "disabled-forward");
      std::vector<Buffer<double>> mine;
      std::vector<Buffer<double>> theirs;
      const std::string prefix = s == 0 ? "a." : "b.";
      dan.for_each_tensor([&](const std::string& n, Tensor<double>& t, bool trainable) {
        if (trainable && n.starts_with(prefix)) mine.push_back(t.grad());
      });
      standalone.for_each_tensor([&](const std::string& n, Tensor<double>& t, bool trainable) {
        if (trainable && n.starts_with(prefix)) theirs.push_back(t.grad());
      });
      bool same = mine.size() == theirs.size() && !mine.empty();
      for (std::size_t i = 0; same && i < mine.size(); ++i) {
        same = mine[i].size() == theirs[i].size() &&
               std::memcmp(mine[i].data(), theirs[i].data(), sizeof(double) * mine[i].size()) == 0;
      }
      check(same, "disabled-backward");
    }
  }

  // Full agreement: every weight gradient is exactly zero.
  {
    TwoStreamDAN<double> agree(ArchitectureSpec::preset("desk2d"), 42);
    agree.for_each_tensor([](const std::string& n, Tensor<double>& t, bool) {
      if (n == "a.layer13.bias" || n == "b.layer13.bias") t.data() << 60, 0, 0;
    });
    Tape<double> tape;
    DanLoss<double> loss;
    {
      TapeScope<double> scope(tape);
      const auto out = agree.forward(x, BatchNormMode::kTrain);
      loss = agree.compute_loss(out.p, out.q, labels);
    }
    tape.backward(loss.loss);
    bool zero = loss.loss.item() == 0.0;
    for (auto& p : agree.parameters()) {
      if (p.has_grad()) zero = zero && p.grad().abs().maxCoeff() == 0.0;
    }
    check(zero, "agreement-zero-gradient");
  }
  return {broken == 0, broken == 0 ? "HD(T=1)=DD, HD(identity)=MD, disabled DAN = standalone streams, "
                                     "agreement gives zero gradients; all bit-exact"
                                   : std::to_string(broken) + " identities broken:" + which};
}

Verdict transform_round_trips() {
  std::mt19937_64 rng(32);
  int exact = 0;
  int total = 0;
  for (const Shape& spatial : {Shape{9, 9}, Shape{5, 8, 8}}) {
    const auto rank = static_cast<Index>(spatial.size());
    Shape full{2, 3};
    full.insert(full.end(), spatial.begin(), spatial.end());
    const auto x = random_tensor(full, rng);
    const auto labels = random_labels(spatial, 4, rng);
    for (const auto& t : default_transforms(rank)) {
      ++total;
      exact += bit_equal(t.inverse().apply(t.apply(x, rank), rank), x) && t.inverse().apply(t.apply(labels)) == labels;
    }
  }
  return {exact == 24 && total == 24, std::to_string(exact) + "/" + std::to_string(total) +
                                          " transforms exact on 2D and 3D tensors and label maps"};
}

Verdict metric_oracles() {
  std::mt19937_64 rng(33);
  std::uniform_int_distribution<Index> side(1, 20);
  int exact = 0;
  int masks = 0;
  while (masks < 100) {
    const Shape shape{side(rng), side(rng)};
    const auto p = random_labels(shape, 2, rng);
    const auto t = random_labels(shape, 2, rng);
    const auto bp = brute_boundary(p, 1);
    const auto bt = brute_boundary(t, 1);
    if (bp.empty() || bt.empty()) continue;
    ++masks;
    long inter = 0, np = 0, nt = 0;
    for (Index v = 0; v < p.size(); ++v) {
      inter += p[v] == 1 && t[v] == 1;
      np += p[v] == 1;
      nt += t[v] == 1;
    }
    const double want_dice = 2.0 * static_cast<double>(inter) / static_cast<double>(np + nt);
    const auto dpt = nearest_distances(bp, bt);
    const auto dtp = nearest_distances(bt, bp);
    const double adb = (std::accumulate(dpt.begin(), dpt.end(), 0.0) / static_cast<double>(dpt.size()) +
                        std::accumulate(dtp.begin(), dtp.end(), 0.0) / static_cast<double>(dtp.size())) /
                       2;
    const double hd = std::max(*std::max_element(dpt.begin(), dpt.end()), *std::max_element(dtp.begin(), dtp.end()));
    exact += dice(p, t, 1) == want_dice && boundary_voxels(p, 1) == bp && *avg_boundary_distance(p, t, 1) == adb &&
             *hausdorff(p, t, 1) == hd;
  }
  return {exact == 100, std::to_string(exact) + "/100 random masks up to 20x20 match the brute-force oracle exactly"};
}

PipelineConfig noisy_ablation_config(std::uint64_t seed) {
  PipelineConfig c;
  c.synthetic.count = 200;
  c.synthetic.shape = {32, 32};
  c.synthetic.seed = seed;
  c.val_count = 40;
  c.noise.mu = 0.3;
  c.noise.mode = NoiseMode::kIid;
  c.noise.seed = seed;
  c.train.iterations = 500;
  c.seed = seed;
  return c;
}

Verdict noise_robustness() {
  const auto chain = default_ablation_chain();
  std::vector<std::vector<AblationRow>> runs;
  int dan_wins = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto start = std::chrono::steady_clock::now();
    runs.push_back(ablation_sweep(noisy_ablation_config(seed), chain));
    const auto& rows = runs.back();
    dan_wins += rows.back().val.dice >= rows.front().val.dice;
    std::cerr << "  seed " << seed << " ("
              << fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(), 4) << " s)\n"
              << format_ablation(rows);
  }
  std::vector<double> mean_score(chain.size(), 0);
  std::vector<double> mean_dice(chain.size(), 0);
  for (const auto& rows : runs) {
    for (std::size_t v = 0; v < chain.size(); ++v) {
      mean_score[v] += rows[v].val.score / static_cast<double>(runs.size());
      mean_dice[v] += rows[v].val.dice / static_cast<double>(runs.size());
    }
  }
  int inversions = 0;
  double worst = 0;
  for (std::size_t v = 1; v < chain.size(); ++v) {
    if (mean_score[v] < mean_score[v - 1]) {
      ++inversions;
      worst = std::max(worst, mean_score[v - 1] - mean_score[v]);
    }
  }
  const bool a = dan_wins >= 4;
  const bool b = inversions == 0 || (inversions == 1 && worst <= 0.01);
  std::string means;
  for (std::size_t v = 0; v < chain.size(); ++v) means += (v ? " " : "") + fmt(mean_score[v], 5);
  return {a && b, "(a) full DAN >= no-attention baseline in " + std::to_string(dan_wins) + "/5 seeds (mean Dice " +
                      fmt(mean_dice.back(), 5) + " vs " + fmt(mean_dice.front(), 5) + "); (b) mean score along " +
                      "{} {4} {3,4} {2,3,4} {1,2,3,4}: " + means + ", " + std::to_string(inversions) +
                      " inversions, largest " + fmt(worst, 3)};
}

Verdict distillation_quality() {
  double dd = 0, md = 0, hd = 0;
  constexpr int kSeeds = 3;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    PipelineConfig c;
    c.seed = seed;
    c.synthetic.seed = seed;
    c.noise.seed = seed;
    c.xi = 0.5;
    const auto data = load_pipeline_data(c);
    const auto parts = split(static_cast<Index>(data.pool.size()), {c.xi, seed});
    const auto labeled = with_label_noise(data.pool, parts.labeled, c.noise);
    std::vector<DanTeacher> owned;
    for (Index t = 0; t < c.teachers; ++t) {
      const std::uint64_t s = seed + 1000 * static_cast<std::uint64_t>(t + 1);
      TwoStreamDAN<float> dan(ArchitectureSpec::preset(c.arch), s, c.dan);
      TrainConfig tc = c.train;
      tc.seed = s;
      tc.iterations = c.teacher_iterations[static_cast<std::size_t>(t)];
      train(dan, labeled, {}, tc);
      owned.emplace_back(std::move(dan), "teacher" + std::to_string(t));
    }
    std::vector<Teacher*> teachers;
    for (auto& t : owned) teachers.push_back(&t);
    std::vector<Tensor<float>> images;
    for (Index i : parts.unlabeled) images.push_back(data.pool[static_cast<std::size_t>(i)].image);
    const auto transforms = default_transforms(2);
    double q[3] = {0, 0, 0};
    int m = 0;
    for (auto mode : {DistillMode::kData, DistillMode::kModel, DistillMode::kHierarchical}) {
      const auto pseudo = distill_all(teachers, images, mode, transforms);
      for (std::size_t k = 0; k < pseudo.size(); ++k) {
        q[m] += pseudo_label_quality(pseudo[k], data.pool[static_cast<std::size_t>(parts.unlabeled[k])].labels)
                    .mean_foreground_dice() /
                static_cast<double>(pseudo.size());
      }
      ++m;
    }
    std::cerr << "  seed " << seed << ": DD " << fmt(q[0]) << " MD " << fmt(q[1]) << " HD " << fmt(q[2]) << '\n';
    dd += q[0] / kSeeds;
    md += q[1] / kSeeds;
    hd += q[2] / kSeeds;
  }
  return {hd >= std::max(dd, md) - 0.02, "pseudo-label Dice over 3 seeds: HD " + fmt(hd, 5) + ", DD " + fmt(dd, 5) +
                                             ", MD " + fmt(md, 5) + " (need HD >= " +
                                             fmt(std::max(dd, md) - 0.02, 5) + ")"};
}

Verdict pipeline_sanity(const fs::path& work) {
  // Overfit: 20 clean samples, all labelled.
  PipelineConfig overfit;
  overfit.synthetic.count = 20;
  overfit.val_count = 4;
  overfit.xi = 1.0;
  overfit.teachers = 1;
  overfit.teacher_iterations = {0};
  overfit.train.iterations = 500;
  overfit.seed = 1;
  overfit.synthetic.seed = 1;
  run_pipeline(overfit, work / "overfit");
  TwoStreamDAN<float> dan(ArchitectureSpec::preset(overfit.arch), overfit.seed, overfit.dan);
  load_checkpoint(work / "overfit" / "final.ckpt", dan);
  const auto data = load_pipeline_data(overfit);
  const double train_dice = mean_validation_dice(dan, data.pool);

  PipelineConfig full;
  full.xi = 0.5;
  full.seed = 1;
  full.synthetic.seed = 1;
  const auto report = run_pipeline(full, work / "full");
  const bool a = train_dice > 0.95;
  const bool b = report.final_val.dice >= report.teacher_val_dice - 0.02;
  return {a && b, "overfit training Dice " + fmt(train_dice, 5) + " after 500 iterations; selftrain final Dice " +
                      fmt(report.final_val.dice, 5) + " vs teacher Dice " + fmt(report.teacher_val_dice, 5)};
}

Verdict determinism(const fs::path& work) {
  const fs::path cfg = work / "determinism.cfg";
  std::ofstream(cfg) << "count = 40\nval_count = 10\nxi = 0.5\nmu = 0.2\niterations = 120\n"
                        "teacher_iterations = 40,60,80\nseed = 5\n";
  auto run = [&](const std::string& name) {
    const std::string command = std::string(DANLAB_BIN) + " selftrain --config " + cfg.string() + " --out " +
                                (work / name).string() + " >/dev/null";
    const int status = std::system(command.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  const int c1 = run("det_a");
  const int c2 = run("det_b");
  if (c1 != 0 || c2 != 0) return {false, "selftrain exited with " + std::to_string(c1) + " and " + std::to_string(c2)};
  const bool ckpt = slurp(work / "det_a" / "final.ckpt") == slurp(work / "det_b" / "final.ckpt");
  const bool report = slurp(work / "det_a" / "report.csv") == slurp(work / "det_b" / "report.csv");
  const bool nonempty = !slurp(work / "det_a" / "final.ckpt").empty();
  return {ckpt && report && nonempty, std::string("final.ckpt ") + (ckpt ? "identical" : "differs") +
                                          ", report.csv " + (report ? "identical" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string work_dir = (fs::temp_directory_path() / "danlab_acceptance").string();
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 9));
  app.add_option("--work", work_dir, "scratch directory for run artifacts");
  CLI11_PARSE(app, argc, argv);

  const fs::path work(work_dir);
  fs::remove_all(work);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria = {
      {"noise-diffusion-probability", noise_diffusion},
      {"gradient-oracles", gradient_suite},
      {"reduction-identities", reduction_identities},
      {"transform-round-trips", transform_round_trips},
      {"metric-oracles", metric_oracles},
      {"noise-robustness-trend", noise_robustness},
      {"distillation-quality-trend", distillation_quality},
      {"pipeline-sanity", [&] { return pipeline_sanity(work); }},
      {"determinism", [&] { return determinism(work); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    std::cerr << "criterion " << id << ": " << criteria[i].first << '\n';
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cout << (v.pass ? "PASS " : "FAIL ") << id << ' ' << criteria[i].first << ": " << v.detail << " ["
              << fmt(secs, 4) << " s]" << std::endl;
    failures += !v.pass;
  }
  return failures == 0 ? 0 : 1;
}
