// danlab: dataset generation, training, distillation, self-training runs,
// ablation sweeps, evaluation and self-diagnostics.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
// Errors print one line on stderr: error code=<n> kind=<kind> message=<text>

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "danlab/config.hpp"
#include "danlab/selfcheck.hpp"
#include "danlab/selftrain.hpp"

namespace fs = std::filesystem;
using namespace danlab;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kUsageError = 2;

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

int fail(int code, const std::string& kind, std::string message) {
  std::replace(message.begin(), message.end(), '\n', ' ');
  std::cerr << "error code=" << code << " kind=" << kind << " message=" << message << '\n';
  return code;
}

// Options shared by the commands that take a run configuration.
struct ConfigFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::map<std::string, std::string> shortcuts;  // key -> value from dedicated flags
  std::string out;

  void attach(CLI::App* cmd, bool with_out = true) {
    cmd->add_option("--config", config_file, "config file of key = value lines");
    cmd->add_option("--set", sets, "override one config key (key=value); repeatable");
    if (with_out) cmd->add_option("--out", out, "run directory")->required();
  }

  void shortcut(CLI::App* cmd, const std::string& flag, const std::string& key) {
    cmd->add_option_function<std::string>(
        "--" + flag, [this, key](const std::string& v) { shortcuts[key] = v; }, "sets config key " + key);
  }

  // Defaults, then the file, then --set, then dedicated flags.
  RunConfig resolve() const {
    RunConfig config = config_file.empty() ? RunConfig() : RunConfig::load(config_file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      config.set(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [key, value] : shortcuts) config.set(key, value);
    return config;
  }
};

fs::path prepare_run_dir(const std::string& out, const RunConfig& config) {
  const fs::path dir(out);
  fs::create_directories(dir);
  write_file(dir / "config.txt", config.to_text());
  return dir;
}

std::string evaluation_csv(const std::vector<std::pair<std::string, Evaluation>>& rows, const std::string& head) {
  std::ostringstream os;
  os << head << ",dice,adb,hdd,score\n" << std::setprecision(9);
  for (const auto& [id, e] : rows) os << id << ',' << e.dice << ',' << e.adb << ',' << e.hdd << ',' << e.score << '\n';
  return os.str();
}

void report_done(const fs::path& report) { std::cout << "report: " << report.string() << '\n'; }

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    if (!part.empty()) out.push_back(part);
  }
  return out;
}

int cmd_gen_data(const ConfigFlags& flags) {
  const RunConfig config = flags.resolve();
  const SyntheticSpec spec = synthetic_spec(config);
  std::cout << "gen-data: " << spec.count << " samples\n";
  write_dataset(flags.out, generate(spec));
  std::cout << "index: " << (fs::path(flags.out) / "index.csv").string() << '\n';
  return 0;
}

int cmd_train(const ConfigFlags& flags) {
  const RunConfig config = flags.resolve();
  const PipelineConfig pc = pipeline_config(config);
  const fs::path dir = prepare_run_dir(flags.out, config);
  const PipelineData data = load_pipeline_data(pc);
  std::vector<Index> all(data.pool.size());
  std::iota(all.begin(), all.end(), 0);
  const std::vector<Sample> training = with_label_noise(data.pool, all, pc.noise);

  TwoStreamDAN<float> dan(ArchitectureSpec::preset(pc.arch), pc.seed, pc.dan);
  dan.set_enabled_sites(pc.sites);
  std::cout << "train: " << training.size() << " samples, " << pc.train.iterations << " iterations\n";
  const auto log = train(dan, training, data.validation, pc.train);
  write_file(dir / "final.log.csv", format_train_log(log));
  save_checkpoint(dir / "final.ckpt", dan);
  write_file(dir / "report.csv", evaluation_csv({{"validation", evaluate_model(dan, data.validation)}}, "set"));
  report_done(dir / "report.csv");
  return 0;
}

int cmd_distill(const ConfigFlags& flags, const std::string& teacher_list, const std::string& input) {
  RunConfig config = flags.resolve();
  const PipelineConfig pc = pipeline_config(config);
  const std::string source = input.empty() ? config.get_string("data") : input;
  if (source.empty()) throw UsageError("distill needs --input or a data key naming a dataset directory");
  const auto paths = split_list(teacher_list);
  if (paths.empty()) throw UsageError("--teachers lists no checkpoints");
  const ArchitectureSpec arch = ArchitectureSpec::preset(pc.arch);

  std::vector<std::unique_ptr<DanTeacher>> teachers;
  for (const auto& path : paths) {
    TwoStreamDAN<float> dan(arch, pc.seed, pc.dan);
    dan.set_enabled_sites(pc.sites);
    load_checkpoint(path, dan);
    teachers.push_back(std::make_unique<DanTeacher>(std::move(dan), fs::path(path).stem().string()));
  }
  std::vector<Teacher*> handles;
  for (auto& t : teachers) handles.push_back(t.get());

  const fs::path dir = prepare_run_dir(flags.out, config);
  fs::create_directories(dir / "pseudo");
  const std::vector<Sample> samples = read_dataset(source);
  std::vector<Tensor<float>> images;
  for (const auto& s : samples) images.push_back(s.image);
  const auto transforms = pc.all_transforms ? default_transforms(arch.spatial_rank) : identity_transform();
  std::cout << "distill: " << samples.size() << " volumes, " << handles.size() << " teachers, "
            << transforms.size() << " transforms\n";
  const auto labels = distill_all(handles, images, pc.distill, transforms, pc.distill_options);

  std::vector<ManifestRow> manifest;
  double dice_sum = 0;
  double flip_sum = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::ostringstream id;
    id << std::setw(4) << std::setfill('0') << i;
    const std::string file = id.str() + ".lbl";
    write_volume(dir / "pseudo" / file, labels[i]);
    const auto quality = pseudo_label_quality(labels[i], samples[i].labels);
    dice_sum += quality.mean_foreground_dice();
    flip_sum += quality.flip_rate;
    manifest.push_back({id.str(), (fs::path(source) / (id.str() + "_img.vol")).string(), file, quality});
  }
  write_file(dir / "pseudo" / "manifest.csv", format_manifest(manifest));
  const double n = static_cast<double>(std::max<std::size_t>(labels.size(), 1));
  std::ostringstream report;
  report << "mode,teachers,transforms,volumes,pseudo_dice,pseudo_flip_rate\n"
         << std::setprecision(9) << to_string(pc.distill) << ',' << handles.size() << ',' << transforms.size()
         << ',' << labels.size() << ',' << dice_sum / n << ',' << flip_sum / n << '\n';
  write_file(dir / "report.csv", report.str());
  report_done(dir / "report.csv");
  return 0;
}

int cmd_selftrain(const ConfigFlags& flags) {
  const RunConfig config = flags.resolve();
  const PipelineConfig pc = pipeline_config(config);
  const fs::path dir = prepare_run_dir(flags.out, config);
  std::cout << "selftrain: xi " << pc.xi << ", mu " << pc.noise.mu << ", " << pc.teachers << " teachers\n";
  run_pipeline(pc, dir);
  report_done(dir / "report.csv");
  return 0;
}

int cmd_ablate(const ConfigFlags& flags) {
  const RunConfig config = flags.resolve();
  const PipelineConfig pc = pipeline_config(config);
  const fs::path dir = prepare_run_dir(flags.out, config);
  const auto chain = default_ablation_chain();
  std::cout << "ablate: " << chain.size() << " variants\n";
  const auto rows = ablation_sweep(pc, chain, dir);
  write_file(dir / "report.csv", format_ablation(rows));
  report_done(dir / "report.csv");
  return 0;
}

// Prediction files are matched to truth by name: "0003.lbl" or
// "0003_lbl.vol" in the prediction directory pairs with sample 0003 of a
// dataset directory, or with a file of the same name in a plain directory.
int cmd_eval(const std::string& pred_dir, const std::string& truth_dir, const std::string& out) {
  std::map<std::string, LabelVolume> truth;
  if (fs::exists(fs::path(truth_dir) / "index.csv")) {
    const auto samples = read_dataset(truth_dir);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::ostringstream id;
      id << std::setw(4) << std::setfill('0') << i;
      truth.emplace(id.str(), samples[i].labels);
    }
  }
  const auto key_of = [](const fs::path& p) {
    std::string stem = p.stem().string();
    if (stem.size() > 4 && stem.ends_with("_lbl")) stem.resize(stem.size() - 4);
    return stem;
  };

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(pred_dir)) {
    const auto ext = entry.path().extension();
    if (entry.is_regular_file() && (ext == ".lbl" || ext == ".vol")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<std::pair<std::string, Evaluation>> rows;
  std::vector<LabelVolume> preds;
  std::vector<LabelVolume> truths;
  for (const auto& file : files) {
    const std::string key = key_of(file);
    LabelVolume t;
    if (const auto it = truth.find(key); it != truth.end()) {
      t = it->second;
    } else if (fs::exists(fs::path(truth_dir) / file.filename())) {
      t = read_labels(fs::path(truth_dir) / file.filename());
    } else {
      continue;
    }
    LabelVolume p = read_labels(file, t.classes());
    rows.emplace_back(key, evaluate_predictions({p}, {t}));
    preds.push_back(std::move(p));
    truths.push_back(std::move(t));
  }
  if (rows.empty()) throw UsageError("no prediction in " + pred_dir + " has a matching truth in " + truth_dir);
  rows.emplace_back("mean", evaluate_predictions(preds, truths));

  const fs::path dir(out);
  fs::create_directories(dir);
  write_file(dir / "config.txt", "pred = " + pred_dir + "\ntruth = " + truth_dir + "\n");
  write_file(dir / "report.csv", evaluation_csv(rows, "id"));
  std::cout << "eval: " << preds.size() << " volumes\n";
  report_done(dir / "report.csv");
  return 0;
}

int cmd_selfcheck(bool corrupt_adjoint) {
  SelfCheckOptions options;
  options.corrupt_adjoint = corrupt_adjoint;
  const auto results = run_selfcheck(options);
  std::cout << format_checks(results);
  const bool ok = std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed; });
  return ok ? 0 : kRuntimeFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"danlab: two-stream attention segmentation under label noise"};
  app.require_subcommand(1);

  ConfigFlags gen_flags;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  gen_flags.attach(gen);
  for (const auto& [flag, key] : std::vector<std::pair<std::string, std::string>>{
           {"count", "count"}, {"shape", "shape"}, {"seed", "seed"}, {"classes", "classes"},
           {"noise-sigma", "noise_sigma"}, {"deformation", "deformation"}, {"bias", "bias_amplitude"}}) {
    gen_flags.shortcut(gen, flag, key);
  }

  const std::vector<std::pair<std::string, std::string>> run_shortcuts = {
      {"seed", "seed"}, {"arch", "arch"}, {"data", "data"}, {"xi", "xi"}, {"mu", "mu"},
      {"sites", "sites"}, {"iterations", "iterations"}};

  ConfigFlags train_flags;
  auto* train_cmd = app.add_subcommand("train", "train one DAN on the noisy training pool");
  train_flags.attach(train_cmd);
  for (const auto& [flag, key] : run_shortcuts) train_flags.shortcut(train_cmd, flag, key);

  ConfigFlags distill_flags;
  std::string teacher_list;
  std::string distill_input;
  auto* distill = app.add_subcommand("distill", "distil pseudo-labels for a dataset from teacher checkpoints");
  distill_flags.attach(distill);
  distill->add_option("--teachers", teacher_list, "comma-separated checkpoint paths")->required();
  distill->add_option("--input", distill_input, "dataset directory to label");
  distill_flags.shortcut(distill, "transforms", "transforms");
  distill_flags.shortcut(distill, "mode", "distill");
  distill_flags.shortcut(distill, "arch", "arch");

  ConfigFlags selftrain_flags;
  auto* selftrain = app.add_subcommand("selftrain", "run the teacher, distillation and retraining stages");
  selftrain_flags.attach(selftrain);
  for (const auto& [flag, key] : run_shortcuts) selftrain_flags.shortcut(selftrain, flag, key);

  ConfigFlags ablate_flags;
  auto* ablate = app.add_subcommand("ablate", "train the nested attention-site chain on identical data");
  ablate_flags.attach(ablate);
  for (const auto& [flag, key] : run_shortcuts) ablate_flags.shortcut(ablate, flag, key);

  std::string pred_dir;
  std::string truth_dir;
  std::string eval_out;
  auto* eval = app.add_subcommand("eval", "per-sample and mean Dice, ADB and Hausdorff distance");
  eval->add_option("--pred", pred_dir, "directory of predicted label volumes")->required();
  eval->add_option("--truth", truth_dir, "dataset directory or directory of label volumes")->required();
  eval->add_option("--out", eval_out, "output directory")->required();

  bool corrupt_adjoint = false;
  auto* selfcheck = app.add_subcommand("selfcheck", "gradient, transform, metric and table checks");
  selfcheck->add_flag("--corrupt-adjoint", corrupt_adjoint)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    return fail(kUsageError, "usage", e.what());
  }

  try {
    if (*gen) return cmd_gen_data(gen_flags);
    if (*train_cmd) return cmd_train(train_flags);
    if (*distill) return cmd_distill(distill_flags, teacher_list, distill_input);
    if (*selftrain) return cmd_selftrain(selftrain_flags);
    if (*ablate) return cmd_ablate(ablate_flags);
    if (*eval) return cmd_eval(pred_dir, truth_dir, eval_out);
    if (*selfcheck) return cmd_selfcheck(corrupt_adjoint);
  } catch (const ConfigError& e) {
    return fail(kUsageError, "config", e.what());
  } catch (const UsageError& e) {
    return fail(kUsageError, "usage", e.what());
  } catch (const PipelineError& e) {
    return fail(kRuntimeFailure, "stage_" + e.stage(), e.what());
  } catch (const FormatError& e) {
    return fail(kRuntimeFailure, "format", e.what());
  } catch (const TrainingError& e) {
    return fail(kRuntimeFailure, "training", e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(kRuntimeFailure, "io", e.what());
  } catch (const std::exception& e) {
    return fail(kRuntimeFailure, "runtime", e.what());
  }
  return kUsageError;
}
