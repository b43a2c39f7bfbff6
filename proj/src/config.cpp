#include "danlab/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

namespace danlab {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

const ConfigKey& schema_entry(const std::string& key) {
  const auto& schema = config_schema();
  const auto it = std::find_if(schema.begin(), schema.end(), [&](const ConfigKey& k) { return k.name == key; });
  if (it == schema.end()) throw ConfigError("unknown config key '" + key + "'");
  return *it;
}

long long to_int(const std::string& key, const std::string& text) {
  long long v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ConfigError("config key '" + key + "' expects an integer, got '" + text + "'");
  }
  return v;
}

double to_double(const std::string& key, const std::string& text) {
  double v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size() || !std::isfinite(v)) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + text + "'");
  }
  return v;
}

bool to_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config key '" + key + "' expects true or false, got '" + text + "'");
}

void check_value(const ConfigKey& k, const std::string& value) {
  switch (k.type) {
    case ValueType::kInt: to_int(k.name, value); break;
    case ValueType::kDouble: to_double(k.name, value); break;
    case ValueType::kBool: to_bool(k.name, value); break;
    case ValueType::kIntList: parse_int_list(value); break;
    case ValueType::kShape: parse_shape(value); break;
    case ValueType::kString:
      if (!k.choices.empty() && std::find(k.choices.begin(), k.choices.end(), value) == k.choices.end()) {
        std::string allowed;
        for (const auto& c : k.choices) allowed += (allowed.empty() ? "" : ", ") + c;
        throw ConfigError("config key '" + k.name + "' must be one of " + allowed + ", got '" + value + "'");
      }
      break;
  }
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  using T = ValueType;
  static const std::vector<ConfigKey> schema = {
      {"seed", T::kInt, "0", "master seed for data, split, noise, initialisation and minibatch order", {}},
      {"arch", T::kString, "desk2d", "architecture preset", {"desk2d", "desk3d", "mini2d"}},
      {"data", T::kString, "", "dataset directory written by gen-data; empty generates synthetic data", {}},
      {"count", T::kInt, "120", "synthetic training pool size", {}},
      {"val_count", T::kInt, "40", "validation samples (the last ones of the dataset)", {}},
      {"shape", T::kShape, "32x32", "synthetic volume shape", {}},
      {"classes", T::kInt, "3", "synthetic class count (2 or 3)", {}},
      {"noise_sigma", T::kDouble, "0.1", "synthetic intensity noise", {}},
      {"deformation", T::kDouble, "0.15", "synthetic boundary perturbation amplitude", {}},
      {"bias_amplitude", T::kDouble, "0.1", "synthetic bias field amplitude", {}},
      {"xi", T::kDouble, "0.5", "labelled fraction of the training pool", {}},
      {"mu", T::kDouble, "0", "label flip probability of the labelled fraction", {}},
      {"noise", T::kString, "iid", "label noise model", {"iid", "blob"}},
      {"blob_radius_min", T::kInt, "2", "smallest blob radius in voxels", {}},
      {"blob_radius_max", T::kInt, "4", "largest blob radius in voxels", {}},
      {"sites", T::kIntList, "1,2,3,4", "enabled attention sites", {}},
      {"teachers", T::kInt, "3", "number of teachers", {}},
      {"teacher_kind", T::kString, "dan", "teacher model: full DAN or a single stream", {"dan", "stream"}},
      {"teacher_iterations", T::kIntList, "500,750,1000", "iterations per teacher, cycled", {}},
      {"distill", T::kString, "hierarchical", "pseudo-label ensemble", {"data", "model", "hierarchical"}},
      {"transforms", T::kString, "all12", "input transforms for data distillation", {"all12", "identity"}},
      {"soft_vote", T::kBool, "false", "average probabilities over transforms before hardening", {}},
      {"iterations", T::kInt, "2000", "training iterations", {}},
      {"batch", T::kInt, "4", "minibatch size", {}},
      {"lr", T::kDouble, "0.05", "initial learning rate", {}},
      {"momentum", T::kDouble, "0.9", "SGD momentum", {}},
      {"lr_decay", T::kDouble, "0.5", "learning rate factor per decay step", {}},
      {"lr_decay_fraction", T::kDouble, "0.25", "decay step as a fraction of the iterations", {}},
      {"la_smoothing", T::kBool, "true", "smooth the loss-attention map", {}},
      {"la_kernel_size", T::kInt, "3", "loss-attention smoothing support", {}},
      {"la_sigma", T::kDouble, "0.70710678118654757", "loss-attention smoothing sigma", {}},
      {"gate_bias", T::kDouble, "2", "initial bias of the gate outputs", {}},
      {"gate_mode", T::kString, "forward", "gate application", {"forward", "backward"}},
  };
  return schema;
}

RunConfig::RunConfig() {
  for (const auto& k : config_schema()) values_[k.name] = k.default_value;
}

RunConfig RunConfig::parse(std::string_view text) {
  RunConfig config;
  std::set<std::string> seen;
  std::istringstream lines{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(lines, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = "config line " + std::to_string(number) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(where + "repeated key '" + key + "'");
    try {
      config.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  return config;
}

RunConfig RunConfig::load(const std::filesystem::path& path) { return parse(read_file(path)); }

void RunConfig::set(const std::string& key, const std::string& value) {
  check_value(schema_entry(key), value);
  values_[key] = value;
}

const std::string& RunConfig::raw(const std::string& key) const {
  schema_entry(key);
  return values_.at(key);
}

long long RunConfig::get_int(const std::string& key) const { return to_int(key, raw(key)); }
double RunConfig::get_double(const std::string& key) const { return to_double(key, raw(key)); }
bool RunConfig::get_bool(const std::string& key) const { return to_bool(key, raw(key)); }
std::vector<long long> RunConfig::get_int_list(const std::string& key) const { return parse_int_list(raw(key)); }
Shape RunConfig::get_shape(const std::string& key) const { return parse_shape(raw(key)); }

std::string RunConfig::to_text() const {
  std::ostringstream os;
  for (const auto& k : config_schema()) os << k.name << " = " << values_.at(k.name) << '\n';
  return os.str();
}

Shape parse_shape(const std::string& text) {
  Shape shape;
  if (text.ends_with('x')) throw ConfigError("malformed shape '" + text + "'");
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, 'x')) {
    const long long v = to_int("shape", trim(part));
    if (v < 1) throw ConfigError("shape dimensions must be positive, got '" + text + "'");
    shape.push_back(static_cast<Index>(v));
  }
  if (shape.empty()) throw ConfigError("empty shape");
  return shape;
}

std::vector<long long> parse_int_list(const std::string& text) {
  std::vector<long long> out;
  const std::string body = trim(text);
  if (body.empty() || body == "none") return out;
  if (body.ends_with(',')) throw ConfigError("malformed list '" + text + "'");
  std::stringstream in(body);
  std::string part;
  while (std::getline(in, part, ',')) out.push_back(to_int("list", trim(part)));
  return out;
}

SyntheticSpec synthetic_spec(const RunConfig& c) {
  SyntheticSpec s;
  s.count = static_cast<Index>(c.get_int("count"));
  s.shape = c.get_shape("shape");
  s.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  s.classes = static_cast<int>(c.get_int("classes"));
  s.noise_sigma = c.get_double("noise_sigma");
  s.deformation = c.get_double("deformation");
  s.bias_amplitude = c.get_double("bias_amplitude");
  s.validate();
  return s;
}

PipelineConfig pipeline_config(const RunConfig& c) {
  PipelineConfig p;
  p.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  p.arch = c.get_string("arch");
  if (!c.get_string("data").empty()) p.data = c.get_string("data");
  p.synthetic = synthetic_spec(c);
  p.val_count = static_cast<Index>(c.get_int("val_count"));
  p.xi = c.get_double("xi");
  p.noise.mu = c.get_double("mu");
  p.noise.mode = parse_noise_mode(c.get_string("noise"));
  p.noise.radius_min = static_cast<Index>(c.get_int("blob_radius_min"));
  p.noise.radius_max = static_cast<Index>(c.get_int("blob_radius_max"));
  p.noise.seed = p.seed;
  try {
    p.noise.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  p.sites.clear();
  for (long long id : c.get_int_list("sites")) p.sites.insert(static_cast<int>(id));
  p.teachers = static_cast<Index>(c.get_int("teachers"));
  p.single_stream_teachers = c.get_string("teacher_kind") == "stream";
  p.teacher_iterations.clear();
  for (long long n : c.get_int_list("teacher_iterations")) {
    if (n < 0) throw ConfigError("teacher_iterations must be non-negative");
    p.teacher_iterations.push_back(static_cast<Index>(n));
  }
  if (p.teacher_iterations.empty()) throw ConfigError("teacher_iterations must list at least one value");
  p.distill = parse_distill_mode(c.get_string("distill"));
  p.all_transforms = c.get_string("transforms") == "all12";
  p.distill_options.soft = c.get_bool("soft_vote");
  p.train.iterations = static_cast<Index>(c.get_int("iterations"));
  p.train.batch = static_cast<Index>(c.get_int("batch"));
  p.train.learning_rate = c.get_double("lr");
  p.train.momentum = c.get_double("momentum");
  p.train.decay = c.get_double("lr_decay");
  p.train.decay_fraction = c.get_double("lr_decay_fraction");
  p.train.seed = p.seed;
  if (p.train.iterations < 0 || p.train.batch < 1) throw ConfigError("iterations must be >= 0 and batch >= 1");
  if (c.get_bool("la_smoothing")) {
    try {
      p.dan.la_kernel = gaussian_kernel(static_cast<Index>(c.get_int("la_kernel_size")), c.get_double("la_sigma"));
    } catch (const DomainError& e) {
      throw ConfigError(e.what());
    }
  } else {
    p.dan.la_kernel.reset();
  }
  p.dan.gate_bias = c.get_double("gate_bias");
  p.dan.gate_mode = c.get_string("gate_mode") == "forward" ? GateMode::kMultiplyForward : GateMode::kMultiplyBackwardOnly;
  const auto arch = ArchitectureSpec::preset(p.arch);
  for (int id : p.sites) {
    if (arch.site(id) == nullptr) throw ConfigError("architecture " + p.arch + " has no site " + std::to_string(id));
  }
  return p;
}

}  // namespace danlab
