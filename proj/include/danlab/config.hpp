#pragma once

// Flat key=value run configuration checked against a fixed schema.

#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "danlab/selftrain.hpp"

namespace danlab {

enum class ValueType { kInt, kDouble, kBool, kString, kIntList, kShape };

struct ConfigKey {
  std::string name;
  ValueType type;
  std::string default_value;
  std::string help;
  std::vector<std::string> choices;  // allowed values of a string key; empty = any
};

/// Every accepted key, in the order the resolved config is written.
const std::vector<ConfigKey>& config_schema();

class RunConfig {
 public:
  /// All keys at their defaults.
  RunConfig();

  /// Lines of `key = value`; '#' starts a comment. Unknown keys, repeated
  /// keys and ill-typed values throw ConfigError naming the line.
  static RunConfig parse(std::string_view text);
  static RunConfig load(const std::filesystem::path& path);

  /// Validates and stores one value (command-line overrides).
  void set(const std::string& key, const std::string& value);

  const std::string& raw(const std::string& key) const;
  long long get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::string get_string(const std::string& key) const { return raw(key); }
  std::vector<long long> get_int_list(const std::string& key) const;
  Shape get_shape(const std::string& key) const;

  /// Every key with its resolved value, schema order.
  std::string to_text() const;

 private:
  std::map<std::string, std::string> values_;
};

/// "32x32" -> {32, 32}.
Shape parse_shape(const std::string& text);
/// "1,2,3" -> {1, 2, 3}; "" and "none" -> {}.
std::vector<long long> parse_int_list(const std::string& text);

PipelineConfig pipeline_config(const RunConfig& config);
SyntheticSpec synthetic_spec(const RunConfig& config);

}  // namespace danlab
