#pragma once

#include <string>
#include <vector>

namespace danlab {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SelfCheckOptions {
  /// Adds a gradient check of an operation with a deliberately wrong
  /// adjoint; the suite must then fail.
  bool corrupt_adjoint = false;
  double grad_tolerance = 1e-4;
};

/// Gradient checks of every layer, both gate families and a miniature DAN,
/// transform round trips, metric oracles and the contamination-probability table.
std::vector<CheckResult> run_selfcheck(const SelfCheckOptions& options = {});

/// One "PASS name detail" / "FAIL name detail" line per check.
std::string format_checks(const std::vector<CheckResult>& results);

}  // namespace danlab
