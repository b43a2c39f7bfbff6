#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace danlab {

/// Tensor shapes that do not satisfy an operation's shape contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Values outside an operation's mathematical domain (log of a non-positive
/// number, exp overflow, gate values outside [0,1], ...).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Malformed or truncated files.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Configuration values rejected by a schema or a precondition.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Optimisation that diverged (non-finite loss or weights).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace danlab
