#pragma once

#include <stdexcept>
#include <string>

namespace rise {

/// Raised when a configuration violates one of its invariants
/// (bad model shape, infeasible pruning, insufficient candidates, ...).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when runtime inputs are malformed: token ids out of range,
/// mismatched lengths, empty corpora, unreadable files.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when training diverges.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"),
        step_(step) {}

  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

}  // namespace rise
