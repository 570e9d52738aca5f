#pragma once

#include <stdexcept>
#include <string>

namespace flmkt {

// Error taxonomy shared by every module. Callers add context (round, client)
// before rethrowing where the contract demands it.

// Invalid configuration; the CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/layout violation: mismatched dimensions, stale tapes, bad schemas.
struct StructuralError : std::runtime_error {
  explicit StructuralError(const std::string& msg) : std::runtime_error(msg) {}
};

// Mathematically invalid input (e.g. a zero performance baseline).
struct DomainError : std::runtime_error {
  explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failure during learning (non-finite values and the like).
struct TrainingError : std::runtime_error {
  explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

// Data partitioning failed (degenerate draws exhausted the retry budget).
struct PartitionError : std::runtime_error {
  explicit PartitionError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace flmkt
