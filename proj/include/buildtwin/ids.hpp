#pragma once

#include <cstdint>
#include <mutex>
#include <random>
#include <string>

namespace buildtwin {

/// Thread-safe generator of "<prefix>-<16 hex digits>" identifiers.
/// Seeded generators produce reproducible sequences.
class IdGenerator {
 public:
  IdGenerator();
  explicit IdGenerator(std::uint64_t seed) : rng_(seed) {}

  std::string next(const std::string& prefix);

 private:
  std::mutex mu_;
  std::mt19937_64 rng_;
};

/// Process-wide generator for event, prediction and action ids.
IdGenerator& default_ids();

/// Constant-time string equality; the running time depends only on the
/// length of `expected`.
bool constant_time_equals(const std::string& expected, const std::string& given);

}  // namespace buildtwin
