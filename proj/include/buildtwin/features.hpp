#pragma once

// v1 feature schema. Raw values are what users see and what scenario deltas
// act on; learners consume the scaled vector (plus a constant bias term).

#include "buildtwin/store.hpp"
#include "buildtwin/types.hpp"

#include <array>
#include <string_view>

namespace buildtwin {

inline constexpr std::string_view kFeatureSchemaVersion = "v1";

inline constexpr std::array<std::string_view, 7> kFeatureNames = {
    "hour_of_day",          // 0..23, UTC, of created_at
    "day_of_week",          // 0 = Monday .. 6 = Sunday
    "queued_duration",      // seconds; 0 while not yet started
    "recent_failure_rate",  // (failed + 1) / (completed + 2) over the trailing window
    "recent_mean_duration", // mean duration over completed jobs in the window; 0 if none
    "rerun_index",          // earlier jobs in the same retry group
    "ref_is_default",       // 0 or 1
};

inline constexpr std::size_t kFeatureCount = kFeatureNames.size();
inline constexpr std::size_t kDefaultFeatureWindow = 50;

bool is_known_feature(std::string_view name);
/// Names in `features` that are not part of the schema.
std::vector<std::string> unknown_features(const std::map<std::string, double>& features);

using FeatureVector = std::array<double, kFeatureCount>;

/// Throws Error{kSchemaMismatch} when a schema feature is missing or an
/// unknown one is present.
FeatureVector to_vector(const std::map<std::string, double>& features);
std::map<std::string, double> to_map(const FeatureVector& v);

/// Learner input: bias followed by each feature squashed to roughly [0, 1].
using ScaledVector = std::array<double, kFeatureCount + 1>;
ScaledVector scale(const FeatureVector& v);

/// Meta key holding a project's default ref.
std::string default_ref_key(ProjectId project);

struct FeatureOptions {
  std::size_t window = kDefaultFeatureWindow;
};

/// Features of `job` from history created strictly before it. Declared
/// features carried on the job override computed ones.
std::map<std::string, double> compute_features(const Storage& store, const BuildJob& job,
                                               const FeatureOptions& opts = {});

}  // namespace buildtwin
