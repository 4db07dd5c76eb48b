#pragma once

#include "buildtwin/models.hpp"

namespace buildtwin {

struct RankedReport {
  std::size_t rank = 0;
  SensitivityReport report;
};

/// Evaluates scenarios against one pinned model view; never trains.
class WhatIfService {
 public:
  WhatIfService(const Storage& store, const ModelRegistry& registry);

  /// Throws Error{kUnknownFeature}, Error{kEmptySample}.
  SensitivityReport evaluate(const Scenario& scenario) const;
  SensitivityReport evaluate(const Scenario& scenario, const ModelView& view) const;

  /// Stable ranking by the delta of `metric`, smallest first when
  /// `minimize`; ties go to the lexicographically smaller label.
  std::vector<RankedReport> compare(const std::vector<Scenario>& scenarios, WhatIfMetric metric,
                                    bool minimize = true) const;

  /// The newest `max_jobs` terminal jobs in scope, oldest first.
  std::vector<BuildJob> sample(const JobSampleSpec& spec) const;

 private:
  const Storage& store_;
  const ModelRegistry& registry_;
};

/// Applies additive deltas and overrides. Throws Error{kUnknownFeature}.
FeatureVector apply_deltas(const FeatureVector& x, const std::map<std::string, FeatureDelta>& deltas);

}  // namespace buildtwin
