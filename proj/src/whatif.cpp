#include "buildtwin/whatif.hpp"

#include "buildtwin/errors.hpp"

#include <algorithm>

namespace buildtwin {

namespace {

void check_features(const std::map<std::string, FeatureDelta>& deltas) {
  std::vector<std::string> unknown;
  for (const auto& [name, _] : deltas)
    if (!is_known_feature(name)) unknown.push_back(name);
  if (!unknown.empty())
    throw Error(ErrorCode::kUnknownFeature, "unknown feature " + unknown.front(),
                {{"unknown", unknown}, {"schema", kFeatureNames}});
}

}  // namespace

FeatureVector apply_deltas(const FeatureVector& x, const std::map<std::string, FeatureDelta>& deltas) {
  check_features(deltas);
  FeatureVector out = x;
  for (std::size_t i = 0; i < kFeatureCount; ++i) {
    auto it = deltas.find(std::string(kFeatureNames[i]));
    if (it == deltas.end()) continue;
    out[i] = it->second.mode == FeatureDelta::Mode::kAdd ? out[i] + it->second.value : it->second.value;
  }
  return out;
}

WhatIfService::WhatIfService(const Storage& store, const ModelRegistry& registry)
    : store_(store), registry_(registry) {}

std::vector<BuildJob> WhatIfService::sample(const JobSampleSpec& spec) const {
  JobQuery q;
  if (!spec.scope.all) q.project_ids = spec.scope.projects;
  q.statuses = std::vector<JobStatus>{JobStatus::kSuccess, JobStatus::kFailed, JobStatus::kCanceled,
                                      JobStatus::kSkipped};
  auto jobs = store_.select_jobs(q);
  if (jobs.size() > spec.max_jobs) jobs.erase(jobs.begin(), jobs.end() - static_cast<std::ptrdiff_t>(spec.max_jobs));
  if (spec.window_seconds && !jobs.empty()) {
    const Timestamp cutoff = add_seconds(jobs.back().created_at, -*spec.window_seconds);
    std::erase_if(jobs, [&](const BuildJob& j) { return j.created_at < cutoff; });
  }
  return jobs;
}

SensitivityReport WhatIfService::evaluate(const Scenario& scenario) const {
  return evaluate(scenario, *registry_.view());
}

SensitivityReport WhatIfService::evaluate(const Scenario& scenario, const ModelView& view) const {
  check_features(scenario.feature_deltas);
  const auto jobs = sample(scenario.sample);
  if (jobs.empty())
    throw Error(ErrorCode::kEmptySample, "the sample spec selects no terminal jobs",
                {{"scope", scenario.sample.scope.key()}});

  const auto& opts = registry_.options();
  std::map<WhatIfMetric, std::pair<double, double>> sums;
  for (const auto& job : jobs) {
    // Prefer the vector the models actually saw for this job.
    std::map<std::string, double> features;
    for (const auto& p : store_.predictions_for_job(job.job_id))
      if (p.model_kind == ModelKind::kFailure && !p.features.empty()) features = p.features;
    if (features.empty()) features = compute_features(store_, job, {opts.feature_window});
    const auto base = to_vector(features);
    const auto changed = apply_deltas(base, scenario.feature_deltas);

    auto add = [&](WhatIfMetric m, ModelKind k) {
      sums[m].first += ModelRegistry::predict(view, opts, k, job.project_id, base).value;
      sums[m].second += ModelRegistry::predict(view, opts, k, job.project_id, changed).value;
    };
    add(WhatIfMetric::kFailureProbability, ModelKind::kFailure);
    add(WhatIfMetric::kFlakyProbability, ModelKind::kFlaky);
    add(WhatIfMetric::kExpectedDuration, ModelKind::kDuration);
  }

  SensitivityReport r;
  r.scenario_id = scenario.scenario_id;
  r.label = scenario.label;
  r.model_snapshot_id = view.view_id;
  r.sample_size = jobs.size();
  const double n = static_cast<double>(jobs.size());
  for (const auto& [m, s] : sums) {
    SensitivityEntry e;
    e.baseline_value = s.first / n;
    e.scenario_value = s.second / n;
    e.delta = e.scenario_value - e.baseline_value;
    r.entries[m] = e;
  }
  return r;
}

std::vector<RankedReport> WhatIfService::compare(const std::vector<Scenario>& scenarios,
                                                 WhatIfMetric metric, bool minimize) const {
  const auto view = registry_.view();
  std::vector<RankedReport> out;
  for (const auto& s : scenarios) out.push_back({0, evaluate(s, *view)});
  std::stable_sort(out.begin(), out.end(), [&](const RankedReport& a, const RankedReport& b) {
    const double da = a.report.entries.at(metric).delta;
    const double db = b.report.entries.at(metric).delta;
    if (da != db) return minimize ? da < db : da > db;
    return a.report.label < b.report.label;
  });
  for (std::size_t i = 0; i < out.size(); ++i) out[i].rank = i + 1;
  return out;
}

}  // namespace buildtwin
