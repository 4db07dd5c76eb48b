#pragma once

#include "buildtwin/time.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace buildtwin {

using JobId = std::int64_t;
using ProjectId = std::int64_t;
using PipelineId = std::int64_t;

enum class JobStatus { kCreated, kPending, kRunning, kSuccess, kFailed, kCanceled, kSkipped };

std::string_view to_string(JobStatus s);
std::optional<JobStatus> job_status_from_string(std::string_view s);

/// success, failed, canceled, skipped
bool is_terminal(JobStatus s);
/// success, failed: the statuses that carry a pass/fail signal.
bool is_completed(JobStatus s);
/// Upsert precedence: created < pending < running < any terminal status.
int status_rank(JobStatus s);

/// One CI job execution. The twin's atomic fact.
struct BuildJob {
  JobId job_id = 0;
  ProjectId project_id = 0;
  PipelineId pipeline_id = 0;
  std::string name;
  std::string ref;
  std::string commit_sha;
  JobStatus status = JobStatus::kCreated;
  Timestamp created_at{};
  std::optional<Timestamp> started_at;
  std::optional<Timestamp> finished_at;
  std::optional<double> queued_duration;
  std::optional<double> duration;
  std::optional<std::int64_t> runner_id;
  std::optional<bool> flaky;
  std::map<std::string, double> features;

  friend bool operator==(const BuildJob&, const BuildJob&) = default;
};

struct Project {
  ProjectId project_id = 0;
  std::string path;
  std::string default_ref = "main";

  friend bool operator==(const Project&, const Project&) = default;
};

/// Returns every violated invariant; an empty list means the job is valid.
std::vector<std::string> validate_job(const BuildJob& job);

enum class Interval { kHourly, kDaily, kWeekly, kMonthly, kYearly };

std::string_view to_string(Interval i);
std::optional<Interval> interval_from_string(std::string_view s);

/// A project list, or every project when `all` is set.
struct Scope {
  bool all = true;
  std::vector<ProjectId> projects;

  static Scope everything() { return {}; }
  static Scope of(std::vector<ProjectId> ids) { return {false, std::move(ids)}; }
  bool contains(ProjectId id) const;
  std::string key() const;

  friend bool operator==(const Scope&, const Scope&) = default;
};

enum class MetricName { kExecutionsFrequency, kMeanDuration, kFailureRatio, kFlakyFailureRatio };

std::string_view to_string(MetricName m);
std::optional<MetricName> metric_from_string(std::string_view s);
bool is_ratio_metric(MetricName m);

struct MetricSnapshot {
  Scope scope;
  Timestamp window_start{};
  Timestamp window_end{};
  Interval interval = Interval::kDaily;
  std::int64_t executions_frequency = 0;
  std::optional<double> mean_duration;
  std::optional<double> failure_ratio;
  std::optional<double> flaky_failure_ratio;

  std::optional<double> value(MetricName m) const;

  friend bool operator==(const MetricSnapshot&, const MetricSnapshot&) = default;
};

enum class ModelKind { kDuration, kFailure, kFlaky };

std::string_view to_string(ModelKind k);
std::optional<ModelKind> model_kind_from_string(std::string_view s);
inline constexpr ModelKind kAllModelKinds[] = {ModelKind::kDuration, ModelKind::kFailure,
                                               ModelKind::kFlaky};

struct PredictionRecord {
  std::string prediction_id;
  JobId job_id = 0;
  ModelKind model_kind = ModelKind::kFailure;
  double predicted_value = 0.0;
  /// Spread of the log-duration estimate; duration predictions only.
  std::optional<double> predicted_log_sd;
  std::string model_snapshot_id;
  Timestamp predicted_at{};
  std::optional<double> actual_value;
  std::optional<bool> anomaly;
  std::optional<double> anomaly_score;
  /// Feature values the prediction was made from; learners train on these.
  std::map<std::string, double> features;

  friend bool operator==(const PredictionRecord&, const PredictionRecord&) = default;
};

enum class EventSource { kWebhook, kBackfill, kScheduledRefresh };

std::string_view to_string(EventSource s);
std::optional<EventSource> event_source_from_string(std::string_view s);

struct DataIntegratedEvent {
  std::string event_id;
  Timestamp emitted_at{};
  std::vector<JobId> job_ids;
  EventSource source = EventSource::kWebhook;

  friend bool operator==(const DataIntegratedEvent&, const DataIntegratedEvent&) = default;
};

enum class Comparator { kGreater, kLess, kGreaterEqual, kLessEqual };

std::string_view to_string(Comparator c);
std::optional<Comparator> comparator_from_string(std::string_view s);
bool compare(Comparator c, double lhs, double rhs);

struct AlertRule {
  std::string rule_id;
  MetricName metric = MetricName::kFailureRatio;
  Scope scope;
  Interval interval = Interval::kDaily;
  Comparator comparator = Comparator::kGreater;
  double threshold = 0.0;
  /// "log" or an http(s) URL receiving the firing as JSON.
  std::string sink = "log";

  friend bool operator==(const AlertRule&, const AlertRule&) = default;
};

std::vector<std::string> validate_rule(const AlertRule& rule);

struct AlertFiring {
  std::string rule_id;
  MetricSnapshot snapshot;
  Timestamp fired_at{};
};

struct FeatureDelta {
  enum class Mode { kAdd, kOverride };
  Mode mode = Mode::kAdd;
  double value = 0.0;

  friend bool operator==(const FeatureDelta&, const FeatureDelta&) = default;
};

struct JobSampleSpec {
  Scope scope;
  /// Only jobs created within this many seconds before the newest sampled job.
  std::optional<double> window_seconds;
  std::size_t max_jobs = 200;

  friend bool operator==(const JobSampleSpec&, const JobSampleSpec&) = default;
};

struct Scenario {
  std::string scenario_id;
  std::string label;
  std::map<std::string, FeatureDelta> feature_deltas;
  JobSampleSpec sample;
};

struct SensitivityEntry {
  double baseline_value = 0.0;
  double scenario_value = 0.0;
  double delta = 0.0;
};

enum class WhatIfMetric { kFailureProbability, kFlakyProbability, kExpectedDuration };

std::string_view to_string(WhatIfMetric m);
std::optional<WhatIfMetric> whatif_metric_from_string(std::string_view s);

struct SensitivityReport {
  std::string scenario_id;
  std::string label;
  std::string model_snapshot_id;
  std::map<WhatIfMetric, SensitivityEntry> entries;
  std::size_t sample_size = 0;
};

enum class ActionKind { kEnableCache, kRetryJob, kSetCiVariable, kOpenAdvisory };
enum class ActionStatus { kProposed, kApproved, kApplied, kRejected, kFailed };

std::string_view to_string(ActionKind k);
std::string_view to_string(ActionStatus s);
std::optional<ActionKind> action_kind_from_string(std::string_view s);
std::optional<ActionStatus> action_status_from_string(std::string_view s);

/// proposed -> approved | rejected, approved -> applied | failed,
/// failed -> approved (re-approval).
bool is_legal_transition(ActionStatus from, ActionStatus to);

struct ActionTarget {
  ProjectId project_id = 0;
  std::optional<JobId> job_id;

  friend bool operator==(const ActionTarget&, const ActionTarget&) = default;
};

struct ImprovementAction {
  std::string action_id;
  ActionKind kind = ActionKind::kOpenAdvisory;
  ActionTarget target;
  std::map<std::string, std::string> payload;
  ActionStatus status = ActionStatus::kProposed;
  Timestamp proposed_at{};
  std::optional<std::string> writer_response_id;
  std::optional<std::string> error;
};

}  // namespace buildtwin
