#include "buildtwin/types.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>

namespace buildtwin {

namespace {

template <typename E, std::size_t N>
std::optional<E> lookup(const std::array<std::pair<E, std::string_view>, N>& table,
                        std::string_view s) {
  for (const auto& [e, name] : table)
    if (name == s) return e;
  return std::nullopt;
}

template <typename E, std::size_t N>
std::string_view name_of(const std::array<std::pair<E, std::string_view>, N>& table, E e) {
  for (const auto& [v, name] : table)
    if (v == e) return name;
  return "unknown";
}

constexpr std::array<std::pair<JobStatus, std::string_view>, 7> kStatusNames{{
    {JobStatus::kCreated, "created"},
    {JobStatus::kPending, "pending"},
    {JobStatus::kRunning, "running"},
    {JobStatus::kSuccess, "success"},
    {JobStatus::kFailed, "failed"},
    {JobStatus::kCanceled, "canceled"},
    {JobStatus::kSkipped, "skipped"},
}};

constexpr std::array<std::pair<Interval, std::string_view>, 5> kIntervalNames{{
    {Interval::kHourly, "hourly"},
    {Interval::kDaily, "daily"},
    {Interval::kWeekly, "weekly"},
    {Interval::kMonthly, "monthly"},
    {Interval::kYearly, "yearly"},
}};

constexpr std::array<std::pair<MetricName, std::string_view>, 4> kMetricNames{{
    {MetricName::kExecutionsFrequency, "executions_frequency"},
    {MetricName::kMeanDuration, "mean_duration"},
    {MetricName::kFailureRatio, "failure_ratio"},
    {MetricName::kFlakyFailureRatio, "flaky_failure_ratio"},
}};

constexpr std::array<std::pair<ModelKind, std::string_view>, 3> kModelKindNames{{
    {ModelKind::kDuration, "duration"},
    {ModelKind::kFailure, "failure"},
    {ModelKind::kFlaky, "flaky"},
}};

constexpr std::array<std::pair<EventSource, std::string_view>, 3> kSourceNames{{
    {EventSource::kWebhook, "webhook"},
    {EventSource::kBackfill, "backfill"},
    {EventSource::kScheduledRefresh, "scheduled_refresh"},
}};

constexpr std::array<std::pair<Comparator, std::string_view>, 4> kComparatorNames{{
    {Comparator::kGreater, ">"},
    {Comparator::kLess, "<"},
    {Comparator::kGreaterEqual, ">="},
    {Comparator::kLessEqual, "<="},
}};

constexpr std::array<std::pair<WhatIfMetric, std::string_view>, 3> kWhatIfNames{{
    {WhatIfMetric::kFailureProbability, "failure_probability"},
    {WhatIfMetric::kFlakyProbability, "flaky_probability"},
    {WhatIfMetric::kExpectedDuration, "expected_duration"},
}};

constexpr std::array<std::pair<ActionKind, std::string_view>, 4> kActionKindNames{{
    {ActionKind::kEnableCache, "enable_cache"},
    {ActionKind::kRetryJob, "retry_job"},
    {ActionKind::kSetCiVariable, "set_ci_variable"},
    {ActionKind::kOpenAdvisory, "open_advisory"},
}};

constexpr std::array<std::pair<ActionStatus, std::string_view>, 5> kActionStatusNames{{
    {ActionStatus::kProposed, "proposed"},
    {ActionStatus::kApproved, "approved"},
    {ActionStatus::kApplied, "applied"},
    {ActionStatus::kRejected, "rejected"},
    {ActionStatus::kFailed, "failed"},
}};

}  // namespace

std::string_view to_string(JobStatus s) { return name_of(kStatusNames, s); }
std::optional<JobStatus> job_status_from_string(std::string_view s) {
  return lookup(kStatusNames, s);
}

bool is_terminal(JobStatus s) {
  return s == JobStatus::kSuccess || s == JobStatus::kFailed || s == JobStatus::kCanceled ||
         s == JobStatus::kSkipped;
}

bool is_completed(JobStatus s) { return s == JobStatus::kSuccess || s == JobStatus::kFailed; }

int status_rank(JobStatus s) {
  switch (s) {
    case JobStatus::kCreated: return 0;
    case JobStatus::kPending: return 1;
    case JobStatus::kRunning: return 2;
    default: return 3;
  }
}

std::vector<std::string> validate_job(const BuildJob& job) {
  std::vector<std::string> v;
  if (job.job_id <= 0) v.emplace_back("job_id > 0");
  if (job.project_id <= 0) v.emplace_back("project_id > 0");
  if (job.name.empty()) v.emplace_back("name non-empty");
  if (job.started_at && *job.started_at < job.created_at) v.emplace_back("started_at ≥ created_at");
  if (job.started_at && job.finished_at && *job.finished_at < *job.started_at)
    v.emplace_back("finished_at ≥ started_at");
  if (!job.started_at && job.finished_at && *job.finished_at < job.created_at)
    v.emplace_back("finished_at ≥ created_at");
  if (job.queued_duration && *job.queued_duration < 0) v.emplace_back("queued_duration ≥ 0");
  if (job.duration && *job.duration < 0) v.emplace_back("duration ≥ 0");
  if (job.duration && !is_completed(job.status)) v.emplace_back("duration ⇒ success|failed");
  if (job.flaky.value_or(false) && job.status != JobStatus::kFailed)
    v.emplace_back("flaky ⇒ failed");
  if (job.flaky == false && job.status != JobStatus::kFailed)
    v.emplace_back("flaky set only on failed jobs");
  for (const auto& [k, x] : job.features)
    if (!std::isfinite(x)) v.emplace_back("feature " + k + " finite");
  return v;
}

std::string_view to_string(Interval i) { return name_of(kIntervalNames, i); }
std::optional<Interval> interval_from_string(std::string_view s) {
  return lookup(kIntervalNames, s);
}

bool Scope::contains(ProjectId id) const {
  return all || std::find(projects.begin(), projects.end(), id) != projects.end();
}

std::string Scope::key() const {
  if (all) return "ALL";
  auto ids = projects;
  std::sort(ids.begin(), ids.end());
  std::string k;
  for (auto id : ids) {
    if (!k.empty()) k += ',';
    k += std::to_string(id);
  }
  return k;
}

std::string_view to_string(MetricName m) { return name_of(kMetricNames, m); }
std::optional<MetricName> metric_from_string(std::string_view s) {
  return lookup(kMetricNames, s);
}
bool is_ratio_metric(MetricName m) {
  return m == MetricName::kFailureRatio || m == MetricName::kFlakyFailureRatio;
}

std::optional<double> MetricSnapshot::value(MetricName m) const {
  switch (m) {
    case MetricName::kExecutionsFrequency: return static_cast<double>(executions_frequency);
    case MetricName::kMeanDuration: return mean_duration;
    case MetricName::kFailureRatio: return failure_ratio;
    case MetricName::kFlakyFailureRatio: return flaky_failure_ratio;
  }
  return std::nullopt;
}

std::string_view to_string(ModelKind k) { return name_of(kModelKindNames, k); }
std::optional<ModelKind> model_kind_from_string(std::string_view s) {
  return lookup(kModelKindNames, s);
}

std::string_view to_string(EventSource s) { return name_of(kSourceNames, s); }
std::optional<EventSource> event_source_from_string(std::string_view s) {
  return lookup(kSourceNames, s);
}

std::string_view to_string(Comparator c) { return name_of(kComparatorNames, c); }
std::optional<Comparator> comparator_from_string(std::string_view s) {
  if (s == "≥") return Comparator::kGreaterEqual;
  if (s == "≤") return Comparator::kLessEqual;
  return lookup(kComparatorNames, s);
}

bool compare(Comparator c, double lhs, double rhs) {
  switch (c) {
    case Comparator::kGreater: return lhs > rhs;
    case Comparator::kLess: return lhs < rhs;
    case Comparator::kGreaterEqual: return lhs >= rhs;
    case Comparator::kLessEqual: return lhs <= rhs;
  }
  return false;
}

std::vector<std::string> validate_rule(const AlertRule& rule) {
  std::vector<std::string> v;
  if (rule.rule_id.empty()) v.emplace_back("rule_id non-empty");
  if (!(rule.threshold >= 0)) v.emplace_back("threshold ≥ 0");
  if (is_ratio_metric(rule.metric) && rule.threshold > 1) v.emplace_back("ratio threshold ≤ 1");
  if (rule.sink != "log" && rule.sink.rfind("http://", 0) != 0 &&
      rule.sink.rfind("https://", 0) != 0)
    v.emplace_back("sink is log or a webhook URL");
  return v;
}

std::string_view to_string(WhatIfMetric m) { return name_of(kWhatIfNames, m); }
std::optional<WhatIfMetric> whatif_metric_from_string(std::string_view s) {
  return lookup(kWhatIfNames, s);
}

std::string_view to_string(ActionKind k) { return name_of(kActionKindNames, k); }
std::string_view to_string(ActionStatus s) { return name_of(kActionStatusNames, s); }
std::optional<ActionKind> action_kind_from_string(std::string_view s) {
  return lookup(kActionKindNames, s);
}
std::optional<ActionStatus> action_status_from_string(std::string_view s) {
  return lookup(kActionStatusNames, s);
}

bool is_legal_transition(ActionStatus from, ActionStatus to) {
  switch (from) {
    case ActionStatus::kProposed:
      return to == ActionStatus::kApproved || to == ActionStatus::kRejected;
    case ActionStatus::kApproved:
      return to == ActionStatus::kApplied || to == ActionStatus::kFailed;
    case ActionStatus::kFailed:
      // Re-approval is the only way to retry a failed apply.
      return to == ActionStatus::kApproved;
    default: return false;
  }
}

}  // namespace buildtwin
