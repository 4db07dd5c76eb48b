#include "buildtwin/improve.hpp"

#include "buildtwin/codec.hpp"
#include "buildtwin/errors.hpp"
#include "buildtwin/ids.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace buildtwin {

using nlohmann::json;

namespace {

constexpr std::string_view kActionsLog = "actions";

std::string target_key(const ActionTarget& t) {
  std::string k = "project:" + std::to_string(t.project_id);
  if (t.job_id) k += "/job:" + std::to_string(*t.job_id);
  return k;
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

}  // namespace

ImprovementService::ImprovementService(Storage& store, const ModelRegistry& registry,
                                       const Clock& clock, ImproveOptions opts)
    : store_(store), registry_(registry), clock_(clock), opts_(std::move(opts)) {
  std::map<std::string, std::string> last_event;
  for (const auto& rec : store_.read_log(std::string(kActionsLog))) {
    auto a = rec.at("action").get<ImprovementAction>();
    if (!actions_.count(a.action_id)) order_.push_back(a.action_id);
    last_event[a.action_id] = rec.value("event", "");
    auto& slot = last_proposed_[{a.kind, target_key(a.target)}];
    slot = std::max(slot, a.proposed_at);
    actions_[a.action_id] = std::move(a);
  }
  std::lock_guard lock(mu_);
  for (const auto& [id, event] : last_event) {
    if (event != "apply_started") continue;
    // The writer may or may not have run; never call it again automatically.
    auto a = actions_[id];
    a.status = ActionStatus::kFailed;
    a.error = "apply interrupted before its outcome was recorded";
    actions_[id] = a;
    record_locked(a, "apply_interrupted");
  }
}

void ImprovementService::record_locked(const ImprovementAction& a, const char* event) {
  store_.append_log(std::string(kActionsLog),
                    {{"event", event}, {"at", format_rfc3339(clock_.now())}, {"action", a}});
}

std::optional<ImprovementAction> ImprovementService::make_locked(
    ActionKind kind, ActionTarget target, std::map<std::string, std::string> payload) {
  const auto now = clock_.now();
  const auto key = std::make_pair(kind, target_key(target));
  if (auto it = last_proposed_.find(key); it != last_proposed_.end() && now - it->second < opts_.cooldown)
    return std::nullopt;
  last_proposed_[key] = now;

  ImprovementAction a;
  a.action_id = default_ids().next("act");
  a.kind = kind;
  a.target = target;
  a.payload = std::move(payload);
  a.status = ActionStatus::kProposed;
  a.proposed_at = now;
  actions_[a.action_id] = a;
  order_.push_back(a.action_id);
  record_locked(a, "proposed");
  if (opts_.auto_approve.count(kind)) a = transition_locked(a, ActionStatus::kApproved);
  return a;
}

std::string ImprovementService::advisory(const PredictionRecord& r) const {
  std::vector<std::pair<std::string, double>> contributions;
  if (auto snap = registry_.snapshot(r.model_snapshot_id)) {
    if (const auto* m = std::get_if<LogisticModel>(&snap->params)) {
      try {
        const auto x = scale(to_vector(r.features));
        for (std::size_t i = 0; i < kFeatureCount; ++i)
          contributions.emplace_back(std::string(kFeatureNames[i]), m->weights[i + 1] * x[i + 1]);
      } catch (const Error&) {
      }
    }
  }
  std::stable_sort(contributions.begin(), contributions.end(),
                   [](const auto& a, const auto& b) { return std::abs(a.second) > std::abs(b.second); });
  if (contributions.size() > 3) contributions.resize(3);
  std::string top;
  for (const auto& [name, c] : contributions) {
    if (!top.empty()) top += ",";
    top += name + "=" + fmt_double(c);
  }
  return top;
}

std::vector<ImprovementAction> ImprovementService::propose(const PredictionRecord& r, const BuildJob& job) {
  std::lock_guard lock(mu_);
  std::optional<ImprovementAction> a;
  const ActionTarget project{job.project_id, std::nullopt};
  switch (r.model_kind) {
    case ModelKind::kDuration:
      if (!r.actual_value && r.predicted_value > opts_.long_build_seconds)
        a = make_locked(ActionKind::kEnableCache, project,
                        {{"key", opts_.cache_variable},
                         {"value", "true"},
                         {"job_id", std::to_string(job.job_id)},
                         {"job_name", job.name},
                         {"predicted_duration", fmt_double(r.predicted_value)}});
      break;
    case ModelKind::kFailure:
      if (!r.actual_value && r.predicted_value > opts_.failure_probability) {
        const auto top = advisory(r);
        const std::string content =
            "# Build failure advisory\n\njob " + job.name + " (" + std::to_string(job.job_id) + ") on " +
            job.ref + " has predicted failure probability " + fmt_double(r.predicted_value) +
            ".\n\nStrongest features: " + (top.empty() ? "none" : top) + "\n";
        a = make_locked(ActionKind::kOpenAdvisory, project,
                        {{"path", opts_.advisory_dir + "/" + job.name + ".md"},
                         {"content", content},
                         {"message", "Add build failure advisory for " + job.name},
                         {"job_id", std::to_string(job.job_id)},
                         {"failure_probability", fmt_double(r.predicted_value)},
                         {"top_features", top}});
      }
      break;
    case ModelKind::kFlaky:
      if (job.status == JobStatus::kFailed && r.predicted_value >= opts_.flaky_probability)
        a = make_locked(ActionKind::kRetryJob, {job.project_id, job.job_id},
                        {{"flaky_probability", fmt_double(r.predicted_value)}});
      break;
  }
  if (!a) return {};
  return {*a};
}

std::vector<ImprovementAction> ImprovementService::propose(const AlertFiring& firing, const AlertRule& rule) {
  std::vector<ProjectId> projects = rule.scope.projects;
  if (rule.scope.all) projects = store_.project_ids();
  std::lock_guard lock(mu_);
  std::vector<ImprovementAction> out;
  const std::string metric(to_string(rule.metric));
  const auto value = firing.snapshot.value(rule.metric);
  for (ProjectId p : projects) {
    std::optional<ImprovementAction> a;
    if (rule.metric == MetricName::kMeanDuration) {
      a = make_locked(ActionKind::kEnableCache, {p, std::nullopt},
                      {{"key", opts_.cache_variable}, {"value", "true"}, {"alert_rule", rule.rule_id}});
    } else if (rule.metric == MetricName::kFailureRatio || rule.metric == MetricName::kFlakyFailureRatio) {
      const std::string content = "# Build health advisory\n\n" + metric + " was " +
                                  fmt_double(value.value_or(0)) + " in the window starting " +
                                  format_rfc3339(firing.snapshot.window_start) + " (threshold " +
                                  fmt_double(rule.threshold) + ").\n";
      a = make_locked(ActionKind::kOpenAdvisory, {p, std::nullopt},
                      {{"path", opts_.advisory_dir + "/" + metric + ".md"},
                       {"content", content},
                       {"message", "Add " + metric + " advisory"},
                       {"alert_rule", rule.rule_id}});
    }
    if (a) out.push_back(*a);
  }
  return out;
}

ImprovementAction ImprovementService::transition_locked(ImprovementAction a, ActionStatus to) {
  if (!is_legal_transition(a.status, to))
    throw Error(ErrorCode::kIllegalTransition,
                "cannot move action from " + std::string(to_string(a.status)) + " to " + std::string(to_string(to)),
                {{"action_id", a.action_id}, {"from", to_string(a.status)}, {"to", to_string(to)}});
  a.status = to;
  if (to == ActionStatus::kApproved) a.error.reset();
  actions_[a.action_id] = a;
  record_locked(a, std::string(to_string(to)).c_str());
  return a;
}

static ImprovementAction find_or_throw(const std::map<std::string, ImprovementAction>& m, const std::string& id) {
  auto it = m.find(id);
  if (it == m.end()) throw Error(ErrorCode::kNotFound, "no action " + id, {{"action_id", id}});
  return it->second;
}

ImprovementAction ImprovementService::approve(const std::string& action_id) {
  std::lock_guard lock(mu_);
  if (applying_.count(action_id))
    throw Error(ErrorCode::kIllegalTransition, "action is being applied", {{"action_id", action_id}});
  auto a = find_or_throw(actions_, action_id);
  // A repeated approve is a no-op rather than an error.
  if (a.status == ActionStatus::kApproved) return a;
  return transition_locked(std::move(a), ActionStatus::kApproved);
}

ImprovementAction ImprovementService::reject(const std::string& action_id) {
  std::lock_guard lock(mu_);
  return transition_locked(find_or_throw(actions_, action_id), ActionStatus::kRejected);
}

std::mutex& ImprovementService::project_lock(ProjectId project) {
  std::lock_guard lock(mu_);
  auto& slot = project_locks_[project];
  if (!slot) slot = std::make_unique<std::mutex>();
  return *slot;
}

ImprovementAction ImprovementService::apply(const std::string& action_id, ActualTwinWriter& writer) {
  ImprovementAction a;
  {
    std::lock_guard lock(mu_);
    a = find_or_throw(actions_, action_id);
  }
  std::lock_guard serial(project_lock(a.target.project_id));
  {
    std::lock_guard lock(mu_);
    a = find_or_throw(actions_, action_id);
    if (a.status != ActionStatus::kApproved || applying_.count(action_id))
      throw Error(ErrorCode::kIllegalTransition,
                  "only approved actions can be applied (status " + std::string(to_string(a.status)) + ")",
                  {{"action_id", action_id}, {"from", to_string(a.status)}, {"to", "applied"}});
    applying_.insert(action_id);
    record_locked(a, "apply_started");
  }

  std::optional<WriteResult> result;
  std::string error;
  try {
    const auto& p = a.payload;
    auto get = [&](const char* k, const std::string& def = {}) {
      auto it = p.find(k);
      return it == p.end() ? def : it->second;
    };
    switch (a.kind) {
      case ActionKind::kEnableCache:
        result = writer.set_ci_variable(a.target.project_id, get("key", opts_.cache_variable), get("value", "true"));
        break;
      case ActionKind::kSetCiVariable:
        if (get("key").empty()) throw Error(ErrorCode::kWriterRejected, "payload has no key");
        result = writer.set_ci_variable(a.target.project_id, get("key"), get("value"));
        break;
      case ActionKind::kRetryJob:
        if (!a.target.job_id) throw Error(ErrorCode::kWriterRejected, "retry_job target has no job");
        result = writer.retry_job(a.target.project_id, *a.target.job_id);
        break;
      case ActionKind::kOpenAdvisory:
        result = writer.upsert_file(a.target.project_id, get("path", opts_.advisory_dir + "/advisory.md"),
                                    get("content"), get("message", "Add build advisory"));
        break;
    }
  } catch (const std::exception& e) {
    error = e.what();
  }

  std::lock_guard lock(mu_);
  applying_.erase(action_id);
  if (result) {
    a.writer_response_id = result->response_id;
    return transition_locked(a, ActionStatus::kApplied);
  }
  spdlog::warn("action {} failed: {}", action_id, error);
  a.error = error;
  return transition_locked(a, ActionStatus::kFailed);
}

std::optional<ImprovementAction> ImprovementService::get(const std::string& action_id) const {
  std::lock_guard lock(mu_);
  auto it = actions_.find(action_id);
  if (it == actions_.end()) return std::nullopt;
  return it->second;
}

std::vector<ImprovementAction> ImprovementService::list(std::optional<ActionStatus> status) const {
  std::lock_guard lock(mu_);
  std::vector<ImprovementAction> out;
  for (const auto& id : order_) {
    const auto& a = actions_.at(id);
    if (!status || a.status == *status) out.push_back(a);
  }
  return out;
}

}  // namespace buildtwin
