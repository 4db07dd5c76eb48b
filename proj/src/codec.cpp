#include "buildtwin/codec.hpp"

namespace buildtwin {

namespace {

[[noreturn]] void bad(const std::string& what) {
  throw Error(ErrorCode::kBadRequest, what);
}

template <typename T>
void put_opt(json& j, const char* key, const std::optional<T>& v) {
  if (v) j[key] = *v;
}

void put_opt_ts(json& j, const char* key, const std::optional<Timestamp>& v) {
  if (v) j[key] = format_rfc3339(*v);
}

template <typename T>
std::optional<T> get_opt(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<T>();
}

std::optional<Timestamp> get_opt_ts(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return timestamp_from_json(*it);
}

template <typename E, typename F>
E parse_enum(const json& j, F from_string, const char* what) {
  auto e = from_string(j.get<std::string>());
  if (!e) bad(std::string("unknown ") + what + ": " + j.get<std::string>());
  return *e;
}

}  // namespace

json timestamp_json(Timestamp t) { return format_rfc3339(t); }

Timestamp timestamp_from_json(const json& j) {
  auto t = parse_timestamp(j.get<std::string>());
  if (!t) bad("invalid timestamp: " + j.get<std::string>());
  return *t;
}

void to_json(json& j, const BuildJob& v) {
  j = json{{"job_id", v.job_id},
           {"project_id", v.project_id},
           {"pipeline_id", v.pipeline_id},
           {"name", v.name},
           {"ref", v.ref},
           {"commit_sha", v.commit_sha},
           {"status", to_string(v.status)},
           {"created_at", format_rfc3339(v.created_at)}};
  put_opt_ts(j, "started_at", v.started_at);
  put_opt_ts(j, "finished_at", v.finished_at);
  put_opt(j, "queued_duration", v.queued_duration);
  put_opt(j, "duration", v.duration);
  put_opt(j, "runner_id", v.runner_id);
  put_opt(j, "flaky", v.flaky);
  j["features"] = v.features;
}

void from_json(const json& j, BuildJob& v) {
  v.job_id = j.at("job_id").get<JobId>();
  v.project_id = j.at("project_id").get<ProjectId>();
  v.pipeline_id = j.at("pipeline_id").get<PipelineId>();
  v.name = j.at("name").get<std::string>();
  v.ref = j.value("ref", "");
  v.commit_sha = j.value("commit_sha", "");
  v.status = parse_enum<JobStatus>(j.at("status"), job_status_from_string, "status");
  v.created_at = timestamp_from_json(j.at("created_at"));
  v.started_at = get_opt_ts(j, "started_at");
  v.finished_at = get_opt_ts(j, "finished_at");
  v.queued_duration = get_opt<double>(j, "queued_duration");
  v.duration = get_opt<double>(j, "duration");
  v.runner_id = get_opt<std::int64_t>(j, "runner_id");
  v.flaky = get_opt<bool>(j, "flaky");
  v.features = j.value("features", std::map<std::string, double>{});
}

void to_json(json& j, const Project& v) {
  j = json{{"project_id", v.project_id}, {"path", v.path}, {"default_ref", v.default_ref}};
}

void from_json(const json& j, Project& v) {
  v.project_id = j.at("project_id").get<ProjectId>();
  v.path = j.value("path", "");
  v.default_ref = j.value("default_ref", "main");
}

void to_json(json& j, const Scope& v) {
  if (v.all)
    j = "ALL";
  else
    j = v.projects;
}

void from_json(const json& j, Scope& v) {
  if (j.is_string()) {
    if (j.get<std::string>() != "ALL") bad("scope must be \"ALL\" or a list of project ids");
    v = Scope::everything();
  } else if (j.is_array()) {
    v = Scope::of(j.get<std::vector<ProjectId>>());
  } else if (j.is_number_integer()) {
    v = Scope::of({j.get<ProjectId>()});
  } else {
    bad("scope must be \"ALL\" or a list of project ids");
  }
}

void to_json(json& j, const MetricSnapshot& v) {
  j = json{{"scope", v.scope},
           {"window_start", format_rfc3339(v.window_start)},
           {"window_end", format_rfc3339(v.window_end)},
           {"interval", to_string(v.interval)},
           {"executions_frequency", v.executions_frequency}};
  put_opt(j, "mean_duration", v.mean_duration);
  put_opt(j, "failure_ratio", v.failure_ratio);
  put_opt(j, "flaky_failure_ratio", v.flaky_failure_ratio);
}

void from_json(const json& j, MetricSnapshot& v) {
  v.scope = j.at("scope").get<Scope>();
  v.window_start = timestamp_from_json(j.at("window_start"));
  v.window_end = timestamp_from_json(j.at("window_end"));
  v.interval = parse_enum<Interval>(j.at("interval"), interval_from_string, "interval");
  v.executions_frequency = j.at("executions_frequency").get<std::int64_t>();
  v.mean_duration = get_opt<double>(j, "mean_duration");
  v.failure_ratio = get_opt<double>(j, "failure_ratio");
  v.flaky_failure_ratio = get_opt<double>(j, "flaky_failure_ratio");
}

void to_json(json& j, const PredictionRecord& v) {
  j = json{{"prediction_id", v.prediction_id},
           {"job_id", v.job_id},
           {"model_kind", to_string(v.model_kind)},
           {"predicted_value", v.predicted_value},
           {"model_snapshot_id", v.model_snapshot_id},
           {"predicted_at", format_rfc3339(v.predicted_at)}};
  put_opt(j, "predicted_log_sd", v.predicted_log_sd);
  put_opt(j, "actual_value", v.actual_value);
  put_opt(j, "anomaly", v.anomaly);
  put_opt(j, "anomaly_score", v.anomaly_score);
  if (!v.features.empty()) j["features"] = v.features;
}

void from_json(const json& j, PredictionRecord& v) {
  v.prediction_id = j.at("prediction_id").get<std::string>();
  v.job_id = j.at("job_id").get<JobId>();
  v.model_kind = parse_enum<ModelKind>(j.at("model_kind"), model_kind_from_string, "model_kind");
  v.predicted_value = j.at("predicted_value").get<double>();
  v.model_snapshot_id = j.value("model_snapshot_id", "");
  v.predicted_at = timestamp_from_json(j.at("predicted_at"));
  v.predicted_log_sd = get_opt<double>(j, "predicted_log_sd");
  v.actual_value = get_opt<double>(j, "actual_value");
  v.anomaly = get_opt<bool>(j, "anomaly");
  v.anomaly_score = get_opt<double>(j, "anomaly_score");
  if (j.contains("features")) v.features = j.at("features").get<std::map<std::string, double>>();
}

void to_json(json& j, const DataIntegratedEvent& v) {
  j = json{{"event_id", v.event_id},
           {"emitted_at", format_rfc3339(v.emitted_at)},
           {"job_ids", v.job_ids},
           {"source", to_string(v.source)}};
}

void from_json(const json& j, DataIntegratedEvent& v) {
  v.event_id = j.at("event_id").get<std::string>();
  v.emitted_at = timestamp_from_json(j.at("emitted_at"));
  v.job_ids = j.at("job_ids").get<std::vector<JobId>>();
  v.source = parse_enum<EventSource>(j.at("source"), event_source_from_string, "source");
}

void to_json(json& j, const AlertRule& v) {
  j = json{{"rule_id", v.rule_id},
           {"metric", to_string(v.metric)},
           {"scope", v.scope},
           {"interval", to_string(v.interval)},
           {"comparator", to_string(v.comparator)},
           {"threshold", v.threshold},
           {"sink", v.sink}};
}

void from_json(const json& j, AlertRule& v) {
  v.rule_id = j.value("rule_id", "");
  v.metric = parse_enum<MetricName>(j.at("metric"), metric_from_string, "metric");
  v.scope = j.contains("scope") ? j.at("scope").get<Scope>() : Scope::everything();
  v.interval = parse_enum<Interval>(j.at("interval"), interval_from_string, "interval");
  v.comparator = parse_enum<Comparator>(j.at("comparator"), comparator_from_string, "comparator");
  v.threshold = j.at("threshold").get<double>();
  v.sink = j.value("sink", "log");
}

void to_json(json& j, const AlertFiring& v) {
  j = json{{"rule_id", v.rule_id},
           {"snapshot", v.snapshot},
           {"fired_at", format_rfc3339(v.fired_at)}};
}

void to_json(json& j, const Scenario& v) {
  json deltas = json::object();
  for (const auto& [name, d] : v.feature_deltas) {
    if (d.mode == FeatureDelta::Mode::kAdd)
      deltas[name] = {{"add", d.value}};
    else
      deltas[name] = {{"set", d.value}};
  }
  json sample{{"scope", v.sample.scope}, {"max_jobs", v.sample.max_jobs}};
  put_opt(sample, "window_seconds", v.sample.window_seconds);
  j = json{{"scenario_id", v.scenario_id},
           {"label", v.label},
           {"feature_deltas", deltas},
           {"job_sample_spec", sample}};
}

void from_json(const json& j, Scenario& v) {
  v.scenario_id = j.value("scenario_id", "");
  v.label = j.value("label", v.scenario_id);
  v.feature_deltas.clear();
  if (auto it = j.find("feature_deltas"); it != j.end()) {
    for (const auto& [name, d] : it->items()) {
      FeatureDelta fd;
      if (d.is_number()) {
        fd.value = d.get<double>();
      } else if (d.contains("add")) {
        fd.value = d.at("add").get<double>();
      } else if (d.contains("set")) {
        fd.mode = FeatureDelta::Mode::kOverride;
        fd.value = d.at("set").get<double>();
      } else {
        bad("feature delta for " + name + " needs \"add\" or \"set\"");
      }
      v.feature_deltas[name] = fd;
    }
  }
  v.sample = JobSampleSpec{};
  if (auto it = j.find("job_sample_spec"); it != j.end()) {
    if (it->contains("scope")) v.sample.scope = it->at("scope").get<Scope>();
    v.sample.window_seconds = get_opt<double>(*it, "window_seconds");
    v.sample.max_jobs = it->value("max_jobs", std::size_t{200});
  }
}

void to_json(json& j, const SensitivityReport& v) {
  json metrics = json::object();
  for (const auto& [m, e] : v.entries)
    metrics[std::string(to_string(m))] = {
        {"baseline_value", e.baseline_value}, {"scenario_value", e.scenario_value}, {"delta", e.delta}};
  j = json{{"scenario_id", v.scenario_id},
           {"label", v.label},
           {"model_snapshot_id", v.model_snapshot_id},
           {"metrics", metrics},
           {"sample_size", v.sample_size}};
}

void to_json(json& j, const ImprovementAction& v) {
  json target{{"project_id", v.target.project_id}};
  put_opt(target, "job_id", v.target.job_id);
  j = json{{"action_id", v.action_id},
           {"kind", to_string(v.kind)},
           {"target", target},
           {"payload", v.payload},
           {"status", to_string(v.status)},
           {"proposed_at", format_rfc3339(v.proposed_at)}};
  put_opt(j, "writer_response_id", v.writer_response_id);
  put_opt(j, "error", v.error);
}

void from_json(const json& j, ImprovementAction& v) {
  v.action_id = j.at("action_id").get<std::string>();
  v.kind = parse_enum<ActionKind>(j.at("kind"), action_kind_from_string, "kind");
  v.target.project_id = j.at("target").at("project_id").get<ProjectId>();
  v.target.job_id = get_opt<JobId>(j.at("target"), "job_id");
  v.payload = j.value("payload", std::map<std::string, std::string>{});
  v.status = parse_enum<ActionStatus>(j.at("status"), action_status_from_string, "status");
  v.proposed_at = timestamp_from_json(j.at("proposed_at"));
  v.writer_response_id = get_opt<std::string>(j, "writer_response_id");
  v.error = get_opt<std::string>(j, "error");
}

}  // namespace buildtwin
