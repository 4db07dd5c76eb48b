#include "buildtwin/ingest.hpp"

#include "buildtwin/errors.hpp"
#include "buildtwin/features.hpp"
#include "buildtwin/ids.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>

namespace buildtwin {

using nlohmann::json;

namespace {

[[noreturn]] void unparseable(const std::string& message, json details = nullptr) {
  throw Error(ErrorCode::kUnparseableRecord, message, std::move(details));
}

const json* field(const json& raw, std::initializer_list<const char*> path) {
  const json* cur = &raw;
  for (const char* key : path) {
    if (!cur->is_object()) return nullptr;
    auto it = cur->find(key);
    if (it == cur->end() || it->is_null()) return nullptr;
    cur = &*it;
  }
  return cur;
}

std::optional<std::int64_t> int_field(const json& raw, std::initializer_list<const char*> path) {
  const json* v = field(raw, path);
  if (!v) return std::nullopt;
  if (v->is_number_integer()) return v->get<std::int64_t>();
  if (v->is_number_float() && std::floor(v->get<double>()) == v->get<double>())
    return static_cast<std::int64_t>(v->get<double>());
  unparseable(std::string("field ") + *path.begin() + " is not an integer");
}

std::optional<std::string> string_field(const json& raw, std::initializer_list<const char*> path) {
  const json* v = field(raw, path);
  if (!v) return std::nullopt;
  if (!v->is_string()) unparseable(std::string("field ") + *path.begin() + " is not a string");
  return v->get<std::string>();
}

std::optional<Timestamp> time_field(const json& raw, const char* key, const char* alt) {
  auto s = string_field(raw, {key});
  if (!s) s = string_field(raw, {alt});
  if (!s) return std::nullopt;
  auto t = parse_timestamp(*s);
  if (!t) unparseable(std::string("unparseable timestamp in ") + key, {{"value", *s}});
  return t;
}

std::optional<double> seconds_field(const json& raw, const char* key, const char* alt) {
  const json* v = field(raw, {key});
  if (!v) v = field(raw, {alt});
  if (!v) return std::nullopt;
  if (!v->is_number() || !std::isfinite(v->get<double>()) || v->get<double>() < 0)
    unparseable(std::string("field ") + key + " must be a number ≥ 0");
  return v->get<double>();
}

template <typename T>
T required(std::optional<T> v, const char* name) {
  if (!v) unparseable(std::string("missing ") + name);
  return *v;
}

}  // namespace

std::optional<JobStatus> map_platform_status(std::string_view s) {
  if (s == "created") return JobStatus::kCreated;
  if (s == "pending" || s == "waiting_for_resource" || s == "preparing" || s == "scheduled")
    return JobStatus::kPending;
  if (s == "running") return JobStatus::kRunning;
  if (s == "success") return JobStatus::kSuccess;
  if (s == "failed") return JobStatus::kFailed;
  if (s == "canceled" || s == "canceling") return JobStatus::kCanceled;
  if (s == "skipped" || s == "manual") return JobStatus::kSkipped;
  return std::nullopt;
}

BuildJob preprocess(const RawJob& raw) {
  if (!raw.is_object()) unparseable("record is not an object");
  BuildJob job;
  auto id = int_field(raw, {"id"});
  if (!id) id = int_field(raw, {"build_id"});
  job.job_id = required(id, "job id");

  auto project = int_field(raw, {"pipeline", "project_id"});
  if (!project) project = int_field(raw, {"project_id"});
  job.project_id = required(project, "project id");

  auto pipeline = int_field(raw, {"pipeline", "id"});
  if (!pipeline) pipeline = int_field(raw, {"pipeline_id"});
  job.pipeline_id = required(pipeline, "pipeline id");

  auto name = string_field(raw, {"name"});
  if (!name) name = string_field(raw, {"build_name"});
  job.name = required(name, "name");

  auto status_text = string_field(raw, {"status"});
  if (!status_text) status_text = string_field(raw, {"build_status"});
  auto status = map_platform_status(required(status_text, "status"));
  if (!status) unparseable("unknown status " + *status_text, {{"status", *status_text}});
  job.status = *status;

  job.ref = string_field(raw, {"ref"}).value_or("");
  auto sha = string_field(raw, {"commit", "id"});
  if (!sha) sha = string_field(raw, {"sha"});
  if (!sha) sha = string_field(raw, {"pipeline", "sha"});
  job.commit_sha = sha.value_or("");

  job.created_at = required(time_field(raw, "created_at", "build_created_at"), "created_at");
  job.started_at = time_field(raw, "started_at", "build_started_at");
  job.finished_at = time_field(raw, "finished_at", "build_finished_at");
  job.queued_duration = seconds_field(raw, "queued_duration", "build_queued_duration");
  job.runner_id = int_field(raw, {"runner", "id"});

  if (is_completed(job.status)) {
    job.duration = seconds_field(raw, "duration", "build_duration");
    if (!job.duration && job.started_at && job.finished_at)
      job.duration = seconds_between(*job.started_at, *job.finished_at);
  }

  if (const json* f = field(raw, {"features"})) {
    if (!f->is_object()) unparseable("features must be an object");
    for (const auto& [k, v] : f->items()) {
      if (!v.is_number()) unparseable("feature " + k + " is not numeric");
      job.features[k] = v.get<double>();
    }
    if (auto unknown = unknown_features(job.features); !unknown.empty())
      throw Error(ErrorCode::kUnknownFeature, "unknown feature " + unknown.front(),
                  {{"unknown", unknown}});
  }

  if (auto violations = validate_job(job); !violations.empty())
    unparseable("record violates job invariants", {{"violations", violations}});
  return job;
}

std::map<JobId, std::optional<bool>> flaky_labels(std::vector<BuildJob> group) {
  std::sort(group.begin(), group.end(), [](const BuildJob& a, const BuildJob& b) {
    return std::tie(a.created_at, a.job_id) < std::tie(b.created_at, b.job_id);
  });
  std::map<JobId, std::optional<bool>> out;
  // Walk newest to oldest remembering whether a success was created later.
  // Jobs created at the same instant do not count as "later".
  bool success_later = false;
  std::size_t i = group.size();
  while (i > 0) {
    std::size_t j = i;
    bool success_here = false;
    while (j > 0 && group[j - 1].created_at == group[i - 1].created_at) {
      --j;
      if (group[j].status == JobStatus::kSuccess) success_here = true;
    }
    for (std::size_t k = j; k < i; ++k) {
      const auto& job = group[k];
      out[job.job_id] = job.status == JobStatus::kFailed ? std::optional<bool>(success_later)
                                                         : std::nullopt;
    }
    success_later = success_later || success_here;
    i = j;
  }
  return out;
}

std::vector<JobId> postprocess_flaky(Storage& store, ProjectId project, PipelineId pipeline) {
  std::map<std::string, std::vector<BuildJob>> groups;
  for (auto& job : store.pipeline_jobs(project, pipeline)) groups[job.name].push_back(std::move(job));
  std::vector<FlakyUpdate> updates;
  for (auto& [_, group] : groups) {
    std::map<JobId, std::optional<bool>> current;
    for (const auto& j : group) current[j.job_id] = j.flaky;
    for (const auto& [id, label] : flaky_labels(std::move(group)))
      if (current[id] != label) updates.push_back({id, label});
  }
  if (updates.empty()) return {};
  return store.set_flaky(updates);
}

ProjectIngestStats IngestSummary::totals() const {
  ProjectIngestStats t;
  for (const auto& [_, s] : projects) {
    t.fetched += s.fetched;
    t.stored += s.stored;
    t.ignored += s.ignored;
    t.quarantined += s.quarantined;
  }
  return t;
}

json IngestSummary::to_json() const {
  auto stats = [](const ProjectIngestStats& s) {
    return json{{"fetched", s.fetched}, {"stored", s.stored}, {"ignored", s.ignored},
                {"quarantined", s.quarantined}};
  };
  json out = stats(totals());
  out["events_published"] = events_published;
  out["projects"] = json::object();
  for (const auto& [id, s] : projects) out["projects"][std::to_string(id)] = stats(s);
  return out;
}

double BackoffPolicy::nominal(int attempt) const {
  return std::min(cap_seconds, base_seconds * std::pow(factor, attempt));
}

RefreshConfig refresh_config_from_env() {
  RefreshConfig cfg;
  const char* v = std::getenv("DATA_REFRESH_INTERVAL");
  if (!v || !*v) {
    cfg.enabled = false;
    return cfg;
  }
  char* end = nullptr;
  long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1)
    throw Error(ErrorCode::kBadConfig, "DATA_REFRESH_INTERVAL must be an integer ≥ 1",
                {{"value", v}});
  cfg.interval = std::chrono::seconds(n);
  return cfg;
}

Ingestor::Ingestor(Storage& store, MessageBus& bus, const Clock& clock)
    : store_(store), bus_(bus), clock_(clock) {
  sleeper_ = [](double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); };
}

void Ingestor::set_seed(std::uint64_t seed) {
  std::lock_guard lock(rng_mu_);
  rng_.seed(seed);
}

void Ingestor::pause(int attempt, double at_least) {
  const double d = backoff_.nominal(attempt);
  double delay;
  {
    std::lock_guard lock(rng_mu_);
    delay = d / 2 + std::uniform_real_distribution<double>(0.0, d / 2)(rng_);
  }
  delay = std::min(std::max(delay, at_least), backoff_.cap_seconds);
  spdlog::warn("actual twin call failed, retrying in {:.2f}s", delay);
  sleeper_(delay);
}

void Ingestor::quarantine(const json& raw, const std::string& reason) {
  store_.append_log(std::string(kDeadLetterLog),
                    {{"at", format_rfc3339(clock_.now())}, {"reason", reason}, {"raw", raw}});
}

BatchResult Ingestor::integrate(const std::vector<RawJob>& raws, EventSource source,
                                bool publish_unchanged) {
  BatchResult result;
  std::vector<BuildJob> jobs;
  jobs.reserve(raws.size());
  for (const auto& raw : raws) {
    try {
      jobs.push_back(preprocess(raw));
    } catch (const Error& e) {
      quarantine(raw, std::string(error_code_name(e.code())) + ": " + e.what());
      ++result.quarantined;
    }
  }

  std::lock_guard lock(integrate_mu_);
  result.upsert = store_.upsert_jobs(jobs);

  std::set<std::pair<ProjectId, PipelineId>> pipelines;
  std::set<JobId> ids;
  for (const auto& j : jobs) {
    pipelines.emplace(j.project_id, j.pipeline_id);
    ids.insert(j.job_id);
  }
  std::vector<JobId> relabeled;
  for (const auto& [project, pipeline] : pipelines) {
    auto changed = postprocess_flaky(store_, project, pipeline);
    relabeled.insert(relabeled.end(), changed.begin(), changed.end());
  }
  ids.insert(relabeled.begin(), relabeled.end());

  // Retention may already have evicted some of the batch.
  for (auto it = ids.begin(); it != ids.end();) {
    if (store_.get_job(*it)) ++it;
    else it = ids.erase(it);
  }
  result.job_ids.assign(ids.begin(), ids.end());

  const bool changed = !result.upsert.changed.empty() || !relabeled.empty();
  if (!result.job_ids.empty() && (publish_unchanged || changed)) {
    DataIntegratedEvent ev{default_ids().next("evt"), clock_.now(), result.job_ids, source};
    bus_.publish(kDataIntegratedTopic, ev);
    result.event_id = ev.event_id;
  }
  return result;
}

void Ingestor::sync_projects(ActualTwinReader& reader) {
  for (const auto& p : with_backoff([&] { return reader.list_projects(); }))
    if (!p.default_ref.empty() && store_.get_meta(default_ref_key(p.project_id)) != p.default_ref)
      store_.put_meta(default_ref_key(p.project_id), p.default_ref);
}

IngestSummary Ingestor::backfill(const BackfillConfig& cfg, ActualTwinReader& reader) {
  if (cfg.page_size < 1 || cfg.page_size > kMaxPerPage)
    throw Error(ErrorCode::kBadRequest, "page_size must be in [1, 100]");
  if (cfg.max_jobs_per_project && *cfg.max_jobs_per_project < 1)
    throw Error(ErrorCode::kBadRequest, "max_jobs_per_project must be ≥ 1");

  sync_projects(reader);
  std::vector<ProjectId> projects = cfg.project_ids;
  if (projects.empty())
    for (const auto& p : with_backoff([&] { return reader.list_projects(); })) projects.push_back(p.project_id);

  IngestSummary summary;
  for (ProjectId project : projects) {
    auto& stats = summary.projects[project];
    std::size_t remaining = cfg.max_jobs_per_project.value_or(SIZE_MAX);
    for (int page = 1; remaining > 0; ++page) {
      auto raws = with_backoff([&] { return reader.list_jobs(project, page, cfg.page_size, std::nullopt); });
      if (raws.empty()) break;
      const bool last = raws.size() < static_cast<std::size_t>(cfg.page_size);
      if (raws.size() > remaining) raws.resize(remaining);
      remaining -= raws.size();
      stats.fetched += raws.size();
      auto r = integrate(raws, EventSource::kBackfill);
      stats.stored += r.upsert.inserted + r.upsert.updated;
      stats.ignored += r.upsert.ignored;
      stats.quarantined += r.quarantined;
      if (r.event_id) ++summary.events_published;
      if (last) break;
    }
    spdlog::info("backfill project {}: fetched {}, stored {}, ignored {}, quarantined {}", project,
                 stats.fetched, stats.stored, stats.ignored, stats.quarantined);
  }
  return summary;
}

std::string Ingestor::hwm_key(ProjectId project) {
  return "ingest.hwm." + std::to_string(project);
}

IngestSummary Ingestor::refresh(const std::vector<ProjectId>& projects, ActualTwinReader& reader) {
  IngestSummary summary;
  for (ProjectId project : projects) {
    auto& stats = summary.projects[project];
    std::optional<Timestamp> mark;
    if (auto m = store_.get_meta(hwm_key(project))) mark = parse_timestamp(*m);

    std::vector<RawJob> delta;
    for (int page = 1;; ++page) {
      auto raws = with_backoff([&] { return reader.list_jobs(project, page, kMaxPerPage, mark); });
      delta.insert(delta.end(), raws.begin(), raws.end());
      if (raws.size() < static_cast<std::size_t>(kMaxPerPage)) break;
    }
    stats.fetched = delta.size();
    if (delta.empty()) continue;

    std::optional<Timestamp> newest = mark;
    for (const auto& raw : delta)
      if (auto u = raw_job_updated_at(raw); u && (!newest || *u > *newest)) newest = u;

    for (std::size_t i = 0; i < delta.size(); i += kMaxPerPage) {
      std::vector<RawJob> page(delta.begin() + static_cast<std::ptrdiff_t>(i),
                               delta.begin() + static_cast<std::ptrdiff_t>(std::min(delta.size(), i + kMaxPerPage)));
      auto r = integrate(page, EventSource::kScheduledRefresh);
      stats.stored += r.upsert.inserted + r.upsert.updated;
      stats.ignored += r.upsert.ignored;
      stats.quarantined += r.quarantined;
      if (r.event_id) ++summary.events_published;
    }
    if (newest && newest != mark) store_.put_meta(hwm_key(project), format_rfc3339(*newest));
  }
  return summary;
}

WebhookReceiver::WebhookReceiver(Ingestor& ingestor, ActualTwinReader& reader, std::string token)
    : ingestor_(ingestor), reader_(reader), token_(std::move(token)) {
  worker_ = std::thread([this] { run(); });
}

WebhookReceiver::~WebhookReceiver() { stop(); }

WebhookReceiver::Response WebhookReceiver::handle(const std::optional<std::string>& token,
                                                  std::string_view body) {
  // Authentication happens before the body is looked at.
  if (token_.empty() || !token || !constant_time_equals(token_, *token))
    return {401, Error(ErrorCode::kUnauthorized, "missing or invalid X-Gitlab-Token").envelope()};

  auto event = json::parse(body, nullptr, false);
  if (event.is_discarded() || !event.is_object())
    return {400, Error(ErrorCode::kBadRequest, "body is not a JSON object").envelope()};
  if (event.value("object_kind", "") != "build")
    return {400, Error(ErrorCode::kBadRequest, "object_kind must be \"build\"").envelope()};
  const auto id = event.find("build_id");
  const auto project = event.find("project_id");
  if (id == event.end() || !id->is_number_integer() || project == event.end() ||
      !project->is_number_integer())
    return {400, Error(ErrorCode::kBadRequest, "build_id and project_id must be integers").envelope()};

  const JobId job_id = id->get<JobId>();
  Work w{project->get<ProjectId>(), job_id, std::move(event)};
  {
    std::lock_guard lock(mu_);
    if (stopping_) return {503, Error(ErrorCode::kBusUnavailable, "shutting down").envelope()};
    queue_.push_back(std::move(w));
  }
  cv_.notify_one();
  ++accepted_;
  return {202, {{"status", "accepted"}, {"job_id", job_id}}};
}

void WebhookReceiver::run() {
  std::unique_lock lock(mu_);
  while (true) {
    cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
    if (queue_.empty()) return;
    Work w = std::move(queue_.front());
    queue_.pop_front();
    busy_ = true;
    lock.unlock();
    process(w);
    ++processed_;
    lock.lock();
    busy_ = false;
    idle_cv_.notify_all();
  }
}

void WebhookReceiver::process(const Work& w) {
  try {
    auto raw = ingestor_.with_backoff([&] { return reader_.get_job(w.project, w.job); });
    ingestor_.integrate({raw}, EventSource::kWebhook);
  } catch (const Error& e) {
    spdlog::warn("webhook job {} not integrated: {}", w.job, e.what());
    ingestor_.quarantine(w.event, std::string(error_code_name(e.code())) + ": " + e.what());
  } catch (const std::exception& e) {
    spdlog::error("webhook job {} failed: {}", w.job, e.what());
  }
}

bool WebhookReceiver::drain(std::chrono::milliseconds timeout) {
  std::unique_lock lock(mu_);
  return idle_cv_.wait_for(lock, timeout, [&] { return queue_.empty() && !busy_; });
}

void WebhookReceiver::stop() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

PeriodicTask::PeriodicTask(std::chrono::milliseconds interval, std::function<void()> fn) {
  thread_ = std::thread([this, interval, fn = std::move(fn)] {
    std::unique_lock lock(mu_);
    while (!cv_.wait_for(lock, interval, [&] { return stopping_; })) {
      lock.unlock();
      try {
        fn();
      } catch (const std::exception& e) {
        spdlog::error("periodic task failed: {}", e.what());
      }
      lock.lock();
    }
  });
}

PeriodicTask::~PeriodicTask() { stop(); }

void PeriodicTask::stop() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  if (thread_.joinable()) thread_.join();
}

}  // namespace buildtwin
