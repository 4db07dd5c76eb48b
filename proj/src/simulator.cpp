#include "buildtwin/simulator.hpp"

#include "buildtwin/errors.hpp"

#include <toml.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace buildtwin {

namespace {

std::string webhook_time(Timestamp t) {
  // GitLab job events use "2024-07-01 10:00:00 UTC".
  auto s = format_rfc3339(std::chrono::floor<std::chrono::seconds>(t));
  s[10] = ' ';
  s.pop_back();
  return s + " UTC";
}

std::string hex_sha(std::mt19937_64& rng) {
  char buf[41];
  for (int i = 0; i < 40; i += 16) {
    std::uint64_t v = rng();
    std::snprintf(buf + i, sizeof buf - static_cast<std::size_t>(i), "%016llx",
                  static_cast<unsigned long long>(v));
  }
  buf[40] = 0;
  return buf;
}

Millis to_millis(double seconds) { return Millis{static_cast<std::int64_t>(std::llround(seconds * 1000.0))}; }

/// Per-original failure and transient-given-failure probabilities that make
/// the observed job-level ratios equal (p_fail, p_flaky).
std::pair<double, double> calibrate(double p_fail, double p_flaky, RetryPolicy retry) {
  if (retry == RetryPolicy::kNone) return {p_fail, 0.0};
  const double b = 2.0 * p_flaky / (1.0 + p_flaky);
  const double k = p_fail * (1.0 + p_flaky);
  return {k / (2.0 - k), b};
}

}  // namespace

void SimConfig::validate() const {
  auto bad = [](const std::string& m) { throw Error(ErrorCode::kInvalidConfig, m); };
  if (projects.empty()) bad("simulator needs at least one project");
  std::vector<ProjectId> ids;
  for (const auto& p : projects) {
    if (p.project_id <= 0) bad("project_id must be positive");
    if (std::find(ids.begin(), ids.end(), p.project_id) != ids.end()) bad("duplicate project_id");
    ids.push_back(p.project_id);
    if (p.job_names.empty()) bad("project needs at least one job name");
    if (!(p.pipelines_per_hour > 0)) bad("pipelines_per_hour must be positive");
    if (!(p.duration_sigma >= 0) || !std::isfinite(p.duration_mu)) bad("invalid duration distribution");
    if (!(p.mean_queued_seconds >= 0)) bad("mean_queued_seconds must be ≥ 0");
    if (!(p.p_fail >= 0 && p.p_fail <= 1)) bad("p_fail must be in [0,1]");
    if (!(p.p_flaky >= 0 && p.p_flaky <= 1)) bad("p_flaky must be in [0,1]");
    if (p.retry == RetryPolicy::kNone && p.p_flaky > 0)
      bad("p_flaky > 0 needs a retry policy; flakiness is only observable through reruns");
    if (p.retry == RetryPolicy::kRetryFailedOnce && p.p_fail * (1 + p.p_flaky) > 1)
      bad("p_fail * (1 + p_flaky) must be ≤ 1 under retry_failed_once");
    if (!(p.p_default_ref >= 0 && p.p_default_ref <= 1)) bad("p_default_ref must be in [0,1]");
    for (const auto& r : p.regimes) {
      if (!(r.duration_factor > 0)) bad("regime duration_factor must be positive");
      if (r.p_fail && !(*r.p_fail >= 0 && *r.p_fail <= 1)) bad("regime p_fail must be in [0,1]");
    }
  }
}

std::optional<double> parse_duration_seconds(std::string_view text) {
  if (text.empty()) return std::nullopt;
  double scale = 1.0;
  char unit = text.back();
  if (!std::isdigit(static_cast<unsigned char>(unit))) {
    switch (unit) {
      case 's': scale = 1; break;
      case 'm': scale = 60; break;
      case 'h': scale = 3600; break;
      case 'd': scale = 86400; break;
      case 'w': scale = 7 * 86400; break;
      default: return std::nullopt;
    }
    text.remove_suffix(1);
  }
  if (text.empty()) return std::nullopt;
  std::string s(text);
  char* end = nullptr;
  double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !(v >= 0)) return std::nullopt;
  return v * scale;
}

SimConfig parse_sim_config(std::string_view toml_text) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("simulator config: ") + std::string(e.description()));
  }
  auto ts = [](const toml::node_view<toml::node>& n, Timestamp fallback) {
    if (!n) return fallback;
    auto s = n.value<std::string>();
    auto t = s ? parse_timestamp(*s) : std::nullopt;
    if (!t) throw Error(ErrorCode::kInvalidConfig, "invalid timestamp in simulator config");
    return *t;
  };
  SimConfig cfg;
  cfg.seed = static_cast<std::uint64_t>(root["seed"].value_or<std::int64_t>(1));
  cfg.start = ts(root["start"], cfg.start);
  cfg.webhook_token = root["webhook_token"].value_or(cfg.webhook_token);
  if (auto* arr = root["projects"].as_array()) {
    cfg.projects.clear();
    for (auto& node : *arr) {
      auto* t = node.as_table();
      if (!t) throw Error(ErrorCode::kInvalidConfig, "projects must be tables");
      toml::node_view<toml::node> v{t};
      SimProject p;
      p.project_id = v["project_id"].value_or<std::int64_t>(static_cast<std::int64_t>(cfg.projects.size() + 1));
      p.path = v["path"].value_or("group/project-" + std::to_string(p.project_id));
      p.default_ref = v["default_ref"].value_or(p.default_ref);
      if (auto* names = v["job_names"].as_array()) {
        p.job_names.clear();
        for (auto& n : *names)
          if (auto s = n.value<std::string>()) p.job_names.push_back(*s);
      }
      p.pipelines_per_hour = v["pipelines_per_hour"].value_or(p.pipelines_per_hour);
      if (auto median = v["duration_median_seconds"].value<double>()) p.duration_mu = std::log(*median);
      p.duration_mu = v["duration_mu"].value_or(p.duration_mu);
      p.duration_sigma = v["duration_sigma"].value_or(p.duration_sigma);
      p.mean_queued_seconds = v["mean_queued_seconds"].value_or(p.mean_queued_seconds);
      p.p_fail = v["p_fail"].value_or(p.p_fail);
      p.p_flaky = v["p_flaky"].value_or(p.p_flaky);
      auto retry = v["retry"].value_or(std::string("retry_failed_once"));
      if (retry == "none")
        p.retry = RetryPolicy::kNone;
      else if (retry == "retry_failed_once")
        p.retry = RetryPolicy::kRetryFailedOnce;
      else
        throw Error(ErrorCode::kInvalidConfig, "retry must be none or retry_failed_once");
      p.retry_delay_seconds = v["retry_delay_seconds"].value_or(p.retry_delay_seconds);
      p.p_default_ref = v["p_default_ref"].value_or(p.p_default_ref);
      if (auto m = v["max_jobs"].value<std::int64_t>()) {
        if (*m < 1) throw Error(ErrorCode::kInvalidConfig, "max_jobs must be ≥ 1");
        p.max_jobs = static_cast<std::size_t>(*m);
      }
      if (auto* regimes = v["regimes"].as_array()) {
        for (auto& rn : *regimes) {
          toml::node_view<toml::node> r{rn};
          RegimeChange rc;
          rc.at = ts(r["at"], cfg.start);
          rc.duration_factor = r["duration_factor"].value_or(1.0);
          rc.p_fail = r["p_fail"].value<double>();
          rc.job_name = r["job_name"].value_or(std::string{});
          p.regimes.push_back(rc);
        }
      }
      cfg.projects.push_back(std::move(p));
    }
  }
  cfg.validate();
  return cfg;
}

SimConfig load_sim_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kInvalidConfig, "cannot read " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_sim_config(text);
}

Simulator::Simulator(SimConfig cfg, const Clock& clock) : cfg_(std::move(cfg)), clock_(clock) {
  cfg_.validate();
  for (std::size_t i = 0; i < cfg_.projects.size(); ++i) {
    rngs_.emplace_back(cfg_.seed * 0x9E3779B97F4A7C15ULL + i * 0xBF58476D1CE4E5B9ULL + 1);
    generated_until_.push_back(cfg_.start);
    generated_count_.push_back(0);
    next_arrival_.emplace_back();
    pipeline_seq_.push_back(0);
  }
}

void Simulator::generate(Timestamp horizon) {
  std::lock_guard lock(mu_);
  for (std::size_t i = 0; i < cfg_.projects.size(); ++i) generate_project_locked(i, horizon);
  // Jobs created past the horizon (retries of late failures) wait for a later
  // call, so ids and pipeline ids do not depend on how generation is chunked.
  auto cut = std::stable_partition(pending_.begin(), pending_.end(),
                                   [&](const SimJob& j) { return j.created_at < horizon; });
  std::vector<SimJob> ready(std::make_move_iterator(pending_.begin()), std::make_move_iterator(cut));
  pending_.erase(pending_.begin(), cut);
  std::sort(ready.begin(), ready.end(), [](const SimJob& a, const SimJob& b) {
    return std::tie(a.created_at, a.project_id, a.pipeline_id, a.retries_count, a.name) <
           std::tie(b.created_at, b.project_id, b.pipeline_id, b.retries_count, b.name);
  });
  for (auto& job : ready) {
    // pipeline_id holds a per-project sequence number until committed.
    auto [it, fresh] = pipeline_ids_.try_emplace({job.project_id, job.pipeline_id}, next_pipeline_);
    if (fresh) ++next_pipeline_;
    job.pipeline_id = it->second;
    add_job_locked(std::move(job));
  }
}

void Simulator::generate_project_locked(std::size_t index, Timestamp horizon) {
  const SimProject& p = cfg_.projects[index];
  auto& rng = rngs_[index];
  auto& count = generated_count_[index];
  std::exponential_distribution<double> gap(p.pipelines_per_hour / 3600.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (true) {
    if (p.max_jobs && count >= *p.max_jobs) break;
    auto& next = next_arrival_[index];
    if (!next) next = generated_until_[index] + to_millis(gap(rng));
    if (*next >= horizon) break;
    const Timestamp t = *next;
    generated_until_[index] = t;
    next.reset();
    const PipelineId pipeline = ++pipeline_seq_[index];
    const std::string ref = unit(rng) < p.p_default_ref
                                ? p.default_ref
                                : "feature/change-" + std::to_string(pipeline % 97);
    const std::string sha = hex_sha(rng);
    const std::int64_t runner = 1 + static_cast<std::int64_t>(rng() % 4);
    for (std::size_t n = 0; n < p.job_names.size(); ++n) {
      if (p.max_jobs && count >= *p.max_jobs) break;
      SimJob job = draw_job_locked(p, rng, t + Millis{static_cast<std::int64_t>(n)}, false, 0);
      job.project_id = p.project_id;
      job.pipeline_id = pipeline;
      job.name = p.job_names[n];
      job.ref = ref;
      job.sha = sha;
      job.runner_id = runner;
      pending_.push_back(job);
      ++count;
      if (job.failed && p.retry == RetryPolicy::kRetryFailedOnce &&
          !(p.max_jobs && count >= *p.max_jobs)) {
        SimJob retry = draw_job_locked(p, rng, add_seconds(job.finished_at, p.retry_delay_seconds),
                                       true, job.cause);
        retry.project_id = job.project_id;
        retry.pipeline_id = pipeline;
        retry.name = job.name;
        retry.ref = ref;
        retry.sha = sha;
        retry.runner_id = runner;
        retry.retries_count = 1;
        pending_.push_back(retry);
        ++count;
      }
    }
  }
}

Simulator::SimJob Simulator::draw_job_locked(const SimProject& p, std::mt19937_64& rng,
                                             Timestamp created, bool is_retry, int inherited_cause) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  double factor = 1.0;
  double p_fail = p.p_fail;
  for (const auto& r : p.regimes) {
    if (created < r.at) continue;
    factor = r.duration_factor;
    if (r.p_fail) p_fail = *r.p_fail;
  }
  SimJob job;
  job.created_at = created;
  job.queued = p.mean_queued_seconds > 0
                   ? std::exponential_distribution<double>(1.0 / p.mean_queued_seconds)(rng)
                   : 0.0;
  job.started_at = created + to_millis(job.queued);
  job.queued = std::chrono::duration<double>(job.started_at - created).count();
  const double raw = std::exp(p.duration_mu + p.duration_sigma * normal(rng)) * factor;
  job.finished_at = job.started_at + std::max(to_millis(raw), Millis{1});
  job.duration = std::chrono::duration<double>(job.finished_at - job.started_at).count();

  const double u = unit(rng);
  const double v = unit(rng);
  if (is_retry && inherited_cause != 0) {
    job.cause = inherited_cause;
    job.failed = inherited_cause == 2;
  } else {
    auto [a, b] = calibrate(p_fail, p.p_flaky, p.retry);
    job.failed = u < a;
    job.cause = job.failed ? (v < b ? 1 : 2) : 0;
  }
  return job;
}

void Simulator::add_job_locked(SimJob job) {
  job.id = next_job_++;
  index_[job.id] = jobs_.size();
  deliveries_.emplace(job.created_at,
                      WebhookDelivery{job.created_at, cfg_.webhook_token, event_body(job, JobStatus::kPending)});
  deliveries_.emplace(job.started_at,
                      WebhookDelivery{job.started_at, cfg_.webhook_token, event_body(job, JobStatus::kRunning)});
  deliveries_.emplace(job.finished_at,
                      WebhookDelivery{job.finished_at, cfg_.webhook_token,
                                      event_body(job, job.failed ? JobStatus::kFailed : JobStatus::kSuccess)});
  jobs_.push_back(std::move(job));
}

nlohmann::json Simulator::event_body(const SimJob& job, JobStatus status) const {
  nlohmann::json b{{"object_kind", "build"},
                   {"ref", job.ref},
                   {"sha", job.sha},
                   {"build_id", job.id},
                   {"build_name", job.name},
                   {"build_stage", "test"},
                   {"build_status", to_string(status)},
                   {"build_created_at", webhook_time(job.created_at)},
                   {"build_started_at", nullptr},
                   {"build_finished_at", nullptr},
                   {"build_duration", nullptr},
                   {"build_queued_duration", nullptr},
                   {"build_allow_failure", false},
                   {"pipeline_id", job.pipeline_id},
                   {"project_id", job.project_id},
                   {"retries_count", job.retries_count},
                   {"runner", {{"id", job.runner_id}}}};
  if (status != JobStatus::kPending) {
    b["build_started_at"] = webhook_time(job.started_at);
    b["build_queued_duration"] = job.queued;
  }
  if (is_terminal(status)) {
    b["build_finished_at"] = webhook_time(job.finished_at);
    b["build_duration"] = job.duration;
  }
  return b;
}

RawJob Simulator::raw_at_locked(const SimJob& job, Timestamp now) const {
  JobStatus status = JobStatus::kPending;
  if (now >= job.finished_at)
    status = job.failed ? JobStatus::kFailed : JobStatus::kSuccess;
  else if (now >= job.started_at)
    status = JobStatus::kRunning;
  RawJob r{{"id", job.id},
           {"name", job.name},
           {"ref", job.ref},
           {"stage", "test"},
           {"status", to_string(status)},
           {"created_at", format_rfc3339(job.created_at)},
           {"started_at", nullptr},
           {"finished_at", nullptr},
           {"duration", nullptr},
           {"queued_duration", nullptr},
           {"pipeline", {{"id", job.pipeline_id}, {"project_id", job.project_id}, {"ref", job.ref}, {"sha", job.sha}}},
           {"commit", {{"id", job.sha}}},
           {"runner", {{"id", job.runner_id}}},
           {"retried", false}};
  if (status != JobStatus::kPending) {
    r["started_at"] = format_rfc3339(job.started_at);
    r["queued_duration"] = job.queued;
  }
  if (is_terminal(status)) {
    r["finished_at"] = format_rfc3339(job.finished_at);
    r["duration"] = job.duration;
  }
  return r;
}

std::vector<WebhookDelivery> Simulator::deliveries(Timestamp from, Timestamp to) const {
  std::lock_guard lock(mu_);
  std::vector<WebhookDelivery> out;
  for (auto it = deliveries_.lower_bound(from); it != deliveries_.end() && it->first < to; ++it)
    out.push_back(it->second);
  return out;
}

std::vector<WebhookDelivery> Simulator::all_deliveries() const {
  std::lock_guard lock(mu_);
  std::vector<WebhookDelivery> out;
  for (const auto& [_, d] : deliveries_) out.push_back(d);
  return out;
}

std::vector<RawJob> Simulator::all_jobs() const {
  std::lock_guard lock(mu_);
  std::vector<RawJob> out;
  for (const auto& job : jobs_) out.push_back(raw_at_locked(job, job.finished_at));
  return out;
}

std::size_t Simulator::job_count() const {
  std::lock_guard lock(mu_);
  return jobs_.size();
}

void Simulator::inject_faults(std::vector<SimFault> faults, double retry_after_seconds) {
  std::lock_guard lock(mu_);
  faults_.insert(faults_.end(), faults.begin(), faults.end());
  fault_retry_after_ = retry_after_seconds;
}

std::size_t Simulator::reader_calls() const {
  std::lock_guard lock(mu_);
  return reader_calls_;
}

void Simulator::check_fault_locked() {
  ++reader_calls_;
  if (faults_.empty()) return;
  auto f = faults_.front();
  faults_.pop_front();
  if (f == SimFault::kUnreachable)
    throw Error(ErrorCode::kActualTwinUnreachable, "simulated outage");
  throw_rate_limited(fault_retry_after_);
}

const Simulator::SimJob* Simulator::find_locked(ProjectId project, JobId job) const {
  auto it = index_.find(job);
  if (it == index_.end()) return nullptr;
  const auto& j = jobs_[it->second];
  if (j.project_id != project || j.created_at > clock_.now()) return nullptr;
  return &j;
}

std::vector<RawJob> Simulator::list_jobs(ProjectId project, int page, int per_page,
                                         std::optional<Timestamp> updated_after) {
  if (per_page < 1 || per_page > kMaxPerPage)
    throw Error(ErrorCode::kBadRequest, "per_page must be in [1, 100]");
  if (page < 1) throw Error(ErrorCode::kBadRequest, "page must be ≥ 1");
  std::lock_guard lock(mu_);
  check_fault_locked();
  const auto now = clock_.now();
  std::vector<const SimJob*> visible;
  for (const auto& j : jobs_)
    if (j.project_id == project && j.created_at <= now) visible.push_back(&j);
  std::sort(visible.begin(), visible.end(), [](const SimJob* a, const SimJob* b) {
    return std::tie(a->created_at, a->id) > std::tie(b->created_at, b->id);
  });
  std::vector<RawJob> out;
  std::size_t skip = static_cast<std::size_t>(page - 1) * static_cast<std::size_t>(per_page);
  for (const SimJob* j : visible) {
    RawJob r = raw_at_locked(*j, now);
    if (updated_after) {
      auto u = raw_job_updated_at(r);
      if (!u || *u <= *updated_after) continue;
    }
    if (skip > 0) {
      --skip;
      continue;
    }
    out.push_back(std::move(r));
    if (out.size() == static_cast<std::size_t>(per_page)) break;
  }
  return out;
}

RawJob Simulator::get_job(ProjectId project, JobId job) {
  std::lock_guard lock(mu_);
  check_fault_locked();
  const SimJob* j = find_locked(project, job);
  if (!j) throw Error(ErrorCode::kNotFound, "job " + std::to_string(job) + " not found");
  return raw_at_locked(*j, clock_.now());
}

std::vector<Project> Simulator::list_projects() {
  std::lock_guard lock(mu_);
  check_fault_locked();
  std::vector<Project> out;
  for (const auto& p : cfg_.projects) out.push_back({p.project_id, p.path, p.default_ref});
  return out;
}

WriteResult Simulator::set_ci_variable(ProjectId project, const std::string& key,
                                       const std::string& value) {
  std::lock_guard lock(mu_);
  if (std::none_of(cfg_.projects.begin(), cfg_.projects.end(),
                   [&](const SimProject& p) { return p.project_id == project; }))
    throw Error(ErrorCode::kWriterRejected, "unknown project " + std::to_string(project));
  if (key.empty()) throw Error(ErrorCode::kWriterRejected, "variable key must not be empty");
  variables_[{project, key}] = value;
  return {"variable-" + std::to_string(++writes_)};
}

WriteResult Simulator::retry_job(ProjectId project, JobId job) {
  std::lock_guard lock(mu_);
  const SimJob* src = find_locked(project, job);
  const auto now = clock_.now();
  if (!src) throw Error(ErrorCode::kWriterRejected, "job " + std::to_string(job) + " not found");
  if (now < src->finished_at) throw Error(ErrorCode::kWriterRejected, "job is still running");
  std::size_t index = 0;
  for (; index < cfg_.projects.size(); ++index)
    if (cfg_.projects[index].project_id == project) break;
  SimJob copy = *src;
  SimJob rerun = draw_job_locked(cfg_.projects[index], rngs_[index], now, true, copy.cause);
  rerun.project_id = copy.project_id;
  rerun.pipeline_id = copy.pipeline_id;
  rerun.name = copy.name;
  rerun.ref = copy.ref;
  rerun.sha = copy.sha;
  rerun.runner_id = copy.runner_id;
  rerun.retries_count = copy.retries_count + 1;
  add_job_locked(rerun);
  return {"job-" + std::to_string(jobs_.back().id)};
}

WriteResult Simulator::upsert_file(ProjectId project, const std::string& path,
                                   const std::string& content, const std::string& message) {
  std::lock_guard lock(mu_);
  if (path.empty() || message.empty())
    throw Error(ErrorCode::kWriterRejected, "file path and commit message are required");
  if (std::none_of(cfg_.projects.begin(), cfg_.projects.end(),
                   [&](const SimProject& p) { return p.project_id == project; }))
    throw Error(ErrorCode::kWriterRejected, "unknown project " + std::to_string(project));
  files_[{project, path}] = content;
  return {"commit-" + std::to_string(++writes_)};
}

std::optional<std::string> Simulator::ci_variable(ProjectId project, const std::string& key) const {
  std::lock_guard lock(mu_);
  if (auto it = variables_.find({project, key}); it != variables_.end()) return it->second;
  return std::nullopt;
}

std::optional<std::string> Simulator::file(ProjectId project, const std::string& path) const {
  std::lock_guard lock(mu_);
  if (auto it = files_.find({project, path}); it != files_.end()) return it->second;
  return std::nullopt;
}

AcceleratedClock::AcceleratedClock(Timestamp start, double speed)
    : start_(start), speed_(speed), origin_(std::chrono::steady_clock::now()) {}

Timestamp AcceleratedClock::now() const {
  auto real = std::chrono::duration<double>(std::chrono::steady_clock::now() - origin_).count();
  return add_seconds(start_, real * speed_);
}

}  // namespace buildtwin
