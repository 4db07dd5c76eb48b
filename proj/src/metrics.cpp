#include "buildtwin/metrics.hpp"

#include "buildtwin/codec.hpp"
#include "buildtwin/errors.hpp"
#include "buildtwin/ids.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

namespace buildtwin {

using namespace std::chrono;
using nlohmann::json;

namespace {

constexpr std::size_t kMaxWindows = 100000;
constexpr std::string_view kRulesKey = "alerts.rules";
constexpr std::string_view kFiringsLog = "alerts.firings";

Timestamp at(sys_days d) { return time_point_cast<Millis>(d); }

JobQuery scope_query(const Scope& scope) {
  JobQuery q;
  if (!scope.all) q.project_ids = scope.projects;
  return q;
}

void check_aligned(Timestamp t, Interval interval, const char* what) {
  if (!is_aligned(t, interval))
    throw Error(ErrorCode::kUnalignedWindow,
                std::string(what) + " is not aligned to a " + std::string(to_string(interval)) + " boundary",
                {{"value", format_rfc3339(t)}, {"aligned", format_rfc3339(align_down(t, interval))}});
}

}  // namespace

Timestamp align_down(Timestamp t, Interval interval) {
  const auto day = floor<days>(t);
  switch (interval) {
    case Interval::kHourly: return time_point_cast<Millis>(floor<hours>(t));
    case Interval::kDaily: return at(day);
    case Interval::kWeekly: return at(day - days(weekday(day).iso_encoding() - 1));
    case Interval::kMonthly: {
      year_month_day ymd{day};
      return at(sys_days(ymd.year() / ymd.month() / 1));
    }
    case Interval::kYearly: return at(sys_days(year_month_day{day}.year() / January / 1));
  }
  return t;
}

bool is_aligned(Timestamp t, Interval interval) { return align_down(t, interval) == t; }

Timestamp next_boundary(Timestamp start, Interval interval) {
  const year_month_day ymd{floor<days>(start)};
  switch (interval) {
    case Interval::kHourly: return start + hours(1);
    case Interval::kDaily: return start + days(1);
    case Interval::kWeekly: return start + days(7);
    case Interval::kMonthly: return at(sys_days(ymd + months(1)));
    case Interval::kYearly: return at(sys_days(ymd + years(1)));
  }
  return start;
}

Timestamp prev_boundary(Timestamp start, Interval interval) {
  const year_month_day ymd{floor<days>(start)};
  switch (interval) {
    case Interval::kHourly: return start - hours(1);
    case Interval::kDaily: return start - days(1);
    case Interval::kWeekly: return start - days(7);
    case Interval::kMonthly: return at(sys_days(ymd - months(1)));
    case Interval::kYearly: return at(sys_days(ymd - years(1)));
  }
  return start;
}

std::vector<MetricSnapshot> series(const Storage& store, const Scope& scope, Interval interval,
                                   Timestamp from, Timestamp to) {
  check_aligned(from, interval, "from");
  check_aligned(to, interval, "to");
  if (from > to)
    throw Error(ErrorCode::kInvertedRange, "from must not be after to",
                {{"from", format_rfc3339(from)}, {"to", format_rfc3339(to)}});

  std::vector<MetricSnapshot> out;
  std::map<Timestamp, std::size_t> index;
  for (Timestamp s = from; s < to; s = next_boundary(s, interval)) {
    if (out.size() >= kMaxWindows) throw Error(ErrorCode::kInvalidQuery, "too many windows requested");
    MetricSnapshot snap;
    snap.scope = scope;
    snap.interval = interval;
    snap.window_start = s;
    snap.window_end = next_boundary(s, interval);
    index[s] = out.size();
    out.push_back(std::move(snap));
  }
  if (out.empty()) return out;

  JobQuery created = scope_query(scope);
  created.created_at = TimeRange{from, to};
  for (const auto& job : store.select_jobs(created))
    ++out[index.at(align_down(job.created_at, interval))].executions_frequency;

  struct Outcome {
    std::size_t completed = 0, failed = 0, flaky = 0, with_duration = 0;
    double duration_sum = 0;
  };
  std::vector<Outcome> outcomes(out.size());
  JobQuery finished = scope_query(scope);
  finished.finished_at = TimeRange{from, to};
  finished.statuses = std::vector<JobStatus>{JobStatus::kSuccess, JobStatus::kFailed};
  for (const auto& job : store.select_jobs(finished)) {
    auto& o = outcomes[index.at(align_down(*job.finished_at, interval))];
    ++o.completed;
    if (job.status == JobStatus::kFailed) {
      ++o.failed;
      if (job.flaky.value_or(false)) ++o.flaky;
    }
    if (job.duration) {
      ++o.with_duration;
      o.duration_sum += *job.duration;
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& o = outcomes[i];
    if (o.with_duration) out[i].mean_duration = o.duration_sum / static_cast<double>(o.with_duration);
    if (o.completed) out[i].failure_ratio = static_cast<double>(o.failed) / static_cast<double>(o.completed);
    if (o.failed) out[i].flaky_failure_ratio = static_cast<double>(o.flaky) / static_cast<double>(o.failed);
  }
  return out;
}

MetricSnapshot compute_snapshot(const Storage& store, const Scope& scope, Interval interval,
                                Timestamp window_start) {
  check_aligned(window_start, interval, "window_start");
  return series(store, scope, interval, window_start, next_boundary(window_start, interval)).front();
}

MetricsService::MetricsService(const Storage& store, const Clock& clock, std::size_t capacity)
    : store_(store), clock_(clock), capacity_(capacity) {}

static std::string cache_key(const Scope& scope, Interval interval, Timestamp start) {
  return scope.key() + "|" + std::string(to_string(interval)) + "|" + std::to_string(to_unix_millis(start));
}

MetricSnapshot MetricsService::snapshot(const Scope& scope, Interval interval, Timestamp window_start) {
  check_aligned(window_start, interval, "window_start");
  return series(scope, interval, window_start, next_boundary(window_start, interval)).front();
}

std::vector<MetricSnapshot> MetricsService::series(const Scope& scope, Interval interval,
                                                   Timestamp from, Timestamp to) {
  check_aligned(from, interval, "from");
  check_aligned(to, interval, "to");
  if (from > to)
    throw Error(ErrorCode::kInvertedRange, "from must not be after to",
                {{"from", format_rfc3339(from)}, {"to", format_rfc3339(to)}});
  const auto now = clock_.now();
  {
    std::lock_guard lock(mu_);
    std::vector<MetricSnapshot> cached;
    bool complete = true;
    for (Timestamp s = from; s < to && complete; s = next_boundary(s, interval)) {
      auto it = cache_.find(cache_key(scope, interval, s));
      if (it == cache_.end()) complete = false;
      else cached.push_back(it->second);
    }
    if (complete) {
      ++hits_;
      return cached;
    }
  }
  auto out = buildtwin::series(store_, scope, interval, from, to);
  std::lock_guard lock(mu_);
  for (const auto& snap : out) {
    if (snap.window_end > now) continue;  // still open
    if (cache_.size() >= capacity_) cache_.clear();
    cache_[cache_key(scope, interval, snap.window_start)] = snap;
  }
  return out;
}

void MetricsService::invalidate() {
  std::lock_guard lock(mu_);
  cache_.clear();
}

AlertEngine::AlertEngine(MetricsService& metrics, Storage& store, const Clock& clock)
    : metrics_(metrics), store_(store), clock_(clock), sink_(&AlertEngine::deliver_default) {
  if (auto raw = store_.get_meta(std::string(kRulesKey))) {
    for (const auto& j : json::parse(*raw)) {
      auto rule = j.get<AlertRule>();
      rules_[rule.rule_id] = rule;
    }
  }
  for (const auto& rec : store_.read_log(std::string(kFiringsLog))) {
    auto ts = parse_timestamp(rec.at("snapshot").at("window_start").get<std::string>());
    if (ts) last_fired_window_[rec.at("rule_id").get<std::string>()] = *ts;
  }
}

AlertRule AlertEngine::add_rule(AlertRule rule) {
  if (rule.rule_id.empty()) rule.rule_id = default_ids().next("rule");
  if (auto violations = validate_rule(rule); !violations.empty())
    throw Error(ErrorCode::kValidation, "invalid alert rule", {{"violations", violations}});
  std::lock_guard lock(mu_);
  rules_[rule.rule_id] = rule;
  persist_locked();
  return rule;
}

bool AlertEngine::remove_rule(const std::string& rule_id) {
  std::lock_guard lock(mu_);
  if (!rules_.erase(rule_id)) return false;
  last_fired_window_.erase(rule_id);
  persist_locked();
  return true;
}

std::vector<AlertRule> AlertEngine::rules() const {
  std::lock_guard lock(mu_);
  std::vector<AlertRule> out;
  for (const auto& [_, r] : rules_) out.push_back(r);
  return out;
}

void AlertEngine::persist_locked() {
  json arr = json::array();
  for (const auto& [_, r] : rules_) arr.push_back(r);
  store_.put_meta(std::string(kRulesKey), arr.dump());
}

std::vector<AlertFiring> AlertEngine::evaluate(Timestamp now) {
  std::vector<std::pair<AlertRule, AlertFiring>> fired;
  {
    std::lock_guard lock(mu_);
    for (const auto& [id, rule] : rules_) {
      const Timestamp latest_end = align_down(now, rule.interval);
      const Timestamp latest = prev_boundary(latest_end, rule.interval);
      if (auto it = last_fired_window_.find(id); it != last_fired_window_.end() && it->second >= latest)
        continue;
      auto snaps = metrics_.series(rule.scope, rule.interval, prev_boundary(latest, rule.interval), latest_end);
      auto holds = [&](const MetricSnapshot& s) {
        auto v = s.value(rule.metric);
        return v && compare(rule.comparator, *v, rule.threshold);
      };
      if (!holds(snaps[1]) || holds(snaps[0])) continue;
      AlertFiring f{id, snaps[1], clock_.now()};
      last_fired_window_[id] = latest;
      store_.append_log(std::string(kFiringsLog), f);
      fired.emplace_back(rule, std::move(f));
    }
  }
  std::vector<AlertFiring> out;
  for (auto& [rule, f] : fired) {
    try {
      sink_(rule, f);
    } catch (const std::exception& e) {
      spdlog::error("alert sink for {} failed: {}", rule.rule_id, e.what());
    }
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<AlertFiring> AlertEngine::recent_firings(std::size_t n) const {
  auto log = store_.read_log(std::string(kFiringsLog));
  std::vector<AlertFiring> out;
  const std::size_t start = log.size() > n ? log.size() - n : 0;
  for (std::size_t i = start; i < log.size(); ++i) {
    AlertFiring f;
    f.rule_id = log[i].at("rule_id").get<std::string>();
    f.snapshot = log[i].at("snapshot").get<MetricSnapshot>();
    f.fired_at = parse_timestamp(log[i].at("fired_at").get<std::string>()).value_or(Timestamp{});
    out.push_back(std::move(f));
  }
  return out;
}

void AlertEngine::deliver_default(const AlertRule& rule, const AlertFiring& firing) {
  const json body = firing;
  if (rule.sink == "log" || rule.sink.empty()) {
    spdlog::warn("alert {}: {}", rule.rule_id, body.dump());
    return;
  }
  // scheme://host[:port]/path
  const auto scheme_end = rule.sink.find("://");
  const auto path_start = rule.sink.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  const std::string origin = rule.sink.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : rule.sink.substr(path_start);
  httplib::Client client(origin);
  client.set_connection_timeout(5, 0);
  client.set_read_timeout(5, 0);
  auto res = client.Post(path, body.dump(), "application/json");
  if (!res || res->status >= 300)
    spdlog::error("alert {} webhook delivery to {} failed", rule.rule_id, rule.sink);
}

}  // namespace buildtwin
