#include "../support.hpp"

#include "buildtwin/errors.hpp"
#include "buildtwin/metrics.hpp"

#include <doctest.h>

using namespace buildtwin;
using namespace buildtwin::test;
using namespace std::chrono;

namespace {

std::vector<BuildJob> random_history(std::uint64_t seed, int n, int span_hours) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> status(0, 6), minute(0, span_hours * 60), project(1, 3), flaky(0, 1);
  std::vector<BuildJob> out;
  for (int i = 1; i <= n; ++i) {
    auto j = make_job(i, static_cast<JobStatus>(status(rng)), kT0 + minutes(minute(rng)), 20.0 + (i * 37) % 900);
    j.project_id = project(rng);
    if (j.status == JobStatus::kFailed) j.flaky = flaky(rng) == 1;
    out.push_back(j);
  }
  return out;
}

// Window arithmetic in plain seconds for the fixed-length intervals.
std::int64_t window_of(Timestamp t, std::int64_t width_s, std::int64_t origin_s) {
  const auto s = to_unix_millis(t) / 1000;
  return origin_s + (s - origin_s) / width_s * width_s;
}

}  // namespace

TEST_CASE("window alignment") {
  const auto t = at("2024-07-17T13:45:12.5Z");  // a Wednesday
  CHECK(align_down(t, Interval::kHourly) == at("2024-07-17T13:00:00Z"));
  CHECK(align_down(t, Interval::kDaily) == at("2024-07-17T00:00:00Z"));
  CHECK(align_down(t, Interval::kWeekly) == at("2024-07-15T00:00:00Z"));
  CHECK(align_down(t, Interval::kMonthly) == at("2024-07-01T00:00:00Z"));
  CHECK(align_down(t, Interval::kYearly) == at("2024-01-01T00:00:00Z"));
  CHECK(next_boundary(at("2024-01-31T00:00:00Z"), Interval::kDaily) == at("2024-02-01T00:00:00Z"));
  CHECK(next_boundary(at("2024-02-01T00:00:00Z"), Interval::kMonthly) == at("2024-03-01T00:00:00Z"));
  CHECK(prev_boundary(at("2024-03-01T00:00:00Z"), Interval::kMonthly) == at("2024-02-01T00:00:00Z"));
  CHECK(next_boundary(at("2024-01-01T00:00:00Z"), Interval::kYearly) == at("2025-01-01T00:00:00Z"));
  CHECK(is_aligned(at("2024-07-15T00:00:00Z"), Interval::kWeekly));
  CHECK_FALSE(is_aligned(at("2024-07-16T00:00:00Z"), Interval::kWeekly));
}

TEST_CASE("series matches a brute-force count") {
  auto jobs = random_history(1, 3000, 24 * 20);
  MemoryStorage store;
  store.upsert_jobs(jobs);
  const auto from = at("2024-07-01T00:00:00Z"), to = at("2024-07-22T00:00:00Z");
  const std::int64_t origin = to_unix_millis(kT0) / 1000;  // a Monday midnight
  for (auto [interval, width] : {std::pair{Interval::kHourly, 3600}, {Interval::kDaily, 86400}, {Interval::kWeekly, 604800}}) {
    for (const Scope& scope : {Scope::everything(), Scope::of({2, 3})}) {
      auto got = series(store, scope, interval, from, to);
      std::map<std::int64_t, std::int64_t> execs;
      std::map<std::int64_t, std::array<double, 5>> out;  // completed, failed, flaky, dur_n, dur_sum
      for (const auto& j : jobs) {
        if (!scope.contains(j.project_id)) continue;
        if (j.created_at >= from && j.created_at < to) ++execs[window_of(j.created_at, width, origin)];
        if ((j.status == JobStatus::kSuccess || j.status == JobStatus::kFailed) && j.finished_at &&
            *j.finished_at >= from && *j.finished_at < to) {
          auto& o = out[window_of(*j.finished_at, width, origin)];
          o[0] += 1;
          o[1] += j.status == JobStatus::kFailed;
          o[2] += j.status == JobStatus::kFailed && j.flaky == true;
          if (j.duration) {
            o[3] += 1;
            o[4] += *j.duration;
          }
        }
      }
      REQUIRE(got.size() == static_cast<std::size_t>((to_unix_millis(to) - to_unix_millis(from)) / 1000 / width));
      for (const auto& s : got) {
        const auto key = to_unix_millis(s.window_start) / 1000;
        CHECK(s.executions_frequency == execs[key]);
        auto o = out[key];
        CHECK(s.failure_ratio.has_value() == (o[0] > 0));
        if (o[0] > 0) CHECK(*s.failure_ratio == doctest::Approx(o[1] / o[0]));
        if (o[1] > 0) CHECK(*s.flaky_failure_ratio == doctest::Approx(o[2] / o[1]));
        else CHECK_FALSE(s.flaky_failure_ratio);
        if (o[3] > 0) CHECK(*s.mean_duration == doctest::Approx(o[4] / o[3]));
        CHECK(s.window_end == next_boundary(s.window_start, interval));
      }
    }
  }
}

TEST_CASE("daily executions equal the sum of hourly ones") {
  auto jobs = random_history(2, 2000, 24 * 9);
  MemoryStorage store;
  store.upsert_jobs(jobs);
  const auto from = kT0, to = kT0 + days(10);
  auto daily = series(store, Scope::everything(), Interval::kDaily, from, to);
  auto hourly = series(store, Scope::everything(), Interval::kHourly, from, to);
  REQUIRE(hourly.size() == daily.size() * 24);
  for (std::size_t d = 0; d < daily.size(); ++d) {
    std::int64_t sum = 0;
    for (std::size_t h = 0; h < 24; ++h) sum += hourly[d * 24 + h].executions_frequency;
    CHECK(sum == daily[d].executions_frequency);
  }
}

TEST_CASE("month and year windows") {
  MemoryStorage store;
  store.upsert_jobs(std::vector{make_job(1, JobStatus::kSuccess, at("2024-02-29T23:00:00Z")),
                                make_job(2, JobStatus::kSuccess, at("2024-03-01T00:00:00Z"))});
  auto months = series(store, Scope::everything(), Interval::kMonthly, at("2024-01-01T00:00:00Z"), at("2024-04-01T00:00:00Z"));
  REQUIRE(months.size() == 3);
  CHECK(months[1].executions_frequency == 1);
  CHECK(months[2].executions_frequency == 1);
  auto year = compute_snapshot(store, Scope::everything(), Interval::kYearly, at("2024-01-01T00:00:00Z"));
  CHECK(year.executions_frequency == 2);
}

TEST_CASE("range errors") {
  MemoryStorage store;
  auto code = [&](Timestamp a, Timestamp b) {
    try {
      series(store, Scope::everything(), Interval::kDaily, a, b);
    } catch (const Error& e) {
      return std::string(error_code_name(e.code()));
    }
    return std::string("OK");
  };
  CHECK(code(kT0 + days(2), kT0) == "INVERTED_RANGE");
  CHECK(code(kT0 + hours(1), kT0 + days(2)) == "UNALIGNED_WINDOW");
  CHECK(code(kT0, kT0) == "OK");
  CHECK(series(store, Scope::everything(), Interval::kDaily, kT0, kT0 + days(3)).size() == 3);
}

TEST_CASE("service caches closed windows only and forgets on invalidate") {
  MemoryStorage store;
  ManualClock clock(kT0 + days(1) + hours(12));
  MetricsService svc(store, clock);
  store.upsert_jobs(std::vector{make_job(1)});
  auto a = svc.series(Scope::everything(), Interval::kDaily, kT0, kT0 + days(1));
  CHECK(a[0].executions_frequency == 1);
  store.upsert_jobs(std::vector{make_job(2)});
  CHECK(svc.series(Scope::everything(), Interval::kDaily, kT0, kT0 + days(1))[0].executions_frequency == 1);
  CHECK(svc.cache_hits() == 1);
  svc.invalidate();
  CHECK(svc.series(Scope::everything(), Interval::kDaily, kT0, kT0 + days(1))[0].executions_frequency == 2);
  // The current day is open and always recomputed.
  store.upsert_jobs(std::vector{make_job(3, JobStatus::kSuccess, kT0 + days(1) + hours(1))});
  CHECK(svc.snapshot(Scope::everything(), Interval::kDaily, kT0 + days(1)).executions_frequency == 1);
  store.upsert_jobs(std::vector{make_job(4, JobStatus::kSuccess, kT0 + days(1) + hours(2))});
  CHECK(svc.snapshot(Scope::everything(), Interval::kDaily, kT0 + days(1)).executions_frequency == 2);
}

TEST_CASE("alerts fire on the edge, once per window") {
  MemoryStorage store;
  ManualClock clock(kT0);
  MetricsService metrics(store, clock);
  AlertEngine alerts(metrics, store, clock);
  std::vector<AlertFiring> delivered;
  alerts.set_sink([&](const AlertRule&, const AlertFiring& f) { delivered.push_back(f); });
  auto rule = alerts.add_rule({"", MetricName::kFailureRatio, Scope::everything(), Interval::kHourly,
                               Comparator::kGreater, 0.5, "log"});
  CHECK_FALSE(rule.rule_id.empty());
  CHECK_THROWS_AS(alerts.add_rule({"x", MetricName::kFailureRatio, Scope::everything(), Interval::kHourly,
                                   Comparator::kGreater, 0.5, "carrier-pigeon"}),
                  Error);

  // hour 0: all fine; hour 1: all failing; hour 2: still failing
  std::vector<BuildJob> jobs;
  JobId id = 1;
  for (int i = 0; i < 4; ++i) jobs.push_back(make_job(id++, JobStatus::kSuccess, kT0 + minutes(i)));
  for (int h = 1; h <= 2; ++h)
    for (int i = 0; i < 4; ++i) jobs.push_back(make_job(id++, JobStatus::kFailed, kT0 + hours(h) + minutes(i)));
  store.upsert_jobs(jobs);

  clock.set(kT0 + hours(1) + minutes(30));
  CHECK(alerts.evaluate(clock.now()).empty());
  clock.set(kT0 + hours(2) + minutes(1));
  auto fired = alerts.evaluate(clock.now());
  REQUIRE(fired.size() == 1);
  CHECK(fired[0].snapshot.window_start == kT0 + hours(1));
  CHECK(alerts.evaluate(clock.now()).empty());  // same window
  clock.set(kT0 + hours(3) + minutes(1));
  CHECK(alerts.evaluate(clock.now()).empty());  // condition held before, no edge
  CHECK(delivered.size() == 1);
  CHECK(alerts.recent_firings().size() == 1);

  // Rules survive a restart.
  AlertEngine again(metrics, store, clock);
  CHECK(again.rules().size() == 1);
  CHECK(again.remove_rule(rule.rule_id));
  CHECK_FALSE(again.remove_rule(rule.rule_id));
}
