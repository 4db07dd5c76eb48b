#include "../support.hpp"

#include "buildtwin/errors.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace buildtwin;
using namespace buildtwin::test;

namespace {

std::vector<BuildJob> random_jobs(std::mt19937_64& rng, int n) {
  std::uniform_int_distribution<int> project(1, 3), status(0, 6), minutes(0, 60 * 24 * 3), pipeline(1, 20);
  std::vector<BuildJob> out;
  for (int i = 1; i <= n; ++i) {
    auto s = static_cast<JobStatus>(status(rng));
    auto j = make_job(i, s, kT0 + std::chrono::minutes(minutes(rng)), 10.0 * (i % 13 + 1));
    j.project_id = project(rng);
    j.pipeline_id = pipeline(rng);
    j.name = (i % 3 == 0) ? "test" : "build";
    j.ref = (i % 4 == 0) ? "feature" : "main";
    if (s == JobStatus::kFailed) j.flaky = i % 2 == 0;
    out.push_back(j);
  }
  return out;
}

}  // namespace

TEST_CASE("upsert is idempotent and never regresses status") {
  MemoryStorage s;
  auto running = make_job(1, JobStatus::kRunning);
  auto done = make_job(1, JobStatus::kSuccess);
  auto r = s.upsert_jobs(std::vector{running});
  CHECK(r.inserted == 1);
  r = s.upsert_jobs(std::vector{done});
  CHECK(r.updated == 1);
  r = s.upsert_jobs(std::vector{done});
  CHECK(r.ignored == 1);
  r = s.upsert_jobs(std::vector{running});  // late, stale delivery
  CHECK(r.ignored == 1);
  CHECK(s.get_job(1)->status == JobStatus::kSuccess);
}

TEST_CASE("upsert rejects the whole batch on a bad record") {
  MemoryStorage s;
  auto bad = make_job(2);
  bad.name.clear();
  try {
    s.upsert_jobs(std::vector{make_job(1), bad});
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kValidation);
    CHECK(e.details()["job_ids"] == json::array({2}));
  }
  CHECK(s.job_count() == 0);
}

TEST_CASE("query_jobs agrees with a brute-force filter") {
  std::mt19937_64 rng(11);
  auto jobs = random_jobs(rng, 400);
  MemoryStorage s;
  s.upsert_jobs(jobs);

  std::uniform_int_distribution<int> coin(0, 1), minutes(0, 60 * 24 * 3);
  for (int round = 0; round < 200; ++round) {
    JobQuery q;
    if (coin(rng)) q.project_ids = std::vector<ProjectId>{1 + round % 3};
    if (coin(rng)) q.statuses = std::vector<JobStatus>{JobStatus::kFailed, JobStatus::kSuccess};
    if (coin(rng)) q.name = "test";
    if (coin(rng)) q.ref = "main";
    if (coin(rng)) q.flaky = coin(rng) == 1;
    if (coin(rng)) {
      auto a = kT0 + std::chrono::minutes(minutes(rng)), b = kT0 + std::chrono::minutes(minutes(rng));
      q.created_at = TimeRange{std::min(a, b), std::max(a, b)};
    }
    if (coin(rng)) q.finished_at = TimeRange{std::nullopt, kT0 + std::chrono::hours(30)};
    q.sort = coin(rng) ? SortOrder::kAsc : SortOrder::kDesc;
    q.offset = static_cast<std::size_t>(round % 7);
    q.limit = 1 + static_cast<std::size_t>(round % 50);

    std::vector<BuildJob> expect;
    for (const auto& j : jobs) {
      bool ok = (!q.project_ids || j.project_id == (*q.project_ids)[0]) &&
                (!q.statuses || j.status == JobStatus::kFailed || j.status == JobStatus::kSuccess) &&
                (!q.name || j.name == *q.name) && (!q.ref || j.ref == *q.ref) &&
                (!q.flaky || j.flaky == *q.flaky) && (!q.created_at || q.created_at->contains(j.created_at)) &&
                (!q.finished_at || (j.finished_at && q.finished_at->contains(*j.finished_at)));
      if (ok) expect.push_back(j);
    }
    std::sort(expect.begin(), expect.end(), [](const BuildJob& a, const BuildJob& b) {
      return std::pair(a.created_at, a.job_id) < std::pair(b.created_at, b.job_id);
    });
    if (q.sort == SortOrder::kDesc) std::reverse(expect.begin(), expect.end());

    auto page = s.query_jobs(q);
    REQUIRE(page.total_count == expect.size());
    std::vector<BuildJob> window;
    for (std::size_t i = q.offset; i < expect.size() && window.size() < q.limit; ++i) window.push_back(expect[i]);
    CHECK(page.jobs == window);
  }
}

TEST_CASE("query validation") {
  MemoryStorage s;
  JobQuery q;
  q.limit = JobQuery::kMaxLimit + 1;
  CHECK_THROWS_AS(s.query_jobs(q), Error);
  q = {};
  q.created_at = TimeRange{kT0 + std::chrono::hours(1), kT0};
  CHECK_THROWS_AS(s.query_jobs(q), Error);
}

TEST_CASE("retention keeps the newest jobs per project") {
  MemoryStorage s(StorageOptions{5});
  std::vector<BuildJob> jobs;
  for (int i = 1; i <= 12; ++i) jobs.push_back(make_job(i, JobStatus::kSuccess, kT0 + std::chrono::minutes(i)));
  s.upsert_jobs(jobs);
  CHECK(s.job_count() == 5);
  CHECK_FALSE(s.get_job(7));
  CHECK(s.get_job(8));
}

TEST_CASE("recent_jobs is strict and newest first") {
  MemoryStorage s;
  std::vector<BuildJob> jobs;
  for (int i = 1; i <= 6; ++i) jobs.push_back(make_job(i, JobStatus::kSuccess, kT0 + std::chrono::minutes(i)));
  s.upsert_jobs(jobs);
  auto r = s.recent_jobs(1, "build", kT0 + std::chrono::minutes(4), 2);
  REQUIRE(r.size() == 2);
  CHECK(r[0].job_id == 3);
  CHECK(r[1].job_id == 2);
}

TEST_CASE("predictions and actuals") {
  MemoryStorage s;
  PredictionRecord p{"p1", 1, ModelKind::kFailure, 0.4, std::nullopt, "failure:prior", kT0};
  PredictionRecord q{"p2", 1, ModelKind::kFailure, 0.6, std::nullopt, "failure:prior", kT0 + Millis(5)};
  s.store_predictions(std::vector{p, q});
  auto settled = s.attach_actual(1, ModelKind::kFailure, 1.0);
  CHECK(settled.prediction_id == "p2");
  CHECK(s.predictions_for_job(1).size() == 2);
  CHECK(s.predictions_between({kT0, kT0 + Millis(1)}).size() == 1);
  CHECK_THROWS_AS(s.attach_actual(2, ModelKind::kFailure, 1.0), Error);
}

TEST_CASE("file storage survives reopen and a torn tail") {
  TempDir dir;
  {
    FileStorage s(dir.path);
    s.upsert_jobs(std::vector{make_job(1), make_job(2, JobStatus::kFailed)});
    s.put_meta("k", "v");
    s.append_log("log", json{{"n", 1}});
    s.store_predictions(std::vector{PredictionRecord{"p1", 1, ModelKind::kFlaky, 0.1, {}, "s", kT0}});
  }
  for (const auto& entry : std::filesystem::directory_iterator(dir.path)) {
    std::ofstream out(entry.path(), std::ios::app);
    out << R"({"op":"jobs","jobs":[{"job_id":)";  // a crash mid-write
  }
  FileStorage s(dir.path);
  CHECK(s.job_count() == 2);
  CHECK(s.get_meta("k") == "v");
  CHECK(s.read_log("log").size() == 1);
  CHECK(s.prediction_count() == 1);
  CHECK(s.healthy());
  s.upsert_jobs(std::vector{make_job(3)});
  FileStorage again(dir.path);
  CHECK(again.job_count() == 3);
}

TEST_CASE("export and import round-trip") {
  std::mt19937_64 rng(5);
  MemoryStorage a;
  a.upsert_jobs(random_jobs(rng, 300));
  std::stringstream dump;
  export_jobs(a, dump);
  MemoryStorage b;
  auto r = import_jobs(b, dump);
  CHECK(r.inserted == 300);
  std::stringstream again;
  export_jobs(b, again);
  CHECK(again.str() == [&] {
    std::stringstream s;
    export_jobs(a, s);
    return s.str();
  }());
  std::stringstream bad("{not json}\n");
  CHECK_THROWS_AS(import_jobs(b, bad), Error);
}
