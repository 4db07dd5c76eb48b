#include "../support.hpp"

#include "buildtwin/api.hpp"
#include "buildtwin/errors.hpp"

#include <doctest.h>
#include <httplib.h>

#include <cstdlib>
#include <fstream>

using namespace buildtwin;
using namespace buildtwin::test;
using namespace std::chrono;
using nlohmann::json;

namespace {

// Every response seen, keyed by the documented route, for the schema check
// run afterwards (see validate_openapi.py). Written when BUILDTWIN_API_DUMP is set.
struct Recorder {
  json entries = json::array();
  ~Recorder() {
    const char* path = std::getenv("BUILDTWIN_API_DUMP");
    if (!path) return;
    std::ofstream(path) << entries.dump(1) << "\n";
  }
} recorder;

struct Reply {
  int status = 0;
  json body;
  httplib::Headers headers;

  std::string header(const std::string& key) const {
    auto it = headers.find(key);
    return it == headers.end() ? std::string() : it->second;
  }
};

constexpr const char* kToken = "api-secret";

struct Rig {
  ManualClock clock{kT0 + days(1)};
  std::shared_ptr<Simulator> sim;
  std::unique_ptr<Twin> twin;
  std::unique_ptr<ApiServer> api;
  std::unique_ptr<httplib::Client> http;

  Rig() {
    SimConfig sc;
    sc.seed = 5;
    sc.projects[0].job_names = {"build", "test"};
    sc.projects[0].pipelines_per_hour = 4;
    sim = std::make_shared<Simulator>(sc, clock);
    sim->generate(kT0 + days(1));
    TwinConfig cfg;
    cfg.api_token = kToken;
    cfg.webhook_token = "sim-token";
    cfg.improve.long_build_seconds = 100;
    twin = std::make_unique<Twin>(cfg, clock, sim, sim);
    twin->start();
    api = std::make_unique<ApiServer>(*twin);
    const int port = api->start(0);
    http = std::make_unique<httplib::Client>("127.0.0.1", port);
    http->set_read_timeout(30, 0);
  }
  ~Rig() {
    api->stop();
    twin->stop();
  }

  void deliver_all() {
    for (const auto& d : sim->all_deliveries()) {
      auto r = call("POST", "/webhooks/jobs", "/webhooks/jobs", d.body.dump(), {{"X-Gitlab-Token", d.token}});
      REQUIRE(r.status == 202);
    }
    REQUIRE(twin->wait_idle(seconds(30)));
  }

  Reply call(const std::string& method, const std::string& route, const std::string& path,
             const std::string& body = {}, httplib::Headers headers = {}) {
    httplib::Result res;
    if (method == "GET") res = http->Get(path, headers);
    else if (method == "POST") res = http->Post(path, headers, body, "application/json");
    else if (method == "DELETE") res = http->Delete(path, headers);
    else if (method == "OPTIONS") res = http->Options(path, headers);
    REQUIRE(res);
    Reply r{res->status, json(), res->headers};
    if (res->get_header_value("Content-Type") == "application/json") {
      r.body = json::parse(res->body);
      recorder.entries.push_back({{"method", method}, {"route", route}, {"status", r.status}, {"body", r.body}});
    } else if (!res->body.empty()) {
      r.body = res->body;
    }
    return r;
  }
  Reply get(const std::string& route, const std::string& path = {}) { return call("GET", route, path.empty() ? route : path); }
  Reply post(const std::string& route, const std::string& path, const json& body, bool auth = true) {
    httplib::Headers h;
    if (auth) h.emplace("Authorization", std::string("Bearer ") + kToken);
    return call("POST", route, path, body.is_null() ? "" : body.dump(), h);
  }
};

}  // namespace

TEST_CASE("health, version and the published document") {
  Rig rig;
  auto h = rig.get("/health");
  CHECK(h.status == 200);
  CHECK(h.body["status"] == "ok");
  auto v = rig.get("/version");
  CHECK(v.body["version"] == std::string(kVersion));
  CHECK(v.body["feature_schema"] == "v1");
  CHECK(rig.get("/openapi.json").body == openapi_document());
  auto missing = rig.get("/nowhere");
  CHECK(missing.status == 404);
  CHECK(missing.body["code"] == "NOT_FOUND");
}

TEST_CASE("webhooks authenticate and ingest") {
  Rig rig;
  const auto d = rig.sim->all_deliveries().front();
  auto no_token = rig.call("POST", "/webhooks/jobs", "/webhooks/jobs", d.body.dump());
  CHECK(no_token.status == 401);
  CHECK(no_token.body["code"] == "UNAUTHORIZED");
  auto wrong = rig.call("POST", "/webhooks/jobs", "/webhooks/jobs", d.body.dump(), {{"X-Gitlab-Token", "sim-tokem"}});
  CHECK(wrong.status == 401);
  auto garbage = rig.call("POST", "/webhooks/jobs", "/webhooks/jobs", "{not json", {{"X-Gitlab-Token", "sim-token"}});
  CHECK(garbage.status == 400);
  CHECK(rig.twin->store().job_count() == 0);

  rig.deliver_all();
  const auto stored = rig.twin->store().job_count();
  CHECK(stored == rig.sim->job_count());

  auto page = rig.get("/jobs", "/jobs?limit=5&sort=asc");
  CHECK(page.status == 200);
  CHECK(page.body["jobs"].size() == 5);
  CHECK(page.body["total_count"] == stored);
  CHECK(page.body["jobs"][0]["job_id"] == 1);
  auto failed = rig.get("/jobs", "/jobs?status=failed&name=test");
  for (const auto& j : failed.body["jobs"]) {
    CHECK(j["status"] == "failed");
    CHECK(j["name"] == "test");
  }
  CHECK(rig.get("/jobs", "/jobs?status=exploded").body["code"] == "INVALID_QUERY");
  CHECK(rig.get("/jobs", "/jobs?limit=0").status == 400);
  CHECK(rig.get("/jobs/{job_id}", "/jobs/1").body["job_id"] == 1);
  auto nope = rig.get("/jobs/{job_id}", "/jobs/987654");
  CHECK(nope.status == 404);
  CHECK(nope.body["details"]["job_id"] == 987654);

  auto exported = rig.get("/export");
  CHECK(exported.status == 200);
  const auto ndjson = exported.body.get<std::string>();
  CHECK(std::count(ndjson.begin(), ndjson.end(), '\n') == static_cast<long>(stored));
  CHECK(rig.get("/dead-letter").body["records"].empty());
}

TEST_CASE("metrics over http") {
  Rig rig;
  rig.deliver_all();
  auto s = rig.get("/metrics/series", "/metrics/series?scope=ALL&interval=hourly&from=2024-07-01T00:00:00Z&to=2024-07-02T00:00:00Z");
  REQUIRE(s.status == 200);
  CHECK(s.body["series"].size() == 24);
  std::int64_t total = 0;
  for (const auto& w : s.body["series"]) total += w["executions_frequency"].get<std::int64_t>();
  auto daily = rig.get("/metrics/snapshot", "/metrics/snapshot?scope=1&interval=daily&window_start=2024-07-01T00:00:00Z");
  CHECK(daily.body["executions_frequency"] == total);
  auto inverted = rig.get("/metrics/series", "/metrics/series?interval=daily&from=2024-07-02T00:00:00Z&to=2024-07-01T00:00:00Z");
  CHECK(inverted.status == 400);
  CHECK(inverted.body["code"] == "INVERTED_RANGE");
  auto unaligned = rig.get("/metrics/series", "/metrics/series?interval=daily&from=2024-07-01T03:00:00Z&to=2024-07-02T00:00:00Z");
  CHECK(unaligned.body["code"] == "UNALIGNED_WINDOW");
  CHECK(rig.get("/metrics/series", "/metrics/series?interval=fortnightly&from=2024-07-01T00:00:00Z&to=2024-07-02T00:00:00Z").status == 400);
  CHECK(rig.get("/metrics/series", "/metrics/series?interval=daily&from=yesterday&to=2024-07-02T00:00:00Z").status == 400);
}

TEST_CASE("mutations need the bearer token") {
  Rig rig;
  const json rule{{"metric", "failure_ratio"}, {"interval", "hourly"}, {"comparator", ">"}, {"threshold", 0.9}};
  auto anon = rig.post("/alerts", "/alerts", rule, false);
  CHECK(anon.status == 401);
  auto bad = rig.call("POST", "/alerts", "/alerts", rule.dump(), {{"Authorization", "Bearer api-secreT"}});
  CHECK(bad.status == 401);
  CHECK(rig.get("/alerts").body["rules"].empty());
  auto made = rig.post("/alerts", "/alerts", rule);
  REQUIRE(made.status == 201);
  const std::string id = made.body["rule_id"];
  CHECK(rig.get("/alerts").body["rules"].size() == 1);
  CHECK(rig.post("/alerts", "/alerts", json{{"metric", "failure_ratio"}}).status == 400);
  CHECK(rig.post("/alerts/evaluate", "/alerts/evaluate", nullptr).status == 200);
  CHECK(rig.get("/alerts/firings").status == 200);
  CHECK(rig.call("DELETE", "/alerts/{rule_id}", "/alerts/" + id).status == 401);
  httplib::Headers auth{{"Authorization", std::string("Bearer ") + kToken}};
  CHECK(rig.call("DELETE", "/alerts/{rule_id}", "/alerts/" + id, {}, auth).status == 204);
  CHECK(rig.call("DELETE", "/alerts/{rule_id}", "/alerts/" + id, {}, auth).status == 404);
  CHECK(rig.post("/ingest/refresh", "/ingest/refresh", nullptr, false).status == 401);
}

TEST_CASE("cors headers") {
  Rig rig;
  auto pre = rig.call("OPTIONS", "/jobs", "/jobs", {}, {{"Origin", "http://localhost:5173"}});
  CHECK(pre.status == 204);
  CHECK(pre.header("Access-Control-Allow-Origin") == "*");
  auto got = rig.call("GET", "/version", "/version", {}, {{"Origin", "http://localhost:5173"}});
  CHECK(got.header("Access-Control-Allow-Headers").find("Authorization") != std::string::npos);
}

TEST_CASE("predictions, models, what-if and actions") {
  Rig rig;
  rig.deliver_all();
  auto preds = rig.get("/predictions", "/predictions?job_id=1");
  REQUIRE(preds.status == 200);
  CHECK(preds.body["predictions"].size() == 3);
  CHECK(rig.get("/predictions", "/predictions?from=2024-07-01T00:00:00Z&to=2024-07-03T00:00:00Z").body["predictions"].size() > 3);
  CHECK(rig.get("/predictions").status == 400);
  CHECK(rig.get("/anomalies", "/anomalies?from=2024-07-02T00:00:00Z&to=2024-07-01T00:00:00Z").body["code"] == "INVERTED_RANGE");
  CHECK(rig.get("/anomalies").status == 200);
  auto models = rig.get("/models/snapshots");
  CHECK(models.body["snapshots"].size() >= 3);

  const json zero{{"label", "zero"}, {"feature_deltas", {{"queued_duration", {{"add", 0.0}}}}}};
  auto eval = rig.post("/whatif/evaluate", "/whatif/evaluate", zero, false);
  REQUIRE(eval.status == 200);
  for (const auto& [_, e] : eval.body["entries"].items()) CHECK(e["delta"] == 0.0);
  auto unknown = rig.post("/whatif/evaluate", "/whatif/evaluate", json{{"feature_deltas", {{"moon", 1}}}}, false);
  CHECK(unknown.status == 400);
  CHECK(unknown.body["code"] == "UNKNOWN_FEATURE");
  auto empty = rig.post("/whatif/evaluate", "/whatif/evaluate", json{{"job_sample_spec", {{"scope", {99}}}}}, false);
  CHECK(empty.body["code"] == "EMPTY_SAMPLE");
  const json cmp{{"metric", "failure_probability"},
                 {"scenarios", {zero, {{"label", "slower"}, {"feature_deltas", {{"recent_failure_rate", 0.5}}}}}}};
  auto ranked = rig.post("/whatif/compare", "/whatif/compare", cmp, false);
  REQUIRE(ranked.status == 200);
  CHECK(ranked.body["ranking"].size() == 2);
  CHECK(ranked.body["ranking"][0]["rank"] == 1);
  CHECK(rig.post("/whatif/compare", "/whatif/compare", json{{"scenarios", json::array()}}, false).status == 400);

  auto actions = rig.get("/actions", "/actions?status=proposed");
  REQUIRE(actions.status == 200);
  REQUIRE_FALSE(actions.body["actions"].empty());
  const auto first = actions.body["actions"][0];
  const std::string id = first["action_id"];
  CHECK(rig.get("/actions/{action_id}", "/actions/" + id).body == first);
  CHECK(rig.get("/actions/{action_id}", "/actions/act-missing").status == 404);
  CHECK(rig.get("/actions", "/actions?status=pondering").status == 400);
  auto early = rig.post("/actions/{action_id}/apply", "/actions/" + id + "/apply", nullptr);
  CHECK(early.status == 409);
  CHECK(early.body["code"] == "ILLEGAL_TRANSITION");
  CHECK(rig.post("/actions/{action_id}/approve", "/actions/" + id + "/approve", nullptr, false).status == 401);
  CHECK(rig.post("/actions/{action_id}/approve", "/actions/" + id + "/approve", nullptr).body["status"] == "approved");
  auto applied = rig.post("/actions/{action_id}/apply", "/actions/" + id + "/apply", nullptr);
  CHECK(applied.body["status"] == "applied");
  CHECK(rig.post("/actions/{action_id}/reject", "/actions/" + id + "/reject", nullptr).status == 409);
  CHECK(rig.post("/actions/{action_id}/approve", "/actions/act-missing/approve", nullptr).status == 404);
}

TEST_CASE("backfill and refresh over http") {
  Rig rig;
  auto b = rig.post("/ingest/backfill", "/ingest/backfill", json{{"limit", 10}});
  REQUIRE(b.status == 200);
  CHECK(rig.twin->store().job_count() == 10);
  CHECK(rig.post("/ingest/backfill", "/ingest/backfill", json{{"limit", 0}}).status == 400);
  rig.twin->ingestor().set_backoff({0.001, 2.0, 0.01, 6});
  rig.sim->inject_faults({SimFault::kRateLimited, SimFault::kRateLimited, SimFault::kRateLimited,
                          SimFault::kRateLimited, SimFault::kRateLimited, SimFault::kRateLimited},
                         0.001);
  auto limited = rig.post("/ingest/refresh", "/ingest/refresh", json{{"projects", {1}}});
  CHECK(limited.status == 429);
  auto r = rig.post("/ingest/refresh", "/ingest/refresh", json{{"projects", {1}}});
  CHECK(r.status == 200);
  CHECK(rig.twin->store().job_count() == rig.sim->job_count());
}

TEST_CASE("a taken port is reported") {
  Rig rig;
  ApiServer second(*rig.twin);
  try {
    second.start(rig.api->port());
    FAIL("expected PORT_IN_USE");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kPortInUse);
  }
}
