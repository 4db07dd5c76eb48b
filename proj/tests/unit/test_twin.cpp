#include "../support.hpp"

#include "buildtwin/errors.hpp"
#include "buildtwin/twin.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>

using namespace buildtwin;
using namespace buildtwin::test;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kValidation;
}

struct EnvGuard {
  std::vector<std::string> names;
  void set(const std::string& k, const std::string& v) {
    names.push_back(k);
    ::setenv(k.c_str(), v.c_str(), 1);
  }
  ~EnvGuard() {
    for (const auto& n : names) ::unsetenv(n.c_str());
  }
};

}  // namespace

TEST_CASE("defaults") {
  TwinConfig c;
  CHECK(c.port == 8080);
  CHECK(c.host == "127.0.0.1");
  CHECK_FALSE(c.max_history_jobs);
  CHECK_FALSE(c.refresh_interval);
  CHECK(c.models.learning_rate == 0.05);
  CHECK(c.models.alpha == 0.1);
  CHECK(c.improve.long_build_seconds == 600.0);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("parse every section") {
  auto c = TwinConfig::parse(R"(
[server]
host = "0.0.0.0"
port = 9000
api_token = "t"
cors_origins = ["http://localhost:5173"]
[webhook]
token = "w"
[store]
dir = "/tmp/x"
max_history_jobs = 500
[refresh]
interval_seconds = 300
[alerts]
interval_seconds = 10
[actual_twin]
kind = "gitlab"
base_url = "https://gitlab.example.com"
token = "pat"
projects = [1, 2]
[models]
learning_rate = 0.1
alpha = 0.2
feature_window = 20
anomaly_sigmas = 4.0
[improve]
long_build_seconds = 900
cooldown_seconds = 60
auto_approve = ["enable_cache"]
)");
  CHECK(c.host == "0.0.0.0");
  CHECK(c.port == 9000);
  CHECK(c.cors_origins == std::vector<std::string>{"http://localhost:5173"});
  CHECK(c.webhook_token == "w");
  CHECK(c.store_dir == "/tmp/x");
  CHECK(c.max_history_jobs == 500u);
  CHECK(c.refresh_interval == std::chrono::seconds(300));
  CHECK(c.alert_interval == std::chrono::seconds(10));
  CHECK(c.actual_twin == "gitlab");
  CHECK(c.projects == std::vector<ProjectId>{1, 2});
  CHECK(c.models.feature_window == 20);
  CHECK(c.models.anomaly_sigmas == 4.0);
  CHECK(c.improve.cooldown == std::chrono::seconds(60));
  CHECK(c.improve.auto_approve.count(ActionKind::kEnableCache) == 1);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("bad configs") {
  CHECK(code_of([] { TwinConfig::parse("[server"); }) == ErrorCode::kBadConfig);
  CHECK(code_of([] { TwinConfig::parse("[store]\nmax_history_jobs = 0"); }) == ErrorCode::kBadConfig);
  CHECK(code_of([] { TwinConfig::parse("[improve]\nauto_approve = [\"launch\"]"); }) == ErrorCode::kBadConfig);
  CHECK(code_of([] { TwinConfig::parse("[actual_twin]\nkind = \"jenkins\"").validate(); }) == ErrorCode::kBadConfig);
  CHECK(code_of([] { TwinConfig::parse("[actual_twin]\nkind = \"gitlab\"").validate(); }) == ErrorCode::kBadConfig);
  CHECK(code_of([] { TwinConfig::parse("[models]\nalpha = 1.5").validate(); }) == ErrorCode::kBadConfig);
  CHECK(code_of([] { TwinConfig::load("/nonexistent/twin.toml"); }) == ErrorCode::kBadConfig);
}

TEST_CASE("environment overrides the file") {
  auto c = TwinConfig::parse("[webhook]\ntoken = \"file\"\n[store]\nmax_history_jobs = 5\n");
  EnvGuard env;
  env.set("CBDT_WEBHOOK_TOKEN", "env");
  env.set("CBDT_MAX_HISTORY_JOBS", "250");
  env.set("DATA_REFRESH_INTERVAL", "60");
  env.set("CBDT_API_TOKEN", "bearer");
  c.apply_env();
  CHECK(c.webhook_token == "env");
  CHECK(c.max_history_jobs == 250u);
  CHECK(c.refresh_interval == std::chrono::seconds(60));
  CHECK(c.api_token == "bearer");
  env.set("CBDT_MAX_HISTORY_JOBS", "lots");
  CHECK(code_of([&] { c.apply_env(); }) == ErrorCode::kBadConfig);
}

TEST_CASE("simulator path resolves next to the config file") {
  TempDir dir;
  std::ofstream(dir.path / "twin.toml") << "[actual_twin]\nkind = \"simulator\"\nsimulator_config = \"sim.toml\"\n";
  auto c = TwinConfig::load(dir.path / "twin.toml");
  CHECK(c.simulator_config == dir.path / "sim.toml");
}

TEST_CASE("shipped configs load") {
  auto c = TwinConfig::load(std::filesystem::path(BUILDTWIN_SOURCE_DIR) / "config/twin.toml");
  CHECK_NOTHROW(c.validate());
  auto sim = load_sim_config(c.simulator_config);
  CHECK(sim.projects.size() == 2);
}

TEST_CASE("twin wires ingestion to models and metrics") {
  ManualClock clock(kT0 + std::chrono::hours(6));
  SimConfig sc;
  sc.seed = 2;
  sc.projects[0].pipelines_per_hour = 10;
  auto sim = std::make_shared<Simulator>(sc, clock);
  sim->generate(kT0 + std::chrono::hours(6));
  TempDir dir;
  TwinConfig cfg;
  cfg.webhook_token = "sim-token";
  cfg.store_dir = dir.path;
  {
    Twin twin(cfg, clock, sim, sim);
    for (const auto& d : sim->all_deliveries()) CHECK(twin.webhooks().handle(d.token, d.body.dump()).status == 202);
    // Not started: drain the webhook worker, then run the subscribers here.
    REQUIRE(twin.webhooks().drain(std::chrono::seconds(30)));
    twin.pump();
    CHECK(twin.store().job_count() == sim->job_count());
    CHECK(twin.models().updates() > 0);
    CHECK_FALSE(twin.store().predictions_for_job(1).empty());
  }
  Twin again(cfg, clock, sim, sim);
  CHECK(again.store().job_count() == sim->job_count());
  CHECK(again.registry().view()->snapshots.size() > 0);

  Twin detached(TwinConfig{}, clock, nullptr, nullptr);
  CHECK(code_of([&] { detached.webhooks(); }) == ErrorCode::kActualTwinUnreachable);
}
