// buildtwin command line: host the service, drive it, or inspect it.
//
// Exit codes: 0 ok, 1 usage, 2 remote error, 3 local I/O.

#include "buildtwin/api.hpp"
#include "buildtwin/codec.hpp"
#include "buildtwin/sim_server.hpp"
#include "buildtwin/twin.hpp"

#include <CLI11.hpp>
#include <httplib.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <thread>

using namespace buildtwin;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRemote = 2;
constexpr int kExitIo = 3;

/// Failure that maps onto an exit code; `envelope` goes to stderr.
struct Exit {
  int code;
  json envelope;
};

[[noreturn]] void fail(int code, ErrorCode ec, const std::string& message, json details = nullptr) {
  throw Exit{code, Error(ec, message, std::move(details)).envelope()};
}

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

void wait_for_signal() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
}

Timestamp parse_time_arg(const std::string& s, const char* what) {
  auto t = parse_timestamp(s);
  if (!t) fail(kExitUsage, ErrorCode::kBadRequest, std::string(what) + " must be an RFC 3339 timestamp");
  return *t;
}

// ---------------------------------------------------------------- remote

struct Remote {
  std::string url = "http://127.0.0.1:8080";
  std::string token;

  json call(const std::string& method, const std::string& path, const std::optional<json>& body = std::nullopt) const {
    httplib::Client cli(url);
    cli.set_connection_timeout(5);
    cli.set_read_timeout(600);
    httplib::Headers headers;
    if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);
    httplib::Result res = method == "GET"
                              ? cli.Get(path, headers)
                              : cli.Post(path, headers, body ? body->dump() : std::string("{}"), "application/json");
    if (!res)
      fail(kExitRemote, ErrorCode::kActualTwinUnreachable, "cannot reach " + url + ": " + httplib::to_string(res.error()));
    auto parsed = json::parse(res->body, nullptr, false);
    if (res->status >= 400) {
      if (parsed.is_object() && parsed.contains("code")) throw Exit{kExitRemote, parsed};
      fail(kExitRemote, ErrorCode::kBadRequest, "HTTP " + std::to_string(res->status), {{"body", res->body}});
    }
    if (parsed.is_discarded()) return res->body;
    return parsed;
  }

  std::string raw_get(const std::string& path) const {
    auto r = call("GET", path);
    return r.is_string() ? r.get<std::string>() : r.dump();
  }
};

void add_remote(CLI::App* cmd, Remote& r) {
  cmd->add_option("--url", r.url, "Service base URL")->default_val(r.url);
  cmd->add_option("--token", r.token, "Bearer token for mutating endpoints (default: CBDT_API_TOKEN)");
}

std::string resolve_token(const std::string& flag) {
  if (!flag.empty()) return flag;
  const char* v = std::getenv("CBDT_API_TOKEN");
  return v ? v : "";
}

// ---------------------------------------------------------------- hosting

struct HostOptions {
  std::string config;
  std::optional<std::string> host;
  std::optional<int> port;
  std::optional<std::string> store;
};

TwinConfig load_config(const HostOptions& o) {
  TwinConfig cfg;
  if (!o.config.empty()) {
    if (!std::filesystem::exists(o.config))
      fail(kExitIo, ErrorCode::kBadConfig, "cannot read config " + o.config);
    cfg = TwinConfig::load(o.config);
  }
  cfg.apply_env();
  if (o.host) cfg.host = *o.host;
  if (o.port) cfg.port = *o.port;
  if (o.store) cfg.store_dir = *o.store;
  cfg.validate();
  return cfg;
}

void add_host_options(CLI::App* cmd, HostOptions& o) {
  cmd->add_option("--host", o.host, "Bind address");
  cmd->add_option("--port", o.port, "Listen port (0 picks a free one)");
  cmd->add_option("--store", o.store, "Store directory (in-memory when unset)");
}

/// Feeds simulator webhook deliveries with at ∈ [from, to) into the twin.
std::size_t deliver(Simulator& sim, Twin& twin, Timestamp from, Timestamp to) {
  std::size_t n = 0;
  for (const auto& d : sim.deliveries(from, to)) {
    auto r = twin.webhooks().handle(d.token, d.body.dump());
    if (r.status != 202) spdlog::warn("webhook rejected ({}): {}", r.status, r.body.dump());
    ++n;
  }
  return n;
}

int cmd_serve(const HostOptions& o) {
  auto cfg = load_config(o);
  std::unique_ptr<Clock> clock_holder = std::make_unique<SystemClock>();
  std::shared_ptr<ActualTwinReader> reader;
  std::shared_ptr<ActualTwinWriter> writer;
  std::shared_ptr<Simulator> sim;
  SimConfig sc;
  if (cfg.actual_twin == "simulator") {
    sc = cfg.simulator_config.empty() ? SimConfig{} : load_sim_config(cfg.simulator_config);
    // The simulated platform runs in real time from its configured start.
    clock_holder = std::make_unique<AcceleratedClock>(sc.start, 1.0);
  }
  const Clock& clock = *clock_holder;
  if (cfg.actual_twin == "gitlab") {
    auto client = std::make_shared<GitlabClient>(GitlabConfig{cfg.at_base_url, cfg.at_token, cfg.projects});
    reader = client;
    writer = client;
  } else if (cfg.actual_twin == "simulator") {
    sc.webhook_token = cfg.webhook_token.empty() ? sc.webhook_token : cfg.webhook_token;
    if (cfg.webhook_token.empty()) cfg.webhook_token = sc.webhook_token;
    sim = std::make_shared<Simulator>(sc, clock);
    reader = sim;
    writer = sim;
  }
  Twin twin(cfg, clock, reader, writer);
  twin.start();
  ApiServer api(twin);
  const int port = api.start();
  spdlog::info("buildtwin {} listening on http://{}:{}", kVersion, cfg.host, port);

  // A simulator platform plays its own webhooks against the twin in real time.
  std::thread feeder;
  if (sim) {
    feeder = std::thread([&] {
      Timestamp last = clock.now();
      while (!g_stop) {
        std::this_thread::sleep_for(std::chrono::seconds(1));
        const Timestamp now = clock.now();
        sim->generate(now);
        deliver(*sim, twin, last, now);
        last = now;
      }
    });
  }
  wait_for_signal();
  spdlog::info("shutting down");
  if (feeder.joinable()) feeder.join();
  api.stop();
  twin.stop();
  return 0;
}

struct SimulateOptions {
  HostOptions host;
  std::string sim_config;
  std::string horizon = "1d";
  double speed = 3600;
  bool exit_when_done = false;
};

int cmd_simulate(const SimulateOptions& o) {
  auto cfg = load_config(o.host);
  if (!std::filesystem::exists(o.sim_config))
    fail(kExitIo, ErrorCode::kInvalidConfig, "cannot read simulator config " + o.sim_config);
  SimConfig sc = load_sim_config(o.sim_config);
  const auto horizon_s = parse_duration_seconds(o.horizon);
  if (!horizon_s || *horizon_s <= 0) fail(kExitUsage, ErrorCode::kBadRequest, "--horizon must be a positive duration");
  if (!(o.speed >= 0)) fail(kExitUsage, ErrorCode::kBadRequest, "--speed must be ≥ 0");
  if (cfg.webhook_token.empty()) cfg.webhook_token = sc.webhook_token;
  sc.webhook_token = cfg.webhook_token;
  cfg.actual_twin = "simulator";
  const Timestamp end = add_seconds(sc.start, *horizon_s);

  // speed 0 runs as fast as the twin keeps up, on a manual clock.
  std::unique_ptr<Clock> clock;
  ManualClock* manual = nullptr;
  if (o.speed == 0) {
    auto m = std::make_unique<ManualClock>(sc.start);
    manual = m.get();
    clock = std::move(m);
  } else {
    clock = std::make_unique<AcceleratedClock>(sc.start, o.speed);
  }
  auto sim = std::make_shared<Simulator>(sc, *clock);
  Twin twin(cfg, *clock, sim, sim);
  twin.start();
  ApiServer api(twin);
  const int port = api.start();
  spdlog::info("simulating {} of {} project(s) at {}x; API on http://{}:{}", o.horizon, sc.projects.size(),
               o.speed, cfg.host, port);

  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  sim->generate(end);
  std::size_t delivered = 0;
  Timestamp last = sc.start;
  if (manual) {
    for (const auto& d : sim->all_deliveries()) {
      if (g_stop || d.at >= end) break;
      manual->set(d.at);
      auto r = twin.webhooks().handle(d.token, d.body.dump());
      if (r.status != 202) spdlog::warn("webhook rejected ({}): {}", r.status, r.body.dump());
      ++delivered;
      // Keep the pipeline shallow so the twin sees deliveries in time order.
      if (delivered % 64 == 0) twin.wait_idle(std::chrono::minutes(5));
    }
    manual->set(end);
  } else {
    while (!g_stop && last < end) {
      std::this_thread::sleep_for(std::chrono::milliseconds(200));
      const Timestamp now = std::min(clock->now(), end);
      delivered += deliver(*sim, twin, last, now);
      last = now;
    }
  }
  twin.wait_idle(std::chrono::minutes(10));
  twin.alerts().evaluate(clock->now());

  json summary{{"simulated_until", format_rfc3339(std::min(clock->now(), end))},
               {"jobs_generated", sim->job_count()},
               {"webhooks_delivered", delivered},
               {"jobs_stored", twin.store().job_count()},
               {"predictions", twin.store().prediction_count()},
               {"actions_proposed", twin.improve().list().size()},
               {"api", "http://" + cfg.host + ":" + std::to_string(port)}};
  std::cout << summary.dump() << std::endl;
  if (!o.exit_when_done && !g_stop) {
    spdlog::info("simulation finished; still serving, Ctrl-C to stop");
    wait_for_signal();
  }
  api.stop();
  twin.stop();
  return 0;
}

// ---------------------------------------------------------------- replay

struct ReplayOptions {
  std::string file;
  double speed = 0;
  std::string store;
  std::string export_file;
};

std::vector<BuildJob> read_dump(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(kExitIo, ErrorCode::kBadRequest, "cannot read " + path);
  return read_jobs_ndjson(in);
}

json webhook_body(const BuildJob& j) {
  return {{"object_kind", "build"},
          {"build_id", j.job_id},
          {"build_name", j.name},
          {"build_status", std::string(to_string(j.status))},
          {"project_id", j.project_id},
          {"pipeline_id", j.pipeline_id},
          {"ref", j.ref}};
}

int cmd_replay(const ReplayOptions& o) {
  auto jobs = read_dump(o.file);
  if (!(o.speed >= 0)) fail(kExitUsage, ErrorCode::kBadRequest, "--speed must be ≥ 0");
  // Each job is announced once, at the last moment its record changed.
  auto updated = [](const BuildJob& j) { return j.finished_at.value_or(j.started_at.value_or(j.created_at)); };
  std::stable_sort(jobs.begin(), jobs.end(), [&](const BuildJob& a, const BuildJob& b) {
    return std::pair(updated(a), a.job_id) < std::pair(updated(b), b.job_id);
  });

  TwinConfig cfg;
  cfg.apply_env();
  cfg.actual_twin = "none";
  cfg.webhook_token = "replay";
  if (!o.store.empty()) cfg.store_dir = o.store;
  SystemClock clock;
  auto reader = std::make_shared<FixtureReader>(jobs);
  Twin twin(cfg, clock, reader, nullptr);
  twin.start();

  std::size_t accepted = 0, rejected = 0;
  const auto wall0 = std::chrono::steady_clock::now();
  for (const auto& j : jobs) {
    if (g_stop) break;
    if (o.speed > 0) {
      const double offset = seconds_between(updated(jobs.front()), updated(j)) / o.speed;
      std::this_thread::sleep_until(wall0 + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                                std::chrono::duration<double>(offset)));
    }
    auto r = twin.webhooks().handle(cfg.webhook_token, webhook_body(j).dump());
    (r.status == 202 ? accepted : rejected)++;
  }
  twin.wait_idle(std::chrono::minutes(30));
  const auto dead = twin.store().read_log(std::string(kDeadLetterLog)).size();

  if (!o.export_file.empty()) {
    std::ofstream out(o.export_file);
    if (!out) fail(kExitIo, ErrorCode::kBadRequest, "cannot write " + o.export_file);
    export_jobs(twin.store(), out);
    if (!out) fail(kExitIo, ErrorCode::kBadRequest, "write failed for " + o.export_file);
  }
  twin.stop();
  std::cout << json{{"records", jobs.size()},
                    {"accepted", accepted},
                    {"rejected", rejected},
                    {"stored", twin.store().job_count()},
                    {"quarantined", dead}}
                   .dump()
            << std::endl;
  return 0;
}

// ---------------------------------------------------------------- inspection

struct MetricsOptions {
  Remote remote;
  std::string scope = "ALL";
  std::string interval = "daily";
  std::string from, to;
  bool json_out = false;
};

std::string cell(const json& v, int precision) {
  if (v.is_null()) return "-";
  std::ostringstream os;
  if (v.is_number_integer())
    os << v.get<std::int64_t>();
  else
    os << std::fixed << std::setprecision(precision) << v.get<double>();
  return os.str();
}

int cmd_metrics(const MetricsOptions& o) {
  parse_time_arg(o.from, "--from");
  parse_time_arg(o.to, "--to");
  if (!interval_from_string(o.interval)) fail(kExitUsage, ErrorCode::kBadRequest, "unknown --interval " + o.interval);
  const std::string path = "/metrics/series?scope=" + httplib::detail::encode_query_param(o.scope) +
                           "&interval=" + o.interval + "&from=" + httplib::detail::encode_query_param(o.from) +
                           "&to=" + httplib::detail::encode_query_param(o.to);
  auto res = o.remote.call("GET", path);
  if (o.json_out) {
    std::cout << res.dump() << std::endl;
    return 0;
  }
  std::printf("%-22s %10s %14s %14s %14s\n", "window_start", "executions", "mean_duration", "failure_ratio",
              "flaky_ratio");
  for (const auto& s : res.value("series", json::array())) {
    // Windows with no activity are left out of the table.
    if (s.value("executions_frequency", 0) == 0 && !s.contains("mean_duration")) continue;
    std::printf("%-22s %10s %14s %14s %14s\n", s["window_start"].get<std::string>().c_str(),
                cell(s["executions_frequency"], 0).c_str(), cell(s.value("mean_duration", json()), 1).c_str(),
                cell(s.value("failure_ratio", json()), 4).c_str(),
                cell(s.value("flaky_failure_ratio", json()), 4).c_str());
  }
  return 0;
}

struct ExportOptions {
  Remote remote;
  std::string store;
  std::string out;
};

int cmd_export(const ExportOptions& o) {
  std::string data;
  if (!o.store.empty()) {
    if (!std::filesystem::is_directory(o.store)) fail(kExitIo, ErrorCode::kStorageUnavailable, "no store at " + o.store);
    FileStorage store(o.store);
    std::ostringstream os;
    export_jobs(store, os);
    data = os.str();
  } else {
    data = o.remote.raw_get("/export");
  }
  if (o.out.empty() || o.out == "-") {
    std::cout << data;
    return 0;
  }
  std::ofstream out(o.out);
  if (!out || !(out << data)) fail(kExitIo, ErrorCode::kBadRequest, "cannot write " + o.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"buildtwin: a digital twin of a CI build system"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")->default_val(log_level);

  HostOptions serve_opts;
  auto* serve = app.add_subcommand("serve", "Run the twin and its HTTP API");
  serve->add_option("--config", serve_opts.config, "TOML config file");
  add_host_options(serve, serve_opts);

  Remote backfill_remote;
  std::string projects;
  std::optional<std::int64_t> limit;
  auto* backfill = app.add_subcommand("backfill", "Ask a running service to backfill history");
  add_remote(backfill, backfill_remote);
  backfill->add_option("--projects", projects, "Comma-separated project ids (default: all)");
  backfill->add_option("--limit", limit, "Newest jobs to keep per project")->check(CLI::PositiveNumber);

  ReplayOptions replay_opts;
  auto* replay = app.add_subcommand("replay", "Feed an export through the webhook path of an in-process twin");
  replay->add_option("--file", replay_opts.file, "Export (newline-delimited JSON)")->required();
  replay->add_option("--speed", replay_opts.speed, "Time scale; 0 replays without pauses")->default_val(0);
  replay->add_option("--store", replay_opts.store, "Store directory to replay into (in-memory when unset)");
  replay->add_option("--export", replay_opts.export_file, "Write the resulting store as an export");

  SimulateOptions sim_opts;
  auto* simulate = app.add_subcommand("simulate", "Run the simulator against a serving twin");
  simulate->add_option("--config", sim_opts.sim_config, "Simulator TOML")->required();
  simulate->add_option("--twin-config", sim_opts.host.config, "Twin TOML config");
  simulate->add_option("--horizon", sim_opts.horizon, "Simulated span, e.g. 12h or 7d")->default_val(sim_opts.horizon);
  simulate->add_option("--speed", sim_opts.speed, "Simulated seconds per wall second; 0 runs unpaced")
      ->default_val(sim_opts.speed);
  simulate->add_flag("--exit", sim_opts.exit_when_done, "Exit once the horizon is reached instead of serving on");
  add_host_options(simulate, sim_opts.host);

  MetricsOptions metrics_opts;
  auto* metrics = app.add_subcommand("metrics", "Print a metric series from a running service");
  add_remote(metrics, metrics_opts.remote);
  metrics->add_option("--scope", metrics_opts.scope, "ALL or comma-separated project ids")->default_val("ALL");
  metrics->add_option("--interval", metrics_opts.interval, "hourly, daily, weekly, monthly or yearly")
      ->default_val("daily");
  metrics->add_option("--from", metrics_opts.from, "Window start (RFC 3339)")->required();
  metrics->add_option("--to", metrics_opts.to, "Range end, exclusive (RFC 3339)")->required();
  metrics->add_flag("--json", metrics_opts.json_out, "Print the raw JSON response");

  ExportOptions export_opts;
  auto* exp = app.add_subcommand("export", "Dump stored jobs as newline-delimited JSON");
  add_remote(exp, export_opts.remote);
  exp->add_option("--store", export_opts.store, "Read a store directory instead of a running service");
  exp->add_option("--out", export_opts.out, "Output file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }
  spdlog::set_default_logger(spdlog::stderr_color_mt("buildtwin"));
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*serve) return cmd_serve(serve_opts);
    if (*simulate) return cmd_simulate(sim_opts);
    if (*replay) return cmd_replay(replay_opts);
    if (*metrics) {
      metrics_opts.remote.token = resolve_token(metrics_opts.remote.token);
      return cmd_metrics(metrics_opts);
    }
    if (*exp) return cmd_export(export_opts);
    if (*backfill) {
      backfill_remote.token = resolve_token(backfill_remote.token);
      json body = json::object();
      if (!projects.empty()) {
        json ids = json::array();
        std::stringstream ss(projects);
        std::string item;
        while (std::getline(ss, item, ',')) {
          try {
            ids.push_back(std::stoll(item));
          } catch (const std::exception&) {
            fail(kExitUsage, ErrorCode::kBadRequest, "--projects must be comma-separated integers");
          }
        }
        body["projects"] = ids;
      }
      if (limit) body["limit"] = *limit;
      std::cout << backfill_remote.call("POST", "/ingest/backfill", body).dump() << std::endl;
      return 0;
    }
  } catch (const Exit& e) {
    std::cerr << e.envelope.dump() << std::endl;
    return e.code;
  } catch (const Error& e) {
    std::cerr << e.envelope().dump() << std::endl;
    switch (e.code()) {
      case ErrorCode::kBadConfig:
      case ErrorCode::kInvalidConfig:
      case ErrorCode::kBadRequest:
        return kExitUsage;
      case ErrorCode::kActualTwinUnreachable:
      case ErrorCode::kRateLimited:
        return kExitRemote;
      default:
        return kExitIo;
    }
  } catch (const std::exception& e) {
    std::cerr << json{{"code", "INTERNAL"}, {"message", e.what()}, {"details", nullptr}}.dump() << std::endl;
    return kExitIo;
  }
  return kExitUsage;
}
