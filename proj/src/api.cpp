#include "buildtwin/api.hpp"

#include "buildtwin/codec.hpp"
#include "buildtwin/errors.hpp"
#include "buildtwin/ids.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <sstream>

namespace buildtwin {

using nlohmann::json;
using httplib::Request;
using httplib::Response;

namespace {

[[noreturn]] void bad_request(const std::string& m, json details = nullptr) {
  throw Error(ErrorCode::kBadRequest, m, std::move(details));
}

void send_json(Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(Response& res, const Error& e) { send_json(res, http_status_for(e.code()), e.envelope()); }

std::optional<std::string> param(const Request& req, const char* key) {
  if (!req.has_param(key)) return std::nullopt;
  auto v = req.get_param_value(key);
  if (v.empty()) return std::nullopt;
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::int64_t to_int(const std::string& s, const char* name) {
  try {
    std::size_t pos = 0;
    auto v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    bad_request(std::string(name) + " must be an integer", {{"param", name}, {"value", s}});
  }
}

std::optional<Timestamp> time_param(const Request& req, const char* key) {
  auto v = param(req, key);
  if (!v) return std::nullopt;
  auto t = parse_timestamp(*v);
  if (!t) bad_request(std::string(key) + " must be an RFC 3339 timestamp", {{"param", key}, {"value", *v}});
  return t;
}

Timestamp required_time(const Request& req, const char* key) {
  auto t = time_param(req, key);
  if (!t) bad_request(std::string("missing ") + key, {{"param", key}});
  return *t;
}

Scope scope_param(const Request& req) {
  auto v = param(req, "scope");
  if (!v || *v == "ALL" || *v == "all") return Scope::everything();
  std::vector<ProjectId> ids;
  for (const auto& s : split(*v, ',')) ids.push_back(to_int(s, "scope"));
  if (ids.empty()) bad_request("scope must be ALL or a list of project ids");
  return Scope::of(std::move(ids));
}

Interval interval_param(const Request& req) {
  auto v = param(req, "interval");
  if (!v) bad_request("missing interval", {{"param", "interval"}});
  auto i = interval_from_string(*v);
  if (!i) bad_request("interval must be hourly, daily, weekly, monthly or yearly", {{"value", *v}});
  return *i;
}

Scenario scenario_from(const json& j) {
  auto s = decode<Scenario>(j);
  if (s.scenario_id.empty()) s.scenario_id = default_ids().next("scn");
  if (s.label.empty()) s.label = s.scenario_id;
  return s;
}

json parse_body(const Request& req) {
  auto body = json::parse(req.body, nullptr, false);
  if (body.is_discarded()) bad_request("request body is not valid JSON");
  return body;
}

JobQuery job_query(const Request& req) {
  JobQuery q;
  if (auto v = param(req, "project_id")) {
    std::vector<ProjectId> ids;
    for (const auto& s : split(*v, ',')) ids.push_back(to_int(s, "project_id"));
    q.project_ids = ids;
  }
  if (auto v = param(req, "status")) {
    std::vector<JobStatus> st;
    for (const auto& s : split(*v, ',')) {
      auto js = job_status_from_string(s);
      if (!js) throw Error(ErrorCode::kInvalidQuery, "unknown status " + s, {{"param", "status"}});
      st.push_back(*js);
    }
    q.statuses = st;
  }
  q.ref = param(req, "ref");
  q.name = param(req, "name");
  if (auto v = param(req, "pipeline_id")) q.pipeline_id = to_int(*v, "pipeline_id");
  if (auto v = param(req, "flaky")) {
    if (*v != "true" && *v != "false") throw Error(ErrorCode::kInvalidQuery, "flaky must be true or false");
    q.flaky = *v == "true";
  }
  auto cf = time_param(req, "created_from"), ct = time_param(req, "created_to");
  if (cf || ct) q.created_at = TimeRange{cf, ct};
  auto ff = time_param(req, "finished_from"), ft = time_param(req, "finished_to");
  if (ff || ft) q.finished_at = TimeRange{ff, ft};
  if (auto v = param(req, "offset")) {
    auto n = to_int(*v, "offset");
    if (n < 0) throw Error(ErrorCode::kInvalidQuery, "offset must be ≥ 0");
    q.offset = static_cast<std::size_t>(n);
  }
  if (auto v = param(req, "limit")) {
    auto n = to_int(*v, "limit");
    if (n < 1) throw Error(ErrorCode::kInvalidQuery, "limit must be ≥ 1");
    q.limit = static_cast<std::size_t>(n);
  }
  if (auto v = param(req, "sort")) {
    if (*v == "asc") q.sort = SortOrder::kAsc;
    else if (*v == "desc") q.sort = SortOrder::kDesc;
    else throw Error(ErrorCode::kInvalidQuery, "sort must be asc or desc");
  }
  return q;
}

}  // namespace

struct ApiServer::Impl {
  Twin& twin;
  httplib::Server server;
  std::thread thread;
  int port = 0;

  explicit Impl(Twin& t) : twin(t) {
    // httplib also sets SO_REUSEPORT, which lets a second server share the port.
    server.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
    routes();
  }

  void require_token(const Request& req) {
    const auto& token = twin.config().api_token;
    if (token.empty()) return;
    const auto header = req.get_header_value("Authorization");
    const std::string prefix = "Bearer ";
    const std::string given = header.rfind(prefix, 0) == 0 ? header.substr(prefix.size()) : std::string{};
    if (!constant_time_equals(token, given))
      throw Error(ErrorCode::kUnauthorized, "missing or invalid bearer token");
  }

  void cors(const Request& req, Response& res) {
    const auto& origins = twin.config().cors_origins;
    const auto origin = req.get_header_value("Origin");
    if (std::find(origins.begin(), origins.end(), "*") != origins.end())
      res.set_header("Access-Control-Allow-Origin", "*");
    else if (!origin.empty() && std::find(origins.begin(), origins.end(), origin) != origins.end())
      res.set_header("Access-Control-Allow-Origin", origin);
    else
      return;
    res.set_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Authorization, Content-Type, X-Gitlab-Token");
  }

  template <typename F>
  httplib::Server::Handler read(F f) {
    return [this, f](const Request& req, Response& res) {
      cors(req, res);
      f(req, res);
    };
  }

  template <typename F>
  httplib::Server::Handler write(F f) {
    return [this, f](const Request& req, Response& res) {
      cors(req, res);
      require_token(req);
      f(req, res);
    };
  }

  void routes() {
    server.set_exception_handler([this](const Request& req, Response& res, std::exception_ptr ep) {
      cors(req, res);
      try {
        std::rethrow_exception(ep);
      } catch (const Error& e) {
        send_error(res, e);
      } catch (const std::exception& e) {
        spdlog::error("{} {} failed: {}", req.method, req.path, e.what());
        send_json(res, 500, {{"code", "INTERNAL"}, {"message", e.what()}, {"details", nullptr}});
      }
    });
    server.set_error_handler([this](const Request& req, Response& res) {
      if (!res.body.empty()) return;
      cors(req, res);
      if (res.status == 404)
        send_error(res, Error(ErrorCode::kNotFound, "no route for " + req.method + " " + req.path));
    });
    server.Options(R"(/.*)", [this](const Request& req, Response& res) {
      cors(req, res);
      res.status = 204;
    });

    server.Get("/health", read([this](const Request&, Response& res) {
      const bool store_ok = twin.store().healthy();
      const bool bus_ok = twin.bus().healthy();
      send_json(res, store_ok && bus_ok ? 200 : 503,
                {{"status", store_ok && bus_ok ? "ok" : "degraded"},
                 {"store", store_ok ? "ok" : "unavailable"},
                 {"bus", bus_ok ? "ok" : "unavailable"}});
    }));
    server.Get("/version", read([](const Request&, Response& res) {
      send_json(res, 200, {{"name", "buildtwin"}, {"version", kVersion}, {"feature_schema", kFeatureSchemaVersion}});
    }));
    server.Get("/openapi.json", read([](const Request&, Response& res) { send_json(res, 200, openapi_document()); }));

    server.Post("/webhooks/jobs", [this](const Request& req, Response& res) {
      cors(req, res);
      std::optional<std::string> token;
      if (req.has_header("X-Gitlab-Token")) token = req.get_header_value("X-Gitlab-Token");
      auto r = twin.webhooks().handle(token, req.body);
      send_json(res, r.status, r.body);
    });

    server.Get("/jobs", read([this](const Request& req, Response& res) {
      auto q = job_query(req);
      auto page = twin.store().query_jobs(q);
      send_json(res, 200, {{"jobs", page.jobs}, {"total_count", page.total_count}, {"offset", q.offset}, {"limit", q.limit}});
    }));
    server.Get(R"(/jobs/(\d+))", read([this](const Request& req, Response& res) {
      const JobId id = to_int(req.matches[1], "job_id");
      auto job = twin.store().get_job(id);
      if (!job) throw Error(ErrorCode::kNotFound, "no job " + std::to_string(id), {{"job_id", id}});
      send_json(res, 200, *job);
    }));
    server.Get("/export", read([this](const Request&, Response& res) {
      std::ostringstream os;
      export_jobs(twin.store(), os);
      res.status = 200;
      res.set_content(os.str(), "application/x-ndjson");
    }));
    server.Get("/dead-letter", read([this](const Request&, Response& res) {
      send_json(res, 200, {{"records", twin.store().read_log(std::string(kDeadLetterLog))}});
    }));

    server.Post("/ingest/backfill", write([this](const Request& req, Response& res) {
      if (!twin.reader()) throw Error(ErrorCode::kActualTwinUnreachable, "no actual twin configured");
      json body = req.body.empty() ? json::object() : parse_body(req);
      BackfillConfig cfg;
      if (body.contains("projects")) cfg.project_ids = decode<std::vector<ProjectId>>(body["projects"]);
      else cfg.project_ids = twin.project_ids();
      if (body.contains("limit") && !body["limit"].is_null()) {
        auto limit = decode<std::int64_t>(body["limit"]);
        if (limit < 1) bad_request("limit must be ≥ 1");
        cfg.max_jobs_per_project = static_cast<std::size_t>(limit);
      } else {
        cfg.max_jobs_per_project = twin.config().max_history_jobs;
      }
      cfg.page_size = body.value("page_size", kMaxPerPage);
      send_json(res, 200, twin.ingestor().backfill(cfg, *twin.reader()).to_json());
    }));
    server.Post("/ingest/refresh", write([this](const Request& req, Response& res) {
      if (!twin.reader()) throw Error(ErrorCode::kActualTwinUnreachable, "no actual twin configured");
      json body = req.body.empty() ? json::object() : parse_body(req);
      auto projects = body.contains("projects") ? decode<std::vector<ProjectId>>(body["projects"]) : twin.project_ids();
      send_json(res, 200, twin.ingestor().refresh(projects, *twin.reader()).to_json());
    }));

    server.Get("/metrics/series", read([this](const Request& req, Response& res) {
      const auto scope = scope_param(req);
      const auto interval = interval_param(req);
      const auto from = required_time(req, "from");
      const auto to = required_time(req, "to");
      auto s = twin.metrics().series(scope, interval, from, to);
      send_json(res, 200, {{"scope", scope}, {"interval", to_string(interval)}, {"series", s}});
    }));
    server.Get("/metrics/snapshot", read([this](const Request& req, Response& res) {
      send_json(res, 200, twin.metrics().snapshot(scope_param(req), interval_param(req), required_time(req, "window_start")));
    }));

    server.Get("/alerts", read([this](const Request&, Response& res) {
      send_json(res, 200, {{"rules", twin.alerts().rules()}});
    }));
    server.Post("/alerts", write([this](const Request& req, Response& res) {
      send_json(res, 201, twin.alerts().add_rule(decode<AlertRule>(parse_body(req))));
    }));
    server.Delete(R"(/alerts/([^/]+))", write([this](const Request& req, Response& res) {
      const std::string id = req.matches[1];
      if (!twin.alerts().remove_rule(id)) throw Error(ErrorCode::kNotFound, "no alert rule " + id, {{"rule_id", id}});
      res.status = 204;
    }));
    server.Get("/alerts/firings", read([this](const Request&, Response& res) {
      send_json(res, 200, {{"firings", twin.alerts().recent_firings()}});
    }));
    server.Post("/alerts/evaluate", write([this](const Request&, Response& res) {
      send_json(res, 200, {{"firings", twin.alerts().evaluate(twin.clock().now())}});
    }));

    server.Get("/predictions", read([this](const Request& req, Response& res) {
      std::vector<PredictionRecord> preds;
      if (auto id = param(req, "job_id")) {
        preds = twin.store().predictions_for_job(to_int(*id, "job_id"));
      } else {
        auto from = time_param(req, "from"), to = time_param(req, "to");
        if (!from && !to) bad_request("give job_id or a from/to range");
        if (from && to && *from > *to) throw Error(ErrorCode::kInvertedRange, "from must not be after to");
        preds = twin.store().predictions_between(TimeRange{from, to});
      }
      send_json(res, 200, {{"predictions", preds}});
    }));
    server.Get("/anomalies", read([this](const Request& req, Response& res) {
      auto from = time_param(req, "from"), to = time_param(req, "to");
      if (from && to && *from > *to) throw Error(ErrorCode::kInvertedRange, "from must not be after to");
      std::vector<PredictionRecord> out;
      for (auto& p : twin.store().predictions_between(TimeRange{from, to}))
        if (p.anomaly.value_or(false)) out.push_back(std::move(p));
      send_json(res, 200, {{"anomalies", out}});
    }));
    server.Get("/models/snapshots", read([this](const Request&, Response& res) {
      auto view = twin.registry().view();
      json snaps = json::array();
      for (const auto& [_, s] : view->snapshots) snaps.push_back(s->to_json());
      send_json(res, 200, {{"view_id", view->view_id}, {"snapshots", snaps}});
    }));

    server.Post("/whatif/evaluate", read([this](const Request& req, Response& res) {
      send_json(res, 200, twin.whatif().evaluate(scenario_from(parse_body(req))));
    }));
    server.Post("/whatif/compare", read([this](const Request& req, Response& res) {
      auto body = parse_body(req);
      if (!body.is_object() || !body.contains("scenarios") || !body["scenarios"].is_array() || body["scenarios"].empty())
        bad_request("scenarios must be a non-empty array");
      std::vector<Scenario> scenarios;
      for (const auto& s : body["scenarios"]) scenarios.push_back(scenario_from(s));
      auto metric = whatif_metric_from_string(body.value("metric", "failure_probability"));
      if (!metric) bad_request("unknown metric");
      const auto order = body.value("order", "minimize");
      if (order != "minimize" && order != "maximize") bad_request("order must be minimize or maximize");
      json ranking = json::array();
      for (const auto& r : twin.whatif().compare(scenarios, *metric, order == "minimize"))
        ranking.push_back({{"rank", r.rank}, {"report", r.report}});
      send_json(res, 200, {{"metric", to_string(*metric)}, {"order", order}, {"ranking", ranking}});
    }));

    server.Get("/actions", read([this](const Request& req, Response& res) {
      std::optional<ActionStatus> status;
      if (auto v = param(req, "status")) {
        status = action_status_from_string(*v);
        if (!status) bad_request("unknown status " + *v);
      }
      send_json(res, 200, {{"actions", twin.improve().list(status)}});
    }));
    server.Get(R"(/actions/([^/]+))", read([this](const Request& req, Response& res) {
      const std::string id = req.matches[1];
      auto a = twin.improve().get(id);
      if (!a) throw Error(ErrorCode::kNotFound, "no action " + id, {{"action_id", id}});
      send_json(res, 200, *a);
    }));
    server.Post(R"(/actions/([^/]+)/approve)", write([this](const Request& req, Response& res) {
      send_json(res, 200, twin.improve().approve(req.matches[1]));
    }));
    server.Post(R"(/actions/([^/]+)/reject)", write([this](const Request& req, Response& res) {
      send_json(res, 200, twin.improve().reject(req.matches[1]));
    }));
    server.Post(R"(/actions/([^/]+)/apply)", write([this](const Request& req, Response& res) {
      if (!twin.writer()) throw Error(ErrorCode::kActualTwinUnreachable, "no actual twin writer configured");
      send_json(res, 200, twin.improve().apply(req.matches[1], *twin.writer()));
    }));
  }
};

ApiServer::ApiServer(Twin& twin) : impl_(std::make_unique<Impl>(twin)) {}

ApiServer::~ApiServer() { stop(); }

int ApiServer::start(std::optional<int> port) {
  const auto& host = impl_->twin.config().host;
  const int p = port.value_or(impl_->twin.config().port);
  if (p == 0) {
    impl_->port = impl_->server.bind_to_any_port(host);
    if (impl_->port <= 0) throw Error(ErrorCode::kPortInUse, "cannot bind " + host);
  } else {
    if (!impl_->server.bind_to_port(host, p))
      throw Error(ErrorCode::kPortInUse, "port " + std::to_string(p) + " is in use", {{"port", p}});
    impl_->port = p;
  }
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return impl_->port;
}

void ApiServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

void ApiServer::wait() {
  if (impl_->thread.joinable()) impl_->thread.join();
}

int ApiServer::port() const { return impl_->port; }

}  // namespace buildtwin
