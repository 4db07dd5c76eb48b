#include "buildtwin/sim_server.hpp"

#include "buildtwin/errors.hpp"
#include "buildtwin/ids.hpp"

#include <httplib.h>

namespace buildtwin {

struct SimulatorServer::Impl {
  Simulator& sim;
  std::string token;
  httplib::Server server;
  std::thread thread;
  int port = 0;

  Impl(Simulator& s, std::string t) : sim(s), token(std::move(t)) {
    server.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
    });
  }

  static void reply(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  template <typename F>
  void guarded(const httplib::Request& req, httplib::Response& res, F&& f) {
    if (!token.empty() && !constant_time_equals(token, req.get_header_value("PRIVATE-TOKEN"))) {
      reply(res, 401, {{"message", "401 Unauthorized"}});
      return;
    }
    try {
      f();
    } catch (const Error& e) {
      switch (e.code()) {
        case ErrorCode::kRateLimited:
          res.set_header("Retry-After", std::to_string(e.details().value("retry_after", 1.0)));
          reply(res, 429, {{"message", "429 Too Many Requests"}});
          break;
        case ErrorCode::kNotFound: reply(res, 404, {{"message", "404 Not found"}}); break;
        case ErrorCode::kActualTwinUnreachable: reply(res, 503, {{"message", e.what()}}); break;
        case ErrorCode::kWriterRejected: reply(res, 400, {{"message", e.what()}}); break;
        default: reply(res, 400, {{"message", e.what()}}); break;
      }
    }
  }

  static ProjectId project_of(const httplib::Request& req) { return std::stoll(req.matches[1]); }

  static std::string param(const httplib::Request& req, const std::string& key) {
    if (req.has_param(key)) return req.get_param_value(key);
    if (req.get_header_value("Content-Type").find("application/json") != std::string::npos) {
      auto body = nlohmann::json::parse(req.body, nullptr, false);
      if (body.is_object() && body.contains(key) && body[key].is_string()) return body[key].get<std::string>();
    }
    return {};
  }

  void routes() {
    server.Get("/api/v4/projects", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] {
        nlohmann::json out = nlohmann::json::array();
        for (const auto& p : sim.list_projects())
          out.push_back({{"id", p.project_id}, {"path_with_namespace", p.path}, {"default_branch", p.default_ref}});
        reply(res, 200, out);
      });
    });
    server.Get(R"(/api/v4/projects/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] {
        for (const auto& p : sim.list_projects())
          if (p.project_id == project_of(req))
            return reply(res, 200, {{"id", p.project_id}, {"path_with_namespace", p.path}, {"default_branch", p.default_ref}});
        throw Error(ErrorCode::kNotFound, "project");
      });
    });
    server.Get(R"(/api/v4/projects/(\d+)/jobs)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] {
        int page = req.has_param("page") ? std::stoi(req.get_param_value("page")) : 1;
        int per_page = req.has_param("per_page") ? std::stoi(req.get_param_value("per_page")) : 20;
        std::optional<Timestamp> after;
        if (req.has_param("updated_after")) {
          after = parse_timestamp(req.get_param_value("updated_after"));
          if (!after) throw Error(ErrorCode::kBadRequest, "updated_after");
        }
        reply(res, 200, sim.list_jobs(project_of(req), page, per_page, after));
      });
    });
    server.Get(R"(/api/v4/projects/(\d+)/jobs/(\d+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] { reply(res, 200, sim.get_job(project_of(req), std::stoll(req.matches[2]))); });
    });
    server.Post(R"(/api/v4/projects/(\d+)/jobs/(\d+)/retry)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] {
        auto r = sim.retry_job(project_of(req), std::stoll(req.matches[2]));
        reply(res, 201, {{"id", std::stoll(r.response_id.substr(4))}});
      });
    });
    server.Post(R"(/api/v4/projects/(\d+)/variables)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] {
        auto key = param(req, "key");
        if (key.empty()) throw Error(ErrorCode::kWriterRejected, "key is missing");
        if (sim.ci_variable(project_of(req), key)) throw Error(ErrorCode::kWriterRejected, "key has already been taken");
        sim.set_ci_variable(project_of(req), key, param(req, "value"));
        reply(res, 201, {{"key", key}, {"value", param(req, "value")}});
      });
    });
    server.Put(R"(/api/v4/projects/(\d+)/variables/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(req, res, [&] {
        std::string key = req.matches[2];
        if (!sim.ci_variable(project_of(req), key)) throw Error(ErrorCode::kNotFound, "variable");
        sim.set_ci_variable(project_of(req), key, param(req, "value"));
        reply(res, 200, {{"key", key}, {"value", param(req, "value")}});
      });
    });
    auto file_handler = [this](bool create) {
      return [this, create](const httplib::Request& req, httplib::Response& res) {
        guarded(req, res, [&] {
          const auto path = httplib::detail::decode_url(req.matches[2], false);
          const bool exists = sim.file(project_of(req), path).has_value();
          if (create && exists) throw Error(ErrorCode::kWriterRejected, "A file with this name already exists");
          if (!create && !exists) throw Error(ErrorCode::kWriterRejected, "A file with this name doesn't exist");
          sim.upsert_file(project_of(req), path, param(req, "content"), param(req, "commit_message"));
          reply(res, create ? 201 : 200, {{"file_path", path}, {"branch", param(req, "branch")}});
        });
      };
    };
    server.Post(R"(/api/v4/projects/(\d+)/repository/files/(.+))", file_handler(true));
    server.Put(R"(/api/v4/projects/(\d+)/repository/files/(.+))", file_handler(false));
  }
};

SimulatorServer::SimulatorServer(Simulator& sim, std::string private_token)
    : impl_(std::make_unique<Impl>(sim, std::move(private_token))) {
  impl_->routes();
}

SimulatorServer::~SimulatorServer() { stop(); }

int SimulatorServer::start(int port) {
  if (port == 0) {
    impl_->port = impl_->server.bind_to_any_port("127.0.0.1");
    if (impl_->port <= 0) throw Error(ErrorCode::kPortInUse, "no free port");
  } else {
    if (!impl_->server.bind_to_port("127.0.0.1", port))
      throw Error(ErrorCode::kPortInUse, "port " + std::to_string(port) + " in use");
    impl_->port = port;
  }
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return impl_->port;
}

void SimulatorServer::stop() {
  if (!impl_->thread.joinable()) return;
  impl_->server.stop();
  impl_->thread.join();
}

std::string SimulatorServer::base_url() const {
  return "http://127.0.0.1:" + std::to_string(impl_->port);
}

}  // namespace buildtwin
