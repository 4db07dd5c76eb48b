#include "buildtwin/adapters.hpp"

#include "buildtwin/errors.hpp"

#include <httplib.h>

#include <algorithm>

namespace buildtwin {

std::optional<Timestamp> raw_job_updated_at(const RawJob& raw) {
  std::optional<Timestamp> latest;
  for (const char* key : {"created_at", "started_at", "finished_at"}) {
    auto it = raw.find(key);
    if (it == raw.end() || !it->is_string()) continue;
    if (auto t = parse_timestamp(it->get<std::string>()); t && (!latest || *t > *latest)) latest = t;
  }
  return latest;
}

namespace {

std::string encode_component(const std::string& s) {
  static const char* hex = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : s) {
    if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += hex[c >> 4];
      out += hex[c & 15];
    }
  }
  return out;
}

}  // namespace

void throw_rate_limited(double retry_after_seconds) {
  throw Error(ErrorCode::kRateLimited, "rate limited by the platform",
              {{"retry_after", retry_after_seconds}});
}

struct GitlabClient::Impl {
  GitlabConfig cfg;
  std::mutex mu;
  std::unique_ptr<httplib::Client> http;

  explicit Impl(GitlabConfig c) : cfg(std::move(c)) {
    http = std::make_unique<httplib::Client>(cfg.base_url);
    http->set_connection_timeout(cfg.timeout_seconds, 0);
    http->set_read_timeout(cfg.timeout_seconds, 0);
    http->set_write_timeout(cfg.timeout_seconds, 0);
    http->set_default_headers({{"PRIVATE-TOKEN", cfg.token}, {"Accept", "application/json"}});
  }

  static std::string project_path(ProjectId p) { return "/api/v4/projects/" + std::to_string(p); }

  // Maps transport and status failures onto the adapter error taxonomy.
  nlohmann::json check(const httplib::Result& res, bool writer) {
    if (!res) {
      throw Error(ErrorCode::kActualTwinUnreachable,
                  "request failed: " + httplib::to_string(res.error()));
    }
    const int status = res->status;
    if (status == 429) {
      double retry_after = 1.0;
      if (res->has_header("Retry-After")) {
        try {
          retry_after = std::stod(res->get_header_value("Retry-After"));
        } catch (const std::exception&) {
        }
      }
      throw_rate_limited(retry_after);
    }
    if (status >= 500) throw Error(ErrorCode::kActualTwinUnreachable, "platform returned " + std::to_string(status));
    if (status == 404 && !writer) throw Error(ErrorCode::kNotFound, "not found");
    if (status >= 400) {
      if (writer) throw Error(ErrorCode::kWriterRejected, "platform rejected change: " + res->body);
      if (status == 401 || status == 403) throw Error(ErrorCode::kActualTwinUnreachable, "unauthorized");
      throw Error(ErrorCode::kBadRequest, "platform returned " + std::to_string(status));
    }
    if (res->body.empty()) return nlohmann::json::object();
    auto body = nlohmann::json::parse(res->body, nullptr, false);
    if (body.is_discarded()) throw Error(ErrorCode::kActualTwinUnreachable, "platform returned invalid JSON");
    return body;
  }

  nlohmann::json get(const std::string& path, const httplib::Params& params = {}) {
    std::lock_guard lock(mu);
    return check(http->Get(path, params, httplib::Headers{}), false);
  }

  nlohmann::json send(const std::string& method, const std::string& path, const httplib::Params& form) {
    std::lock_guard lock(mu);
    if (method == "PUT") return check(http->Put(path, form), true);
    return check(http->Post(path, form), true);
  }
};

GitlabClient::GitlabClient(GitlabConfig cfg) : impl_(std::make_unique<Impl>(std::move(cfg))) {}
GitlabClient::~GitlabClient() = default;

std::vector<RawJob> GitlabClient::list_jobs(ProjectId project, int page, int per_page,
                                            std::optional<Timestamp> updated_after) {
  if (per_page < 1 || per_page > kMaxPerPage)
    throw Error(ErrorCode::kBadRequest, "per_page must be in [1, 100]");
  httplib::Params params{{"page", std::to_string(page)}, {"per_page", std::to_string(per_page)}};
  if (updated_after) params.emplace("updated_after", format_rfc3339(*updated_after));
  auto body = impl_->get(Impl::project_path(project) + "/jobs", params);
  if (!body.is_array()) throw Error(ErrorCode::kActualTwinUnreachable, "jobs listing is not an array");
  std::vector<RawJob> out;
  for (auto& raw : body) {
    // The jobs API has no server-side updated_after; filter here as well.
    if (updated_after) {
      auto u = raw_job_updated_at(raw);
      if (!u || *u <= *updated_after) continue;
    }
    if (!raw.contains("pipeline") || !raw["pipeline"].is_object()) raw["pipeline"] = nlohmann::json::object();
    if (!raw["pipeline"].contains("project_id")) raw["pipeline"]["project_id"] = project;
    out.push_back(std::move(raw));
  }
  return out;
}

RawJob GitlabClient::get_job(ProjectId project, JobId job) {
  auto raw = impl_->get(Impl::project_path(project) + "/jobs/" + std::to_string(job));
  if (!raw.contains("pipeline") || !raw["pipeline"].is_object()) raw["pipeline"] = nlohmann::json::object();
  if (!raw["pipeline"].contains("project_id")) raw["pipeline"]["project_id"] = project;
  return raw;
}

std::vector<Project> GitlabClient::list_projects() {
  std::vector<Project> out;
  if (!impl_->cfg.projects.empty()) {
    for (ProjectId id : impl_->cfg.projects) {
      auto p = impl_->get(Impl::project_path(id));
      out.push_back({p.value("id", id), p.value("path_with_namespace", std::string{}),
                     p.value("default_branch", std::string("main"))});
    }
    return out;
  }
  auto body = impl_->get("/api/v4/projects", {{"membership", "true"}, {"per_page", "100"}});
  for (const auto& p : body)
    out.push_back({p.value("id", ProjectId{0}), p.value("path_with_namespace", std::string{}),
                   p.value("default_branch", std::string("main"))});
  return out;
}

WriteResult GitlabClient::set_ci_variable(ProjectId project, const std::string& key,
                                          const std::string& value) {
  const auto base = Impl::project_path(project) + "/variables";
  try {
    auto r = impl_->send("POST", base, {{"key", key}, {"value", value}});
    return {"variable-" + r.value("key", key)};
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kWriterRejected) throw;
    // Already exists: update in place.
    auto r = impl_->send("PUT", base + "/" + encode_component(key), {{"value", value}});
    return {"variable-" + r.value("key", key)};
  }
}

WriteResult GitlabClient::retry_job(ProjectId project, JobId job) {
  auto r = impl_->send("POST", Impl::project_path(project) + "/jobs/" + std::to_string(job) + "/retry", {});
  return {"job-" + std::to_string(r.value("id", JobId{0}))};
}

WriteResult GitlabClient::upsert_file(ProjectId project, const std::string& path,
                                      const std::string& content, const std::string& message) {
  const auto url = Impl::project_path(project) + "/repository/files/" +
                   encode_component(path);
  httplib::Params form{{"branch", "main"}, {"content", content}, {"commit_message", message}};
  nlohmann::json r;
  try {
    r = impl_->send("POST", url, form);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kWriterRejected) throw;
    r = impl_->send("PUT", url, form);
  }
  return {"commit-" + r.value("file_path", path)};
}

}  // namespace buildtwin
