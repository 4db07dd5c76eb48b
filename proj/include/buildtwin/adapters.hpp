#pragma once

// Boundary to the actual twin (the CI platform). Raw job records follow the
// GitLab jobs API shape: {id, name, ref, status, created_at, started_at,
// finished_at, duration, queued_duration, pipeline: {id, project_id},
// commit: {id}, runner: {id}}. Unknown fields are ignored downstream.

#include "buildtwin/types.hpp"

#include <nlohmann/json.hpp>

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace buildtwin {

using RawJob = nlohmann::json;

inline constexpr int kMaxPerPage = 100;

class ActualTwinReader {
 public:
  virtual ~ActualTwinReader() = default;

  /// 1-based page, newest first. A page past the end is empty.
  /// Throws Error{kActualTwinUnreachable}, Error{kRateLimited} (details.retry_after
  /// in seconds), Error{kBadRequest} for per_page outside [1, 100].
  virtual std::vector<RawJob> list_jobs(ProjectId project, int page, int per_page,
                                        std::optional<Timestamp> updated_after) = 0;
  /// Throws Error{kNotFound} for an unknown job, plus the errors above.
  virtual RawJob get_job(ProjectId project, JobId job) = 0;
  virtual std::vector<Project> list_projects() = 0;
};

struct WriteResult {
  std::string response_id;
};

class ActualTwinWriter {
 public:
  virtual ~ActualTwinWriter() = default;

  /// All throw Error{kWriterRejected} when the platform refuses the change.
  virtual WriteResult set_ci_variable(ProjectId project, const std::string& key,
                                      const std::string& value) = 0;
  virtual WriteResult retry_job(ProjectId project, JobId job) = 0;
  virtual WriteResult upsert_file(ProjectId project, const std::string& path,
                                  const std::string& content, const std::string& message) = 0;
};

/// Latest of created_at, started_at and finished_at in a raw record.
std::optional<Timestamp> raw_job_updated_at(const RawJob& raw);

/// Throws Error{kRateLimited} with details.retry_after.
[[noreturn]] void throw_rate_limited(double retry_after_seconds);

/// GitLab-shaped raw record for a stored job; preprocess() maps it back.
RawJob to_raw_job(const BuildJob& job);

/// Read-only platform over a fixed job set, e.g. a replayed export.
class FixtureReader final : public ActualTwinReader {
 public:
  explicit FixtureReader(const std::vector<BuildJob>& jobs);

  std::vector<RawJob> list_jobs(ProjectId project, int page, int per_page,
                                std::optional<Timestamp> updated_after) override;
  RawJob get_job(ProjectId project, JobId job) override;
  std::vector<Project> list_projects() override;

 private:
  std::map<JobId, RawJob> jobs_;
  std::map<ProjectId, std::vector<JobId>> by_project_;  // newest first
};

/// Connection settings for a GitLab-compatible HTTP API.
struct GitlabConfig {
  /// e.g. "https://gitlab.example.com" or "http://127.0.0.1:8081".
  std::string base_url;
  /// Sent as PRIVATE-TOKEN.
  std::string token;
  std::vector<ProjectId> projects;
  int timeout_seconds = 10;
};

/// HTTP implementation of both contracts against /api/v4.
class GitlabClient final : public ActualTwinReader, public ActualTwinWriter {
 public:
  explicit GitlabClient(GitlabConfig cfg);
  ~GitlabClient() override;

  std::vector<RawJob> list_jobs(ProjectId project, int page, int per_page,
                                std::optional<Timestamp> updated_after) override;
  RawJob get_job(ProjectId project, JobId job) override;
  std::vector<Project> list_projects() override;

  WriteResult set_ci_variable(ProjectId project, const std::string& key,
                              const std::string& value) override;
  WriteResult retry_job(ProjectId project, JobId job) override;
  WriteResult upsert_file(ProjectId project, const std::string& path, const std::string& content,
                          const std::string& message) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace buildtwin
