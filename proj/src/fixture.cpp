#include "buildtwin/adapters.hpp"
#include "buildtwin/errors.hpp"

#include <algorithm>

namespace buildtwin {

using nlohmann::json;

RawJob to_raw_job(const BuildJob& job) {
  json raw{{"id", job.job_id},
           {"name", job.name},
           {"ref", job.ref},
           {"status", std::string(to_string(job.status))},
           {"created_at", format_rfc3339(job.created_at)},
           {"pipeline", {{"id", job.pipeline_id}, {"project_id", job.project_id}}},
           {"commit", {{"id", job.commit_sha}}}};
  raw["started_at"] = job.started_at ? json(format_rfc3339(*job.started_at)) : json(nullptr);
  raw["finished_at"] = job.finished_at ? json(format_rfc3339(*job.finished_at)) : json(nullptr);
  raw["duration"] = job.duration ? json(*job.duration) : json(nullptr);
  raw["queued_duration"] = job.queued_duration ? json(*job.queued_duration) : json(nullptr);
  raw["runner"] = job.runner_id ? json{{"id", *job.runner_id}} : json(nullptr);
  if (!job.features.empty()) raw["features"] = job.features;
  return raw;
}

FixtureReader::FixtureReader(const std::vector<BuildJob>& jobs) {
  for (const auto& j : jobs) jobs_[j.job_id] = to_raw_job(j);
  for (auto it = jobs_.rbegin(); it != jobs_.rend(); ++it)
    by_project_[it->second["pipeline"]["project_id"].get<ProjectId>()].push_back(it->first);
}

std::vector<RawJob> FixtureReader::list_jobs(ProjectId project, int page, int per_page,
                                             std::optional<Timestamp> updated_after) {
  if (per_page < 1 || per_page > kMaxPerPage)
    throw Error(ErrorCode::kBadRequest, "per_page must be in [1, 100]");
  if (page < 1) throw Error(ErrorCode::kBadRequest, "page must be ≥ 1");
  std::vector<RawJob> matching;
  if (auto it = by_project_.find(project); it != by_project_.end()) {
    for (JobId id : it->second) {
      const auto& raw = jobs_.at(id);
      if (updated_after) {
        auto u = raw_job_updated_at(raw);
        if (!u || *u <= *updated_after) continue;
      }
      matching.push_back(raw);
    }
  }
  const std::size_t begin = static_cast<std::size_t>(page - 1) * static_cast<std::size_t>(per_page);
  if (begin >= matching.size()) return {};
  const std::size_t end = std::min(matching.size(), begin + static_cast<std::size_t>(per_page));
  return {matching.begin() + static_cast<std::ptrdiff_t>(begin), matching.begin() + static_cast<std::ptrdiff_t>(end)};
}

RawJob FixtureReader::get_job(ProjectId project, JobId job) {
  auto it = jobs_.find(job);
  if (it == jobs_.end() || it->second["pipeline"]["project_id"].get<ProjectId>() != project)
    throw Error(ErrorCode::kNotFound, "no job " + std::to_string(job), {{"job_id", job}});
  return it->second;
}

std::vector<Project> FixtureReader::list_projects() {
  std::vector<Project> out;
  for (const auto& [id, _] : by_project_) out.push_back({id, "project-" + std::to_string(id), "main"});
  return out;
}

}  // namespace buildtwin
