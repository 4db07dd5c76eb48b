#include "buildtwin/features.hpp"

#include "buildtwin/errors.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace buildtwin {

bool is_known_feature(std::string_view name) {
  return std::find(kFeatureNames.begin(), kFeatureNames.end(), name) != kFeatureNames.end();
}

std::vector<std::string> unknown_features(const std::map<std::string, double>& features) {
  std::vector<std::string> out;
  for (const auto& [name, _] : features)
    if (!is_known_feature(name)) out.push_back(name);
  return out;
}

FeatureVector to_vector(const std::map<std::string, double>& features) {
  if (auto unknown = unknown_features(features); !unknown.empty())
    throw Error(ErrorCode::kSchemaMismatch, "unknown feature " + unknown.front(),
                {{"unknown", unknown}});
  FeatureVector v{};
  for (std::size_t i = 0; i < kFeatureCount; ++i) {
    auto it = features.find(std::string(kFeatureNames[i]));
    if (it == features.end())
      throw Error(ErrorCode::kSchemaMismatch, "missing feature " + std::string(kFeatureNames[i]));
    if (!std::isfinite(it->second))
      throw Error(ErrorCode::kSchemaMismatch, "non-finite feature " + it->first);
    v[i] = it->second;
  }
  return v;
}

std::map<std::string, double> to_map(const FeatureVector& v) {
  std::map<std::string, double> out;
  for (std::size_t i = 0; i < kFeatureCount; ++i) out.emplace(kFeatureNames[i], v[i]);
  return out;
}

ScaledVector scale(const FeatureVector& v) {
  auto log_scaled = [](double x, double ref) { return std::log1p(std::max(0.0, x)) / std::log1p(ref); };
  return {
      1.0,
      v[0] / 23.0,
      v[1] / 6.0,
      log_scaled(v[2], 3600.0),
      v[3],
      log_scaled(v[4], 7200.0),
      std::min(v[5], 5.0) / 5.0,
      v[6],
  };
}

std::string default_ref_key(ProjectId project) {
  return "project." + std::to_string(project) + ".default_ref";
}

std::map<std::string, double> compute_features(const Storage& store, const BuildJob& job,
                                               const FeatureOptions& opts) {
  using namespace std::chrono;
  const auto day = floor<days>(job.created_at);
  const auto hour = duration_cast<hours>(job.created_at - day).count();
  const auto dow = (weekday(day).iso_encoding() + 6) % 7;

  std::size_t completed = 0, failed = 0, with_duration = 0;
  double duration_sum = 0;
  for (const auto& prev : store.recent_jobs(job.project_id, job.name, job.created_at, opts.window)) {
    if (!is_completed(prev.status)) continue;
    ++completed;
    if (prev.status == JobStatus::kFailed) ++failed;
    if (prev.duration) {
      ++with_duration;
      duration_sum += *prev.duration;
    }
  }

  double rerun_index = 0;
  for (const auto& peer : store.pipeline_jobs(job.project_id, job.pipeline_id)) {
    if (peer.name != job.name || peer.job_id == job.job_id) continue;
    if (std::pair(peer.created_at, peer.job_id) < std::pair(job.created_at, job.job_id)) ++rerun_index;
  }

  const auto default_ref = store.get_meta(default_ref_key(job.project_id)).value_or("main");

  std::map<std::string, double> f{
      {"hour_of_day", static_cast<double>(hour)},
      {"day_of_week", static_cast<double>(dow)},
      {"queued_duration", job.queued_duration.value_or(0.0)},
      {"recent_failure_rate", (failed + 1.0) / (completed + 2.0)},
      {"recent_mean_duration", with_duration ? duration_sum / with_duration : 0.0},
      {"rerun_index", rerun_index},
      {"ref_is_default", job.ref == default_ref ? 1.0 : 0.0},
  };
  for (const auto& [name, value] : job.features)
    if (is_known_feature(name)) f[name] = value;
  return f;
}

}  // namespace buildtwin
