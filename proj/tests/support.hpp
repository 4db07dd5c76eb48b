#pragma once

// Shared fixtures for the test binaries.

#include "buildtwin/codec.hpp"
#include "buildtwin/store.hpp"

#include <filesystem>
#include <random>

namespace buildtwin::test {

inline Timestamp at(const char* rfc3339) { return *parse_timestamp(rfc3339); }

inline const Timestamp kT0 = from_unix_millis(1'719'792'000'000);  // 2024-07-01T00:00:00Z, a Monday

inline BuildJob make_job(JobId id, JobStatus status = JobStatus::kSuccess, Timestamp created = kT0,
                         double duration = 100.0) {
  BuildJob j;
  j.job_id = id;
  j.project_id = 1;
  j.pipeline_id = 10;
  j.name = "build";
  j.ref = "main";
  j.commit_sha = "abc";
  j.status = status;
  j.created_at = created;
  if (status != JobStatus::kCreated && status != JobStatus::kPending) {
    j.started_at = add_seconds(created, 5);
    j.queued_duration = 5;
  }
  if (is_terminal(status)) {
    j.finished_at = add_seconds(created, 5 + duration);
    if (is_completed(status)) j.duration = duration;
  }
  return j;
}

/// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("buildtwin-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace buildtwin::test
