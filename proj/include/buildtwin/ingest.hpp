#pragma once

#include "buildtwin/adapters.hpp"
#include "buildtwin/bus.hpp"
#include "buildtwin/errors.hpp"
#include "buildtwin/store.hpp"

#include <condition_variable>
#include <functional>
#include <map>
#include <random>

namespace buildtwin {

/// Storage log holding quarantined raw records, append-only.
inline constexpr std::string_view kDeadLetterLog = "dead-letter";

/// Raw platform record -> BuildJob. Timestamps are normalized to UTC,
/// "manual" maps to skipped, optional fields stay absent when missing.
/// Throws Error{kUnparseableRecord}.
BuildJob preprocess(const RawJob& raw);

/// Platform status string -> JobStatus, nullopt for unknown strings.
std::optional<JobStatus> map_platform_status(std::string_view status);

/// Flaky labels for one retry group (jobs sharing project, pipeline and name):
/// a failed job is flaky iff a success was created after it. Non-failed jobs
/// get no label.
std::map<JobId, std::optional<bool>> flaky_labels(std::vector<BuildJob> group);

/// Recomputes the labels of every retry group in a pipeline and writes the
/// differences. Returns the ids whose label changed.
std::vector<JobId> postprocess_flaky(Storage& store, ProjectId project, PipelineId pipeline);

struct ProjectIngestStats {
  std::size_t fetched = 0;
  std::size_t stored = 0;
  std::size_t ignored = 0;
  std::size_t quarantined = 0;
};

struct IngestSummary {
  std::map<ProjectId, ProjectIngestStats> projects;
  std::size_t events_published = 0;

  ProjectIngestStats totals() const;
  nlohmann::json to_json() const;
};

/// Exponential backoff: base 1 s, factor 2, capped at 60 s, with equal jitter
/// (half fixed, half uniform).
struct BackoffPolicy {
  double base_seconds = 1.0;
  double factor = 2.0;
  double cap_seconds = 60.0;
  /// Consecutive failed calls tolerated before the error propagates.
  int max_attempts = 6;

  /// Delay before retry number `attempt` (0-based), before jitter.
  double nominal(int attempt) const;
};

struct BackfillConfig {
  std::vector<ProjectId> project_ids;
  std::optional<std::size_t> max_jobs_per_project;
  int page_size = kMaxPerPage;
};

struct RefreshConfig {
  std::chrono::seconds interval{300};
  bool enabled = true;
};

/// Reads DATA_REFRESH_INTERVAL; disabled when unset. Throws Error{kBadConfig}.
RefreshConfig refresh_config_from_env();

/// Outcome of integrating one batch of raw records.
struct BatchResult {
  std::vector<JobId> job_ids;  // ids carried by the published event
  UpsertSummary upsert;
  std::size_t quarantined = 0;
  std::optional<std::string> event_id;
};

class Ingestor {
 public:
  using Sleeper = std::function<void(double seconds)>;

  Ingestor(Storage& store, MessageBus& bus, const Clock& clock);

  void set_sleeper(Sleeper sleeper) { sleeper_ = std::move(sleeper); }
  void set_backoff(BackoffPolicy policy) { backoff_ = policy; }
  void set_seed(std::uint64_t seed);

  /// Preprocess, upsert, flaky post-processing and one event for the batch.
  /// Records that fail preprocessing are quarantined. With `publish_unchanged`
  /// false no event is published when nothing changed.
  BatchResult integrate(const std::vector<RawJob>& raws, EventSource source,
                        bool publish_unchanged = true);

  /// Pages each project newest-first until history or the limit is exhausted.
  /// Throws Error{kActualTwinUnreachable} once retries are spent; pages already
  /// integrated stay integrated.
  IngestSummary backfill(const BackfillConfig& cfg, ActualTwinReader& reader);

  /// Fetches records updated after each project's high-water mark and advances
  /// the mark once the delta is stored.
  IngestSummary refresh(const std::vector<ProjectId>& projects, ActualTwinReader& reader);

  /// Records project default refs for the ref_is_default feature.
  void sync_projects(ActualTwinReader& reader);

  /// Retries `call` on RateLimited/Unreachable according to the backoff policy.
  template <typename F>
  auto with_backoff(F&& call) -> decltype(call());

  void quarantine(const nlohmann::json& raw, const std::string& reason);

  Storage& store() { return store_; }

 private:
  static std::string hwm_key(ProjectId project);
  void pause(int attempt, double at_least);

  Storage& store_;
  MessageBus& bus_;
  const Clock& clock_;
  BackoffPolicy backoff_;
  Sleeper sleeper_;
  std::mutex integrate_mu_;
  std::mutex rng_mu_;
  std::mt19937_64 rng_{std::random_device{}()};
};

template <typename F>
auto Ingestor::with_backoff(F&& call) -> decltype(call()) {
  for (int attempt = 0;; ++attempt) {
    try {
      return call();
    } catch (const Error& e) {
      const bool retriable =
          e.code() == ErrorCode::kRateLimited || e.code() == ErrorCode::kActualTwinUnreachable;
      if (!retriable || attempt + 1 >= backoff_.max_attempts) throw;
      double hint = 0;
      if (e.code() == ErrorCode::kRateLimited && e.details().is_object())
        hint = e.details().value("retry_after", 0.0);
      pause(attempt, hint);
    }
  }
}

/// Authenticates and parses job events, then fetches and integrates the job
/// on a worker thread so the sender gets its answer immediately.
class WebhookReceiver {
 public:
  struct Response {
    int status = 202;
    nlohmann::json body;
  };

  WebhookReceiver(Ingestor& ingestor, ActualTwinReader& reader, std::string token);
  ~WebhookReceiver();

  /// `token` is the X-Gitlab-Token header value, if any.
  Response handle(const std::optional<std::string>& token, std::string_view body);

  /// Blocks until the worker queue is empty.
  bool drain(std::chrono::milliseconds timeout);
  void stop();

  std::size_t accepted() const { return accepted_.load(); }
  std::size_t processed() const { return processed_.load(); }

 private:
  struct Work {
    ProjectId project;
    JobId job;
    nlohmann::json event;
  };
  void run();
  void process(const Work& w);

  Ingestor& ingestor_;
  ActualTwinReader& reader_;
  std::string token_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable idle_cv_;
  std::deque<Work> queue_;
  bool busy_ = false;
  bool stopping_ = false;
  std::atomic<std::size_t> accepted_{0};
  std::atomic<std::size_t> processed_{0};
  std::thread worker_;
};

/// Runs a callback every interval on a background thread until stopped.
class PeriodicTask {
 public:
  PeriodicTask(std::chrono::milliseconds interval, std::function<void()> fn);
  ~PeriodicTask();
  void stop();

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  bool stopping_ = false;
  std::thread thread_;
};

}  // namespace buildtwin
