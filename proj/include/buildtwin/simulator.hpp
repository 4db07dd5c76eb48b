#pragma once

// Seeded stand-in for a CI platform. Generates a job history over a horizon
// and serves it through the reader/writer contracts as of the current clock
// time, together with the webhook deliveries a platform would send.
//
// Ground truth: over all completed jobs (originals and retries) the observed
// failure ratio converges to p_fail and the flaky failure ratio to p_flaky.
// With the retry-failed-once policy the per-original probabilities are
// calibrated so that this holds: an original fails with
//   a = p_fail (1 + p_flaky) / (2 - p_fail (1 + p_flaky))
// and a failure is transient (its retry succeeds) with
//   b = 2 p_flaky / (1 + p_flaky);
// non-transient failures fail again on retry.

#include "buildtwin/adapters.hpp"
#include "buildtwin/time.hpp"

#include <deque>
#include <fstream>
#include <filesystem>
#include <map>
#include <mutex>
#include <random>

namespace buildtwin {

enum class RetryPolicy { kNone, kRetryFailedOnce };

struct RegimeChange {
  Timestamp at{};
  double duration_factor = 1.0;
  std::optional<double> p_fail;
  /// Restrict to one job name; all names when empty.
  std::string job_name;
};

struct SimProject {
  ProjectId project_id = 1;
  std::string path = "group/project";
  std::string default_ref = "main";
  std::vector<std::string> job_names{"build"};
  /// Mean pipelines per hour (Poisson arrivals).
  double pipelines_per_hour = 12.0;
  /// log-normal(mu, sigma) job duration in seconds.
  double duration_mu = 5.703782474656201;  // log(300)
  double duration_sigma = 0.5;
  double mean_queued_seconds = 10.0;
  double p_fail = 0.2;
  double p_flaky = 0.5;
  RetryPolicy retry = RetryPolicy::kRetryFailedOnce;
  double retry_delay_seconds = 30.0;
  double p_default_ref = 0.7;
  std::vector<RegimeChange> regimes;
  /// Stop after this many jobs (originals and retries); unlimited when unset.
  std::optional<std::size_t> max_jobs;
};

struct SimConfig {
  std::uint64_t seed = 1;
  Timestamp start = from_unix_millis(1'719'792'000'000);  // 2024-07-01T00:00:00Z
  std::vector<SimProject> projects{SimProject{}};
  std::string webhook_token = "sim-token";

  /// Throws Error{kInvalidConfig}.
  void validate() const;
};

/// Reads a TOML simulator description. Throws Error{kInvalidConfig}.
SimConfig load_sim_config(const std::filesystem::path& path);
SimConfig parse_sim_config(std::string_view toml_text);

/// Parses "90s", "15m", "12h", "1d", "2w" or a bare number of seconds.
std::optional<double> parse_duration_seconds(std::string_view text);

struct WebhookDelivery {
  Timestamp at{};
  std::string token;
  nlohmann::json body;
};

/// Fault injection for the reader side; consumed in order by the next calls.
enum class SimFault { kUnreachable, kRateLimited };

class Simulator final : public ActualTwinReader, public ActualTwinWriter {
 public:
  /// Throws Error{kInvalidConfig}.
  Simulator(SimConfig cfg, const Clock& clock);

  /// Generates the history up to `horizon` (idempotent for a given horizon).
  void generate(Timestamp horizon);

  /// Deliveries with at ∈ [from, to), in time order.
  std::vector<WebhookDelivery> deliveries(Timestamp from, Timestamp to) const;
  std::vector<WebhookDelivery> all_deliveries() const;
  /// Every generated job as its final raw record, oldest first.
  std::vector<RawJob> all_jobs() const;
  std::size_t job_count() const;
  const SimConfig& config() const { return cfg_; }

  void inject_faults(std::vector<SimFault> faults, double retry_after_seconds = 1.0);
  std::size_t reader_calls() const;

  std::vector<RawJob> list_jobs(ProjectId project, int page, int per_page,
                                std::optional<Timestamp> updated_after) override;
  RawJob get_job(ProjectId project, JobId job) override;
  std::vector<Project> list_projects() override;

  WriteResult set_ci_variable(ProjectId project, const std::string& key,
                              const std::string& value) override;
  WriteResult retry_job(ProjectId project, JobId job) override;
  WriteResult upsert_file(ProjectId project, const std::string& path, const std::string& content,
                          const std::string& message) override;

  std::optional<std::string> ci_variable(ProjectId project, const std::string& key) const;
  std::optional<std::string> file(ProjectId project, const std::string& path) const;

 private:
  struct SimJob {
    JobId id = 0;
    ProjectId project_id = 0;
    PipelineId pipeline_id = 0;
    std::string name;
    std::string ref;
    std::string sha;
    Timestamp created_at{};
    Timestamp started_at{};
    Timestamp finished_at{};
    double queued = 0;
    double duration = 0;
    bool failed = false;
    std::int64_t runner_id = 1;
    int retries_count = 0;
    /// Root cause shared across a retry group: 0 none, 1 transient, 2 persistent.
    int cause = 0;
  };

  void generate_project_locked(std::size_t index, Timestamp horizon);
  SimJob draw_job_locked(const SimProject& p, std::mt19937_64& rng, Timestamp created,
                         bool is_retry, int inherited_cause);
  void add_job_locked(SimJob job);
  void check_fault_locked();
  RawJob raw_at_locked(const SimJob& job, Timestamp now) const;
  nlohmann::json event_body(const SimJob& job, JobStatus status) const;
  const SimJob* find_locked(ProjectId project, JobId job) const;

  SimConfig cfg_;
  const Clock& clock_;
  mutable std::mutex mu_;
  std::vector<std::mt19937_64> rngs_;
  std::vector<Timestamp> generated_until_;
  std::vector<std::size_t> generated_count_;
  std::vector<std::optional<Timestamp>> next_arrival_;
  std::vector<PipelineId> pipeline_seq_;
  std::map<std::pair<ProjectId, PipelineId>, PipelineId> pipeline_ids_;
  std::vector<SimJob> pending_;  // generated but not yet given ids
  std::vector<SimJob> jobs_;     // id order == created_at order
  std::map<JobId, std::size_t> index_;
  std::multimap<Timestamp, WebhookDelivery> deliveries_;
  PipelineId next_pipeline_ = 1000;
  JobId next_job_ = 1;
  std::map<std::pair<ProjectId, std::string>, std::string> variables_;
  std::map<std::pair<ProjectId, std::string>, std::string> files_;
  std::deque<SimFault> faults_;
  double fault_retry_after_ = 1.0;
  std::size_t reader_calls_ = 0;
  std::size_t writes_ = 0;
};

/// Scaled wall clock: virtual time advances `speed` times faster than real
/// time from `start`.
class AcceleratedClock final : public Clock {
 public:
  AcceleratedClock(Timestamp start, double speed);
  Timestamp now() const override;

 private:
  Timestamp start_;
  double speed_;
  std::chrono::steady_clock::time_point origin_;
};

}  // namespace buildtwin
