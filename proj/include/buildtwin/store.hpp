#pragma once

#include "buildtwin/types.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <span>
#include <unordered_map>

namespace buildtwin {

/// Half-open [from, to); an unset bound is unbounded.
struct TimeRange {
  std::optional<Timestamp> from;
  std::optional<Timestamp> to;

  bool contains(Timestamp t) const { return (!from || t >= *from) && (!to || t < *to); }
};

enum class SortOrder { kAsc, kDesc };

struct JobQuery {
  static constexpr std::size_t kDefaultLimit = 100;
  static constexpr std::size_t kMaxLimit = 1000;

  std::optional<std::vector<ProjectId>> project_ids;
  std::optional<std::vector<JobStatus>> statuses;
  std::optional<std::string> ref;
  std::optional<std::string> name;
  std::optional<PipelineId> pipeline_id;
  std::optional<bool> flaky;
  std::optional<TimeRange> created_at;
  std::optional<TimeRange> finished_at;
  std::size_t offset = 0;
  std::size_t limit = kDefaultLimit;
  SortOrder sort = SortOrder::kAsc;

  bool matches(const BuildJob& job) const;
};

/// Throws Error{kInvalidQuery}.
void validate_query(const JobQuery& q);

struct JobPage {
  std::vector<BuildJob> jobs;
  std::size_t total_count = 0;
};

struct UpsertSummary {
  std::size_t inserted = 0;
  std::size_t updated = 0;
  std::size_t ignored = 0;
  /// Ids that were inserted or updated, in input order.
  std::vector<JobId> changed;

  UpsertSummary& operator+=(const UpsertSummary& o);
};

struct FlakyUpdate {
  JobId job_id = 0;
  std::optional<bool> flaky;
};

struct StorageOptions {
  /// Keep at most this many jobs per project, evicting the oldest by created_at.
  std::optional<std::size_t> max_jobs_per_project;
};

/// Persistence contract for all twin data. Writes are serialized through a
/// single writer; readers only ever see fully applied batches.
class Storage {
 public:
  virtual ~Storage() = default;

  /// Idempotent on job_id. Throws Error{kValidation} listing offending ids.
  virtual UpsertSummary upsert_jobs(std::span<const BuildJob> jobs) = 0;
  /// Throws Error{kInvalidQuery}.
  virtual JobPage query_jobs(const JobQuery& q) const = 0;
  /// Every matching job, ignoring offset/limit; sorted by created_at then job_id.
  virtual std::vector<BuildJob> select_jobs(const JobQuery& q) const = 0;
  virtual std::optional<BuildJob> get_job(JobId id) const = 0;
  virtual std::vector<BuildJob> pipeline_jobs(ProjectId project, PipelineId pipeline) const = 0;
  /// Up to `n` newest jobs of (project, name) created strictly before `before`,
  /// newest first.
  virtual std::vector<BuildJob> recent_jobs(ProjectId project, const std::string& name,
                                            Timestamp before, std::size_t n) const = 0;
  virtual std::vector<ProjectId> project_ids() const = 0;
  virtual std::size_t job_count() const = 0;
  /// Returns the ids whose flaky value actually changed.
  virtual std::vector<JobId> set_flaky(std::span<const FlakyUpdate> updates) = 0;

  virtual void store_predictions(std::span<const PredictionRecord> records) = 0;
  /// Attaches to the newest prediction of `kind` for `job`. Throws Error{kNotFound}.
  virtual PredictionRecord attach_actual(JobId job, ModelKind kind, double actual) = 0;
  /// Replaces the record with the same prediction_id. Throws Error{kNotFound}.
  virtual void update_prediction(const PredictionRecord& record) = 0;
  virtual std::vector<PredictionRecord> predictions_for_job(JobId job) const = 0;
  virtual std::vector<PredictionRecord> predictions_between(const TimeRange& range) const = 0;
  virtual std::size_t prediction_count() const = 0;

  virtual std::optional<std::string> get_meta(const std::string& key) const = 0;
  virtual void put_meta(const std::string& key, const std::string& value) = 0;

  /// Named append-only record streams (bus spill, ledgers).
  virtual void append_log(const std::string& stream, const nlohmann::json& record) = 0;
  virtual std::vector<nlohmann::json> read_log(const std::string& stream) const = 0;
  /// Replaces a stream's content; used for compaction.
  virtual void rewrite_log(const std::string& stream, std::vector<nlohmann::json> records) = 0;

  /// Cheap liveness probe for /health.
  virtual bool healthy() const { return true; }
};

/// In-memory backend; also the engine behind the file backend.
class MemoryStorage : public Storage {
 public:
  explicit MemoryStorage(StorageOptions opts = {});

  UpsertSummary upsert_jobs(std::span<const BuildJob> jobs) override;
  JobPage query_jobs(const JobQuery& q) const override;
  std::vector<BuildJob> select_jobs(const JobQuery& q) const override;
  std::optional<BuildJob> get_job(JobId id) const override;
  std::vector<BuildJob> pipeline_jobs(ProjectId project, PipelineId pipeline) const override;
  std::vector<BuildJob> recent_jobs(ProjectId project, const std::string& name, Timestamp before,
                                    std::size_t n) const override;
  std::vector<ProjectId> project_ids() const override;
  std::size_t job_count() const override;
  std::vector<JobId> set_flaky(std::span<const FlakyUpdate> updates) override;

  void store_predictions(std::span<const PredictionRecord> records) override;
  PredictionRecord attach_actual(JobId job, ModelKind kind, double actual) override;
  void update_prediction(const PredictionRecord& record) override;
  std::vector<PredictionRecord> predictions_for_job(JobId job) const override;
  std::vector<PredictionRecord> predictions_between(const TimeRange& range) const override;
  std::size_t prediction_count() const override;

  std::optional<std::string> get_meta(const std::string& key) const override;
  void put_meta(const std::string& key, const std::string& value) override;

  void append_log(const std::string& stream, const nlohmann::json& record) override;
  std::vector<nlohmann::json> read_log(const std::string& stream) const override;
  void rewrite_log(const std::string& stream, std::vector<nlohmann::json> records) override;

 protected:
  /// Called under the writer lock before a mutation is applied. A throwing
  /// journal aborts the mutation.
  virtual void journal(const nlohmann::json& /*entry*/) {}
  /// Re-applies a journal entry without journaling it again.
  void replay(const nlohmann::json& entry);

 private:
  struct SeriesKey {
    ProjectId project;
    std::string name;
    friend auto operator<=>(const SeriesKey&, const SeriesKey&) = default;
  };
  using OrderKey = std::pair<Timestamp, JobId>;

  void apply_jobs_locked(const std::vector<BuildJob>& accepted);
  void index_locked(const BuildJob& job);
  void unindex_locked(const BuildJob& job);
  void enforce_retention_locked(const std::vector<ProjectId>& projects);
  void apply_flaky_locked(const std::vector<FlakyUpdate>& updates);
  void apply_predictions_locked(const std::vector<PredictionRecord>& records);
  void apply_prediction_update_locked(const PredictionRecord& r);

  StorageOptions opts_;
  std::mutex writer_;
  mutable std::shared_mutex data_;
  std::unordered_map<JobId, BuildJob> jobs_;
  std::map<OrderKey, JobId> by_created_;
  std::map<SeriesKey, std::map<OrderKey, JobId>> by_series_;
  std::map<std::pair<ProjectId, PipelineId>, std::vector<JobId>> by_pipeline_;
  std::map<ProjectId, std::size_t> per_project_;

  std::unordered_map<std::string, PredictionRecord> predictions_;
  std::unordered_map<JobId, std::vector<std::string>> predictions_by_job_;
  std::map<std::pair<Timestamp, std::string>, std::string> predictions_by_time_;

  std::map<std::string, std::string> meta_;
  std::map<std::string, std::vector<nlohmann::json>> logs_;
};

/// Embedded on-disk backend: a write-ahead journal of newline-delimited JSON
/// entries, replayed into memory on open. A torn final line is discarded.
class FileStorage final : public MemoryStorage {
 public:
  explicit FileStorage(std::filesystem::path dir, StorageOptions opts = {});
  ~FileStorage() override;

  bool healthy() const override;
  const std::filesystem::path& directory() const { return dir_; }

 protected:
  void journal(const nlohmann::json& entry) override;

 private:
  std::filesystem::path dir_;
  std::unique_ptr<std::ofstream> out_;
};

/// Canonical newline-delimited JSON, one BuildJob per line, ordered by job_id.
void export_jobs(const Storage& store, std::ostream& out);
/// Reads an export and upserts it. Malformed lines throw Error{kBadRequest}.
UpsertSummary import_jobs(Storage& store, std::istream& in);
std::vector<BuildJob> read_jobs_ndjson(std::istream& in);

}  // namespace buildtwin
