#include "buildtwin/store.hpp"

#include "buildtwin/codec.hpp"
#include "buildtwin/errors.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>

namespace buildtwin {

namespace {

constexpr JobId kMinJobId = std::numeric_limits<JobId>::min();

bool newer_finish(const BuildJob& incoming, const BuildJob& current) {
  return incoming.finished_at && (!current.finished_at || *incoming.finished_at > *current.finished_at);
}

}  // namespace

bool JobQuery::matches(const BuildJob& job) const {
  if (project_ids &&
      std::find(project_ids->begin(), project_ids->end(), job.project_id) == project_ids->end())
    return false;
  if (statuses && std::find(statuses->begin(), statuses->end(), job.status) == statuses->end())
    return false;
  if (ref && job.ref != *ref) return false;
  if (name && job.name != *name) return false;
  if (pipeline_id && job.pipeline_id != *pipeline_id) return false;
  if (flaky && job.flaky.value_or(false) != *flaky) return false;
  if (flaky && *flaky == false && job.status != JobStatus::kFailed) return false;
  if (created_at && !created_at->contains(job.created_at)) return false;
  if (finished_at && (!job.finished_at || !finished_at->contains(*job.finished_at))) return false;
  return true;
}

void validate_query(const JobQuery& q) {
  if (q.limit < 1 || q.limit > JobQuery::kMaxLimit)
    throw Error(ErrorCode::kInvalidQuery, "limit must be in [1, 1000]");
  for (const auto* r : {&q.created_at, &q.finished_at})
    if (*r && (*r)->from && (*r)->to && *(*r)->from > *(*r)->to)
      throw Error(ErrorCode::kInvalidQuery, "range start is after range end");
}

UpsertSummary& UpsertSummary::operator+=(const UpsertSummary& o) {
  inserted += o.inserted;
  updated += o.updated;
  ignored += o.ignored;
  changed.insert(changed.end(), o.changed.begin(), o.changed.end());
  return *this;
}

MemoryStorage::MemoryStorage(StorageOptions opts) : opts_(opts) {}

UpsertSummary MemoryStorage::upsert_jobs(std::span<const BuildJob> jobs) {
  std::vector<JobId> offending;
  for (const auto& job : jobs)
    if (!validate_job(job).empty()) offending.push_back(job.job_id);
  if (!offending.empty())
    throw Error(ErrorCode::kValidation, "invalid jobs in batch", {{"job_ids", offending}});

  std::lock_guard writer(writer_);
  UpsertSummary summary;
  std::unordered_map<JobId, BuildJob> pending;
  std::vector<JobId> order;
  {
    std::shared_lock read(data_);
    for (const auto& incoming : jobs) {
      const BuildJob* current = nullptr;
      if (auto p = pending.find(incoming.job_id); p != pending.end())
        current = &p->second;
      else if (auto s = jobs_.find(incoming.job_id); s != jobs_.end())
        current = &s->second;

      if (!current) {
        pending[incoming.job_id] = incoming;
        order.push_back(incoming.job_id);
        ++summary.inserted;
        summary.changed.push_back(incoming.job_id);
        continue;
      }
      BuildJob merged = incoming;
      if (!merged.flaky && merged.status == JobStatus::kFailed) merged.flaky = current->flaky;
      if (merged == *current ||
          !(status_rank(incoming.status) >= status_rank(current->status) ||
            newer_finish(incoming, *current))) {
        ++summary.ignored;
        continue;
      }
      if (!pending.count(incoming.job_id)) order.push_back(incoming.job_id);
      pending[incoming.job_id] = std::move(merged);
      ++summary.updated;
      summary.changed.push_back(incoming.job_id);
    }
  }
  if (pending.empty()) return summary;

  std::vector<BuildJob> accepted;
  accepted.reserve(order.size());
  for (JobId id : order) accepted.push_back(std::move(pending[id]));
  journal({{"op", "jobs"}, {"jobs", accepted}});
  std::unique_lock lock(data_);
  apply_jobs_locked(accepted);
  return summary;
}

void MemoryStorage::apply_jobs_locked(const std::vector<BuildJob>& accepted) {
  std::vector<ProjectId> touched;
  for (const auto& job : accepted) {
    if (auto it = jobs_.find(job.job_id); it != jobs_.end()) {
      unindex_locked(it->second);
      it->second = job;
    } else {
      jobs_.emplace(job.job_id, job);
    }
    index_locked(job);
    touched.push_back(job.project_id);
  }
  if (opts_.max_jobs_per_project) enforce_retention_locked(touched);
}

void MemoryStorage::index_locked(const BuildJob& job) {
  OrderKey key{job.created_at, job.job_id};
  by_created_[key] = job.job_id;
  by_series_[{job.project_id, job.name}][key] = job.job_id;
  auto& pipe = by_pipeline_[{job.project_id, job.pipeline_id}];
  if (std::find(pipe.begin(), pipe.end(), job.job_id) == pipe.end()) pipe.push_back(job.job_id);
  ++per_project_[job.project_id];
}

void MemoryStorage::unindex_locked(const BuildJob& job) {
  OrderKey key{job.created_at, job.job_id};
  by_created_.erase(key);
  if (auto s = by_series_.find({job.project_id, job.name}); s != by_series_.end()) {
    s->second.erase(key);
    if (s->second.empty()) by_series_.erase(s);
  }
  if (auto p = by_pipeline_.find({job.project_id, job.pipeline_id}); p != by_pipeline_.end()) {
    std::erase(p->second, job.job_id);
    if (p->second.empty()) by_pipeline_.erase(p);
  }
  if (auto c = per_project_.find(job.project_id); c != per_project_.end() && --c->second == 0)
    per_project_.erase(c);
}

void MemoryStorage::enforce_retention_locked(const std::vector<ProjectId>& projects) {
  const std::size_t cap = *opts_.max_jobs_per_project;
  for (ProjectId p : projects) {
    auto count = per_project_.find(p);
    if (count == per_project_.end() || count->second <= cap) continue;
    std::size_t excess = count->second - cap;
    std::vector<JobId> evict;
    for (const auto& [key, id] : by_created_) {
      if (jobs_.at(id).project_id != p) continue;
      evict.push_back(id);
      if (evict.size() == excess) break;
    }
    for (JobId id : evict) {
      unindex_locked(jobs_.at(id));
      jobs_.erase(id);
    }
  }
}

std::vector<BuildJob> MemoryStorage::select_jobs(const JobQuery& q) const {
  std::shared_lock lock(data_);
  std::vector<BuildJob> out;
  if (q.project_ids && q.name) {
    for (ProjectId p : *q.project_ids) {
      auto s = by_series_.find({p, *q.name});
      if (s == by_series_.end()) continue;
      for (const auto& [key, id] : s->second)
        if (const auto& job = jobs_.at(id); q.matches(job)) out.push_back(job);
    }
    std::sort(out.begin(), out.end(), [](const BuildJob& a, const BuildJob& b) {
      return OrderKey{a.created_at, a.job_id} < OrderKey{b.created_at, b.job_id};
    });
    return out;
  }
  auto begin = by_created_.begin();
  auto end = by_created_.end();
  if (q.created_at && q.created_at->from) begin = by_created_.lower_bound({*q.created_at->from, kMinJobId});
  if (q.created_at && q.created_at->to) end = by_created_.lower_bound({*q.created_at->to, kMinJobId});
  if (q.created_at && q.created_at->from && q.created_at->to && *q.created_at->from >= *q.created_at->to)
    return out;
  for (auto it = begin; it != end; ++it)
    if (const auto& job = jobs_.at(it->second); q.matches(job)) out.push_back(job);
  return out;
}

JobPage MemoryStorage::query_jobs(const JobQuery& q) const {
  validate_query(q);
  auto all = select_jobs(q);
  if (q.sort == SortOrder::kDesc) std::reverse(all.begin(), all.end());
  JobPage page;
  page.total_count = all.size();
  if (q.offset < all.size()) {
    auto first = all.begin() + static_cast<std::ptrdiff_t>(q.offset);
    auto last = all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), q.offset + q.limit));
    page.jobs.assign(std::make_move_iterator(first), std::make_move_iterator(last));
  }
  return page;
}

std::optional<BuildJob> MemoryStorage::get_job(JobId id) const {
  std::shared_lock lock(data_);
  if (auto it = jobs_.find(id); it != jobs_.end()) return it->second;
  return std::nullopt;
}

std::vector<BuildJob> MemoryStorage::pipeline_jobs(ProjectId project, PipelineId pipeline) const {
  std::shared_lock lock(data_);
  std::vector<BuildJob> out;
  if (auto it = by_pipeline_.find({project, pipeline}); it != by_pipeline_.end())
    for (JobId id : it->second) out.push_back(jobs_.at(id));
  return out;
}

std::vector<BuildJob> MemoryStorage::recent_jobs(ProjectId project, const std::string& name,
                                                 Timestamp before, std::size_t n) const {
  std::shared_lock lock(data_);
  std::vector<BuildJob> out;
  auto s = by_series_.find({project, name});
  if (s == by_series_.end()) return out;
  auto it = s->second.lower_bound({before, kMinJobId});
  while (it != s->second.begin() && out.size() < n) {
    --it;
    out.push_back(jobs_.at(it->second));
  }
  return out;
}

std::vector<ProjectId> MemoryStorage::project_ids() const {
  std::shared_lock lock(data_);
  std::vector<ProjectId> out;
  for (const auto& [p, _] : per_project_) out.push_back(p);
  return out;
}

std::size_t MemoryStorage::job_count() const {
  std::shared_lock lock(data_);
  return jobs_.size();
}

std::vector<JobId> MemoryStorage::set_flaky(std::span<const FlakyUpdate> updates) {
  std::lock_guard writer(writer_);
  std::vector<FlakyUpdate> effective;
  {
    std::shared_lock read(data_);
    for (const auto& u : updates) {
      auto it = jobs_.find(u.job_id);
      if (it == jobs_.end()) continue;
      if (u.flaky.has_value() && it->second.status != JobStatus::kFailed) continue;
      if (it->second.flaky != u.flaky) effective.push_back(u);
    }
  }
  std::vector<JobId> changed;
  if (effective.empty()) return changed;
  json entry{{"op", "flaky"}, {"updates", json::array()}};
  for (const auto& u : effective) {
    entry["updates"].push_back({{"job_id", u.job_id}, {"flaky", u.flaky ? json(*u.flaky) : json()}});
    changed.push_back(u.job_id);
  }
  journal(entry);
  std::unique_lock lock(data_);
  apply_flaky_locked(effective);
  return changed;
}

void MemoryStorage::apply_flaky_locked(const std::vector<FlakyUpdate>& updates) {
  for (const auto& u : updates)
    if (auto it = jobs_.find(u.job_id); it != jobs_.end()) it->second.flaky = u.flaky;
}

void MemoryStorage::store_predictions(std::span<const PredictionRecord> records) {
  if (records.empty()) return;
  std::vector<PredictionRecord> copy(records.begin(), records.end());
  std::lock_guard writer(writer_);
  journal({{"op", "predictions"}, {"records", copy}});
  std::unique_lock lock(data_);
  apply_predictions_locked(copy);
}

void MemoryStorage::apply_predictions_locked(const std::vector<PredictionRecord>& records) {
  for (const auto& r : records) {
    if (auto it = predictions_.find(r.prediction_id); it != predictions_.end()) {
      predictions_by_time_.erase({it->second.predicted_at, r.prediction_id});
      it->second = r;
    } else {
      predictions_.emplace(r.prediction_id, r);
      predictions_by_job_[r.job_id].push_back(r.prediction_id);
    }
    predictions_by_time_[{r.predicted_at, r.prediction_id}] = r.prediction_id;
  }
}

PredictionRecord MemoryStorage::attach_actual(JobId job, ModelKind kind, double actual) {
  std::lock_guard writer(writer_);
  PredictionRecord updated;
  {
    std::shared_lock read(data_);
    const PredictionRecord* target = nullptr;
    if (auto ids = predictions_by_job_.find(job); ids != predictions_by_job_.end())
      for (const auto& id : ids->second)
        if (const auto& r = predictions_.at(id); r.model_kind == kind) target = &r;
    if (!target)
      throw Error(ErrorCode::kNotFound, "no " + std::string(to_string(kind)) +
                                            " prediction for job " + std::to_string(job));
    if (target->actual_value == actual) return *target;
    updated = *target;
  }
  updated.actual_value = actual;
  updated.anomaly.reset();
  updated.anomaly_score.reset();
  journal({{"op", "prediction"}, {"record", updated}});
  std::unique_lock lock(data_);
  apply_prediction_update_locked(updated);
  return updated;
}

void MemoryStorage::update_prediction(const PredictionRecord& record) {
  std::lock_guard writer(writer_);
  {
    std::shared_lock read(data_);
    if (!predictions_.count(record.prediction_id))
      throw Error(ErrorCode::kNotFound, "no prediction " + record.prediction_id);
  }
  journal({{"op", "prediction"}, {"record", record}});
  std::unique_lock lock(data_);
  apply_prediction_update_locked(record);
}

void MemoryStorage::apply_prediction_update_locked(const PredictionRecord& r) {
  apply_predictions_locked({r});
}

std::vector<PredictionRecord> MemoryStorage::predictions_for_job(JobId job) const {
  std::shared_lock lock(data_);
  std::vector<PredictionRecord> out;
  if (auto ids = predictions_by_job_.find(job); ids != predictions_by_job_.end())
    for (const auto& id : ids->second) out.push_back(predictions_.at(id));
  return out;
}

std::vector<PredictionRecord> MemoryStorage::predictions_between(const TimeRange& range) const {
  std::shared_lock lock(data_);
  std::vector<PredictionRecord> out;
  auto it = range.from ? predictions_by_time_.lower_bound({*range.from, std::string{}})
                       : predictions_by_time_.begin();
  for (; it != predictions_by_time_.end(); ++it) {
    if (range.to && it->first.first >= *range.to) break;
    out.push_back(predictions_.at(it->second));
  }
  return out;
}

std::size_t MemoryStorage::prediction_count() const {
  std::shared_lock lock(data_);
  return predictions_.size();
}

std::optional<std::string> MemoryStorage::get_meta(const std::string& key) const {
  std::shared_lock lock(data_);
  if (auto it = meta_.find(key); it != meta_.end()) return it->second;
  return std::nullopt;
}

void MemoryStorage::put_meta(const std::string& key, const std::string& value) {
  std::lock_guard writer(writer_);
  journal({{"op", "meta"}, {"key", key}, {"value", value}});
  std::unique_lock lock(data_);
  meta_[key] = value;
}

void MemoryStorage::append_log(const std::string& stream, const nlohmann::json& record) {
  std::lock_guard writer(writer_);
  journal({{"op", "log"}, {"stream", stream}, {"record", record}});
  std::unique_lock lock(data_);
  logs_[stream].push_back(record);
}

std::vector<nlohmann::json> MemoryStorage::read_log(const std::string& stream) const {
  std::shared_lock lock(data_);
  if (auto it = logs_.find(stream); it != logs_.end()) return it->second;
  return {};
}

void MemoryStorage::rewrite_log(const std::string& stream, std::vector<nlohmann::json> records) {
  std::lock_guard writer(writer_);
  journal({{"op", "rewrite_log"}, {"stream", stream}, {"records", records}});
  std::unique_lock lock(data_);
  logs_[stream] = std::move(records);
}

void MemoryStorage::replay(const nlohmann::json& entry) {
  const auto op = entry.at("op").get<std::string>();
  std::unique_lock lock(data_);
  if (op == "jobs") {
    apply_jobs_locked(entry.at("jobs").get<std::vector<BuildJob>>());
  } else if (op == "flaky") {
    std::vector<FlakyUpdate> updates;
    for (const auto& u : entry.at("updates"))
      updates.push_back({u.at("job_id").get<JobId>(),
                         u.at("flaky").is_null() ? std::nullopt
                                                 : std::optional<bool>(u.at("flaky").get<bool>())});
    apply_flaky_locked(updates);
  } else if (op == "predictions") {
    apply_predictions_locked(entry.at("records").get<std::vector<PredictionRecord>>());
  } else if (op == "prediction") {
    apply_prediction_update_locked(entry.at("record").get<PredictionRecord>());
  } else if (op == "meta") {
    meta_[entry.at("key").get<std::string>()] = entry.at("value").get<std::string>();
  } else if (op == "log") {
    logs_[entry.at("stream").get<std::string>()].push_back(entry.at("record"));
  } else if (op == "rewrite_log") {
    logs_[entry.at("stream").get<std::string>()] =
        entry.at("records").get<std::vector<nlohmann::json>>();
  }
}

FileStorage::FileStorage(std::filesystem::path dir, StorageOptions opts)
    : MemoryStorage(opts), dir_(std::move(dir)) {
  std::error_code ec;
  std::filesystem::create_directories(dir_, ec);
  if (ec) throw Error(ErrorCode::kStorageUnavailable, "cannot create " + dir_.string());
  const auto path = dir_ / "journal.ndjson";
  std::uintmax_t good_bytes = 0;
  if (std::ifstream in{path}; in) {
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json entry;
      try {
        entry = nlohmann::json::parse(line);
      } catch (const nlohmann::json::exception&) {
        break;  // torn tail
      }
      if (in.eof()) break;  // last line without newline is incomplete
      replay(entry);
      good_bytes = static_cast<std::uintmax_t>(in.tellg());
    }
  }
  if (std::filesystem::exists(path)) std::filesystem::resize_file(path, good_bytes, ec);
  out_ = std::make_unique<std::ofstream>(path, std::ios::app);
  if (!*out_) throw Error(ErrorCode::kStorageUnavailable, "cannot open " + path.string());
}

FileStorage::~FileStorage() = default;

bool FileStorage::healthy() const { return out_ && out_->good(); }

void FileStorage::journal(const nlohmann::json& entry) {
  *out_ << entry.dump() << '\n';
  out_->flush();
  if (!*out_) throw Error(ErrorCode::kStorageUnavailable, "journal write failed");
}

void export_jobs(const Storage& store, std::ostream& out) {
  JobQuery all;
  auto jobs = store.select_jobs(all);
  std::sort(jobs.begin(), jobs.end(),
            [](const BuildJob& a, const BuildJob& b) { return a.job_id < b.job_id; });
  for (const auto& job : jobs) out << encode(job) << '\n';
}

std::vector<BuildJob> read_jobs_ndjson(std::istream& in) {
  std::vector<BuildJob> jobs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      jobs.push_back(decode<BuildJob>(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kBadRequest, "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return jobs;
}

UpsertSummary import_jobs(Storage& store, std::istream& in) {
  auto jobs = read_jobs_ndjson(in);
  return store.upsert_jobs(jobs);
}

}  // namespace buildtwin
