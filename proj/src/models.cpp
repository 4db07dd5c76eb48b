#include "buildtwin/models.hpp"

#include "buildtwin/errors.hpp"
#include "buildtwin/ids.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>

namespace buildtwin {

using nlohmann::json;

namespace {

constexpr std::string_view kStateKey = "models.state";
constexpr std::string_view kProcessedStream = "models.processed";
constexpr std::size_t kProcessedLedgerSize = 4096;

bool is_probability(ModelKind k) { return k != ModelKind::kDuration; }

}  // namespace

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

static double dot(const ScaledVector& w, const ScaledVector& x) {
  double z = 0;
  for (std::size_t i = 0; i < w.size(); ++i) z += w[i] * x[i];
  return z;
}

double log_loss(const ScaledVector& w, const ScaledVector& x, double y) {
  // log(1 + e^z) - y z, written to stay finite for large |z|.
  const double z = dot(w, x);
  const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
  return softplus - y * z;
}

ScaledVector log_loss_gradient(const ScaledVector& w, const ScaledVector& x, double y) {
  const double p = sigmoid(dot(w, x));
  ScaledVector g{};
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = (p - y) * x[i];
  return g;
}

double LogisticModel::predict(const ScaledVector& x) const { return sigmoid(dot(weights, x)); }

void LogisticModel::update(const ScaledVector& x, double y, double learning_rate) {
  const auto g = log_loss_gradient(weights, x, y);
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] -= learning_rate * g[i];
  ++count;
}

void EwModel::update(double value, double alpha) {
  if (count == 0) {
    mean = value;
    variance = 0.0;
  } else {
    const double diff = value - mean;
    const double incr = alpha * diff;
    mean += incr;
    variance = (1.0 - alpha) * (variance + diff * incr);
  }
  ++count;
}

std::string project_scope(ProjectId project) { return "project-" + std::to_string(project); }

std::size_t ModelSnapshot::trained_on_count() const {
  return std::visit([](const auto& m) { return m.count; }, params);
}

json ModelSnapshot::to_json() const {
  json p;
  if (const auto* l = std::get_if<LogisticModel>(&params)) {
    p = {{"type", "logistic"}, {"weights", l->weights}};
  } else {
    const auto& e = std::get<EwModel>(params);
    p = {{"type", "ew_log_duration"}, {"mean", e.mean}, {"variance", e.variance}};
  }
  return {{"model_snapshot_id", snapshot_id},
          {"model_kind", to_string(kind)},
          {"scope", scope},
          {"trained_on_count", trained_on_count()},
          {"created_at", format_rfc3339(created_at)},
          {"schema", kFeatureSchemaVersion},
          {"parameters", p}};
}

static std::shared_ptr<const ModelSnapshot> snapshot_from_json(const json& j) {
  auto s = std::make_shared<ModelSnapshot>();
  s->snapshot_id = j.at("model_snapshot_id").get<std::string>();
  s->kind = model_kind_from_string(j.at("model_kind").get<std::string>()).value();
  s->scope = j.at("scope").get<std::string>();
  s->created_at = parse_timestamp(j.at("created_at").get<std::string>()).value();
  const auto& p = j.at("parameters");
  const auto count = j.at("trained_on_count").get<std::size_t>();
  if (p.at("type") == "logistic") {
    LogisticModel m;
    m.weights = p.at("weights").get<ScaledVector>();
    m.count = count;
    s->params = m;
  } else {
    EwModel m;
    m.mean = p.at("mean").get<double>();
    m.variance = p.at("variance").get<double>();
    m.count = count;
    s->params = m;
  }
  return s;
}

std::shared_ptr<const ModelSnapshot> ModelView::find(ModelKind kind, const std::string& scope) const {
  auto it = snapshots.find({kind, scope});
  return it == snapshots.end() ? nullptr : it->second;
}

ModelRegistry::ModelRegistry(const Clock& clock, ModelOptions opts)
    : clock_(clock), opts_(opts), view_(std::make_shared<ModelView>(ModelView{"models-0", {}})) {}

std::shared_ptr<const ModelView> ModelRegistry::view() const {
  std::lock_guard lock(mu_);
  return view_;
}

Estimate ModelRegistry::predict(ModelKind kind, ProjectId project, const FeatureVector& x,
                                std::optional<double> prior_duration) const {
  return predict(*view(), opts_, kind, project, x, prior_duration);
}

Estimate ModelRegistry::predict(const ModelView& view, const ModelOptions& opts, ModelKind kind,
                                ProjectId project, const FeatureVector& x,
                                std::optional<double> prior_duration) {
  auto snap = view.find(kind, project_scope(project));
  if (!snap || snap->trained_on_count() == 0) snap = view.find(kind, std::string(kSharedScope));
  if (!snap || snap->trained_on_count() == 0) {
    const std::string id = std::string(to_string(kind)) + ":prior";
    if (is_probability(kind)) return {opts.prior_probability, std::nullopt, id};
    return {prior_duration.value_or(opts.default_duration_seconds), std::nullopt, id};
  }
  if (is_probability(kind)) {
    return {std::get<LogisticModel>(snap->params).predict(scale(x)), std::nullopt, snap->snapshot_id};
  }
  const auto& ew = std::get<EwModel>(snap->params);
  std::optional<double> sd;
  if (ew.count >= opts.min_duration_observations) sd = std::sqrt(ew.variance);
  return {std::exp(ew.mean), sd, snap->snapshot_id};
}

std::shared_ptr<const ModelSnapshot> ModelRegistry::step(const ModelSnapshot* prev, ModelKind kind,
                                                         const std::string& scope,
                                                         const FeatureVector& x, double y) const {
  auto next = std::make_shared<ModelSnapshot>();
  next->kind = kind;
  next->scope = scope;
  next->created_at = clock_.now();
  if (is_probability(kind)) {
    LogisticModel m = prev ? std::get<LogisticModel>(prev->params) : LogisticModel{};
    m.update(scale(x), y, opts_.learning_rate);
    next->params = m;
  } else {
    EwModel m = prev ? std::get<EwModel>(prev->params) : EwModel{};
    m.update(std::log(y), opts_.alpha);
    next->params = m;
  }
  next->snapshot_id =
      std::string(to_string(kind)) + ":" + scope + ":" + std::to_string(next->trained_on_count());
  return next;
}

void ModelRegistry::publish_locked(std::shared_ptr<const ModelSnapshot> snap) {
  auto& hist = history_[{snap->kind, snap->scope}];
  hist.push_back(snap);
  while (hist.size() > opts_.snapshot_history + 1) hist.pop_front();
}

void ModelRegistry::update(ModelKind kind, ProjectId project, const FeatureVector& x, double y) {
  if (is_probability(kind) && y != 0.0 && y != 1.0)
    throw Error(ErrorCode::kValidation, "label must be 0 or 1");
  if (!is_probability(kind) && !(y > 0 && std::isfinite(y)))
    throw Error(ErrorCode::kValidation, "duration must be positive");
  std::lock_guard lock(mu_);
  auto next = std::make_shared<ModelView>(*view_);
  for (const std::string& scope : {project_scope(project), std::string(kSharedScope)}) {
    auto prev = view_->find(kind, scope);
    auto snap = step(prev.get(), kind, scope, x, y);
    next->snapshots[{kind, scope}] = snap;
    publish_locked(snap);
  }
  next->view_id = "models-" + std::to_string(++generation_);
  view_ = std::move(next);
}

std::shared_ptr<const ModelSnapshot> ModelRegistry::snapshot(const std::string& snapshot_id) const {
  std::lock_guard lock(mu_);
  for (const auto& [_, hist] : history_)
    for (const auto& s : hist)
      if (s->snapshot_id == snapshot_id) return s;
  return nullptr;
}

json ModelRegistry::to_json() const {
  auto v = view();
  json snaps = json::array();
  for (const auto& [_, s] : v->snapshots) snaps.push_back(s->to_json());
  std::lock_guard lock(mu_);
  return {{"schema", kFeatureSchemaVersion}, {"generation", generation_}, {"snapshots", snaps}};
}

void ModelRegistry::load(const json& state) {
  if (state.value("schema", "") != kFeatureSchemaVersion)
    throw Error(ErrorCode::kSchemaMismatch, "stored models use another feature schema");
  std::lock_guard lock(mu_);
  auto v = std::make_shared<ModelView>();
  history_.clear();
  for (const auto& j : state.at("snapshots")) {
    auto s = snapshot_from_json(j);
    v->snapshots[{s->kind, s->scope}] = s;
    publish_locked(s);
  }
  generation_ = state.value("generation", std::uint64_t{0});
  v->view_id = "models-" + std::to_string(generation_);
  view_ = std::move(v);
}

AnomalyVerdict detect_anomaly(const PredictionRecord& r, const ModelOptions& opts) {
  if (!r.actual_value) throw Error(ErrorCode::kMissingActual, "prediction has no actual value");
  const double actual = *r.actual_value;
  if (r.model_kind == ModelKind::kDuration) {
    if (!r.predicted_log_sd || actual <= 0 || r.predicted_value <= 0) return {};
    const double sd = std::max(*r.predicted_log_sd, 1e-3);
    const double score = std::abs(std::log(actual) - std::log(r.predicted_value)) / sd;
    return {score > opts.anomaly_sigmas, score};
  }
  const double p = std::clamp(r.predicted_value, 1e-9, 1.0 - 1e-9);
  const double score = std::abs(actual - p) / std::sqrt(p * (1.0 - p));
  const bool anomaly = (actual >= 0.5 && p < opts.low_probability) ||
                       (actual < 0.5 && p > opts.high_probability);
  return {anomaly, score};
}

ModelService::ModelService(Storage& store, ModelRegistry& registry, const Clock& clock)
    : store_(store), registry_(registry), clock_(clock) {
  if (auto raw = store_.get_meta(std::string(kStateKey))) {
    try {
      auto state = json::parse(*raw);
      registry_.load(state.at("registry"));
      auto ids = store_.read_log(std::string(kProcessedStream));
      log_size_ = ids.size();
      // The registry is written before the id is appended, so the last event may be missing.
      if (auto last = state.find("last_event"); last != state.end() && last->is_string() &&
                                                std::find(ids.begin(), ids.end(), *last) == ids.end())
        ids.push_back(*last);
      for (const auto& id : ids) {
        if (!processed_.insert(id.get<std::string>()).second) continue;
        processed_order_.push_back(id.get<std::string>());
      }
      while (processed_order_.size() > kProcessedLedgerSize) {
        processed_.erase(processed_order_.front());
        processed_order_.pop_front();
      }
    } catch (const std::exception& e) {
      spdlog::warn("discarding stored model state: {}", e.what());
    }
  }
}

void ModelService::add_listener(Listener l) {
  std::lock_guard lock(mu_);
  listeners_.push_back(std::move(l));
}

bool ModelService::processed(const std::string& event_id) const {
  std::lock_guard lock(mu_);
  return processed_.count(event_id) > 0;
}

void ModelService::persist(const std::string& event_id) {
  store_.put_meta(std::string(kStateKey),
                  json{{"registry", registry_.to_json()}, {"last_event", event_id}}.dump());
  std::lock_guard lock(mu_);
  if (++log_size_ > 2 * kProcessedLedgerSize) {
    store_.rewrite_log(std::string(kProcessedStream),
                       std::vector<json>(processed_order_.begin(), processed_order_.end()));
    log_size_ = processed_order_.size();
  } else {
    store_.append_log(std::string(kProcessedStream), event_id);
  }
}

void ModelService::notify(const PredictionRecord& r, const BuildJob& job) {
  std::vector<Listener> ls;
  {
    std::lock_guard lock(mu_);
    ls = listeners_;
  }
  for (const auto& l : ls) {
    try {
      l(r, job);
    } catch (const std::exception& e) {
      spdlog::error("prediction listener failed: {}", e.what());
    }
  }
}

std::optional<double> ModelService::prior_duration() const {
  JobQuery q;
  q.statuses = std::vector<JobStatus>{JobStatus::kSuccess, JobStatus::kFailed};
  double sum = 0;
  std::size_t n = 0;
  for (const auto& j : store_.select_jobs(q))
    if (j.duration && *j.duration > 0) {
      sum += *j.duration;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

std::vector<PredictionRecord> ModelService::predict_job(const BuildJob& job) {
  const auto& opts = registry_.options();
  const auto features = compute_features(store_, job, {opts.feature_window});
  const auto x = to_vector(features);
  const auto view = registry_.view();
  std::optional<double> prior;
  if (!view->find(ModelKind::kDuration, std::string(kSharedScope))) prior = prior_duration();

  std::vector<PredictionRecord> out;
  for (ModelKind kind : kAllModelKinds) {
    const auto est = ModelRegistry::predict(*view, opts, kind, job.project_id, x, prior);
    PredictionRecord r;
    r.prediction_id = default_ids().next("pred");
    r.job_id = job.job_id;
    r.model_kind = kind;
    r.predicted_value = est.value;
    r.predicted_log_sd = est.log_sd;
    r.model_snapshot_id = est.snapshot_id;
    r.predicted_at = clock_.now();
    r.features = features;
    out.push_back(std::move(r));
  }
  store_.store_predictions(out);
  return out;
}

static std::optional<PredictionRecord> latest_of(const std::vector<PredictionRecord>& preds, ModelKind kind) {
  std::optional<PredictionRecord> best;
  for (const auto& p : preds)
    if (p.model_kind == kind &&
        (!best || std::tie(p.predicted_at, p.prediction_id) > std::tie(best->predicted_at, best->prediction_id)))
      best = p;
  return best;
}

std::optional<PredictionRecord> ModelService::settle(const BuildJob& job, ModelKind kind, double actual) {
  auto rec = latest_of(store_.predictions_for_job(job.job_id), kind);
  if (!rec || rec->actual_value) return std::nullopt;
  rec->actual_value = actual;
  const auto verdict = detect_anomaly(*rec, registry_.options());
  rec->anomaly = verdict.anomaly;
  rec->anomaly_score = verdict.score;
  store_.update_prediction(*rec);
  if (verdict.anomaly)
    spdlog::info("anomaly: job {} {} predicted {:.3f} actual {:.3f}", job.job_id, to_string(kind),
                 rec->predicted_value, actual);
  try {
    registry_.update(kind, job.project_id, to_vector(rec->features), actual);
    ++updates_;
  } catch (const Error& e) {
    spdlog::warn("prediction {} not used for training: {}", rec->prediction_id, e.what());
  }
  return rec;
}

void ModelService::handle_job(const BuildJob& job) {
  const auto preds = store_.predictions_for_job(job.job_id);
  if (preds.empty()) {
    auto made = predict_job(job);
    if (!is_terminal(job.status))
      for (const auto& r : made) notify(r, job);
  }
  if (!is_terminal(job.status)) return;

  if (is_completed(job.status)) {
    const bool failed = job.status == JobStatus::kFailed;
    auto settled = settle(job, ModelKind::kFailure, failed ? 1.0 : 0.0);
    if (job.duration && *job.duration > 0) settle(job, ModelKind::kDuration, *job.duration);
    if (settled && failed && job.finished_at) {
      auto flaky = latest_of(store_.predictions_for_job(job.job_id), ModelKind::kFlaky);
      if (flaky && flaky->predicted_at < *job.finished_at) notify(*flaky, job);
    }
  }

  // A failed job's flaky label is settled once a later rerun has finished.
  auto group = store_.pipeline_jobs(job.project_id, job.pipeline_id);
  std::erase_if(group, [&](const BuildJob& g) { return g.name != job.name; });
  for (const auto& g : group) {
    if (g.status != JobStatus::kFailed || !g.flaky) continue;
    const bool rerun_done = std::any_of(group.begin(), group.end(), [&](const BuildJob& h) {
      return h.created_at > g.created_at && is_terminal(h.status);
    });
    if (rerun_done) settle(g, ModelKind::kFlaky, *g.flaky ? 1.0 : 0.0);
  }
}

void ModelService::on_data_integrated(const DataIntegratedEvent& event) {
  if (processed(event.event_id)) return;
  std::vector<BuildJob> jobs;
  for (JobId id : event.job_ids)
    if (auto j = store_.get_job(id)) jobs.push_back(std::move(*j));
  std::sort(jobs.begin(), jobs.end(), [](const BuildJob& a, const BuildJob& b) {
    return std::tie(a.created_at, a.job_id) < std::tie(b.created_at, b.job_id);
  });
  for (const auto& job : jobs) {
    try {
      handle_job(job);
    } catch (const std::exception& e) {
      spdlog::error("models: job {} in event {} failed: {}", job.job_id, event.event_id, e.what());
    }
  }
  {
    std::lock_guard lock(mu_);
    processed_.insert(event.event_id);
    processed_order_.push_back(event.event_id);
    while (processed_order_.size() > kProcessedLedgerSize) {
      processed_.erase(processed_order_.front());
      processed_order_.pop_front();
    }
  }
  persist(event.event_id);
}

}  // namespace buildtwin
