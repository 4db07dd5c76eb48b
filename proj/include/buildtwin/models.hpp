#pragma once

#include "buildtwin/bus.hpp"
#include "buildtwin/features.hpp"

#include <deque>
#include <functional>
#include <set>
#include <variant>

namespace buildtwin {

struct ModelOptions {
  double learning_rate = 0.05;
  double alpha = 0.1;
  std::size_t feature_window = kDefaultFeatureWindow;
  /// Duration predictions carry a spread (and can be flagged) only once the
  /// learner has seen this many observations.
  std::size_t min_duration_observations = 10;
  double prior_probability = 0.5;
  /// Used when no duration has been observed anywhere yet.
  double default_duration_seconds = 600.0;
  double anomaly_sigmas = 3.0;
  double low_probability = 0.05;
  double high_probability = 0.95;
  /// Superseded snapshots kept per (kind, scope) for lookup by id.
  std::size_t snapshot_history = 16;
};

/// Online logistic regression, one SGD step on log-loss per observation.
struct LogisticModel {
  ScaledVector weights{};
  std::size_t count = 0;

  double predict(const ScaledVector& x) const;
  void update(const ScaledVector& x, double y, double learning_rate);

  friend bool operator==(const LogisticModel&, const LogisticModel&) = default;
};

double sigmoid(double z);
double log_loss(const ScaledVector& w, const ScaledVector& x, double y);
/// d log_loss / d w.
ScaledVector log_loss_gradient(const ScaledVector& w, const ScaledVector& x, double y);

/// Exponentially weighted mean and variance. The first observation seeds the
/// mean; afterwards mean += alpha (v - mean) and
/// variance = (1 - alpha) (variance + alpha (v - mean_old)^2).
struct EwModel {
  double mean = 0.0;
  double variance = 0.0;
  std::size_t count = 0;

  void update(double value, double alpha);

  friend bool operator==(const EwModel&, const EwModel&) = default;
};

inline constexpr std::string_view kSharedScope = "shared";
std::string project_scope(ProjectId project);

struct ModelSnapshot {
  std::string snapshot_id;
  ModelKind kind = ModelKind::kFailure;
  std::string scope;
  /// LogisticModel for failure/flaky, EwModel over log-duration for duration.
  std::variant<LogisticModel, EwModel> params;
  Timestamp created_at{};

  std::size_t trained_on_count() const;
  nlohmann::json to_json() const;
};

struct Estimate {
  double value = 0.0;
  std::optional<double> log_sd;
  std::string snapshot_id;
};

/// A consistent set of current snapshots. Immutable once published.
struct ModelView {
  std::string view_id;
  std::map<std::pair<ModelKind, std::string>, std::shared_ptr<const ModelSnapshot>> snapshots;

  std::shared_ptr<const ModelSnapshot> find(ModelKind kind, const std::string& scope) const;
};

class ModelRegistry {
 public:
  explicit ModelRegistry(const Clock& clock, ModelOptions opts = {});

  std::shared_ptr<const ModelView> view() const;

  /// Per-project snapshot if trained, else the shared one, else the prior.
  /// `prior_duration` overrides the default duration prior.
  Estimate predict(ModelKind kind, ProjectId project, const FeatureVector& x,
                   std::optional<double> prior_duration = std::nullopt) const;
  static Estimate predict(const ModelView& view, const ModelOptions& opts, ModelKind kind,
                          ProjectId project, const FeatureVector& x,
                          std::optional<double> prior_duration = std::nullopt);

  /// One step on the project learner and one on the shared learner. `y` is
  /// the label for failure/flaky and the duration in seconds for duration.
  void update(ModelKind kind, ProjectId project, const FeatureVector& x, double y);

  std::shared_ptr<const ModelSnapshot> snapshot(const std::string& snapshot_id) const;
  const ModelOptions& options() const { return opts_; }

  nlohmann::json to_json() const;
  /// Throws Error{kSchemaMismatch} for a state written with another schema.
  void load(const nlohmann::json& state);

 private:
  std::shared_ptr<const ModelSnapshot> step(const ModelSnapshot* prev, ModelKind kind,
                                            const std::string& scope, const FeatureVector& x,
                                            double y) const;
  void publish_locked(std::shared_ptr<const ModelSnapshot> snap);

  const Clock& clock_;
  ModelOptions opts_;
  mutable std::mutex mu_;
  std::shared_ptr<const ModelView> view_;
  std::uint64_t generation_ = 0;
  std::map<std::pair<ModelKind, std::string>, std::deque<std::shared_ptr<const ModelSnapshot>>> history_;
};

struct AnomalyVerdict {
  bool anomaly = false;
  std::optional<double> score;
};

/// Throws Error{kMissingActual}.
AnomalyVerdict detect_anomaly(const PredictionRecord& record, const ModelOptions& opts = {});

/// Continual-learning subscriber: predicts for new jobs, attaches actuals for
/// finished ones, flags anomalies and trains.
class ModelService {
 public:
  /// Called for predictions made ahead of the outcome, and again for a failed
  /// job's flaky prediction once the failure is observed.
  using Listener = std::function<void(const PredictionRecord&, const BuildJob&)>;

  ModelService(Storage& store, ModelRegistry& registry, const Clock& clock);

  void on_data_integrated(const DataIntegratedEvent& event);
  void add_listener(Listener l);

  /// Computes features for `job`, predicts every kind and stores the records.
  std::vector<PredictionRecord> predict_job(const BuildJob& job);

  bool processed(const std::string& event_id) const;
  std::size_t updates() const { return updates_.load(); }

 private:
  void handle_job(const BuildJob& job);
  std::optional<PredictionRecord> settle(const BuildJob& job, ModelKind kind, double actual);
  void persist(const std::string& event_id);
  void notify(const PredictionRecord& r, const BuildJob& job);
  std::optional<double> prior_duration() const;

  Storage& store_;
  ModelRegistry& registry_;
  const Clock& clock_;
  mutable std::mutex mu_;
  std::set<std::string> processed_;
  std::deque<std::string> processed_order_;
  std::size_t log_size_ = 0;
  std::vector<Listener> listeners_;
  std::atomic<std::size_t> updates_{0};
};

}  // namespace buildtwin
