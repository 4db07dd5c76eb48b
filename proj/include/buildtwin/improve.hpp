#pragma once

#include "buildtwin/adapters.hpp"
#include "buildtwin/models.hpp"

#include <set>

namespace buildtwin {

struct ImproveOptions {
  /// Predicted durations above this propose enabling the cache.
  double long_build_seconds = 600.0;
  double failure_probability = 0.8;
  /// A failed job whose flaky probability reaches this is treated as flaky.
  double flaky_probability = 0.5;
  std::chrono::seconds cooldown{3600};
  std::set<ActionKind> auto_approve;
  std::string cache_variable = "CBDT_ENABLE_CACHE";
  std::string advisory_dir = "buildtwin/advisories";
};

/// Rule-driven recommender with a persisted approval ledger. Every state
/// change is appended to the "actions" storage log; the latest record per
/// action wins on reload.
class ImprovementService {
 public:
  ImprovementService(Storage& store, const ModelRegistry& registry, const Clock& clock,
                     ImproveOptions opts = {});

  std::vector<ImprovementAction> propose(const PredictionRecord& trigger, const BuildJob& job);
  std::vector<ImprovementAction> propose(const AlertFiring& firing, const AlertRule& rule);

  /// Throws Error{kNotFound}, Error{kIllegalTransition}.
  ImprovementAction approve(const std::string& action_id);
  ImprovementAction reject(const std::string& action_id);

  /// Invokes the writer for an approved action at most once. Writer refusal
  /// marks the action failed with the error kept. Throws Error{kNotFound},
  /// Error{kIllegalTransition}.
  ImprovementAction apply(const std::string& action_id, ActualTwinWriter& writer);

  std::optional<ImprovementAction> get(const std::string& action_id) const;
  std::vector<ImprovementAction> list(std::optional<ActionStatus> status = std::nullopt) const;

  const ImproveOptions& options() const { return opts_; }

 private:
  std::optional<ImprovementAction> make_locked(ActionKind kind, ActionTarget target,
                                               std::map<std::string, std::string> payload);
  ImprovementAction transition_locked(ImprovementAction a, ActionStatus to);
  void record_locked(const ImprovementAction& a, const char* event);
  std::mutex& project_lock(ProjectId project);
  std::string advisory(const PredictionRecord& r) const;

  Storage& store_;
  const ModelRegistry& registry_;
  const Clock& clock_;
  ImproveOptions opts_;
  mutable std::mutex mu_;
  std::map<std::string, ImprovementAction> actions_;
  std::vector<std::string> order_;
  std::map<std::pair<ActionKind, std::string>, Timestamp> last_proposed_;
  std::set<std::string> applying_;
  std::map<ProjectId, std::unique_ptr<std::mutex>> project_locks_;
};

}  // namespace buildtwin
