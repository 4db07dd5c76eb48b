#pragma once

// Windows are half-open and aligned in UTC: hours, days, weeks from Monday,
// calendar months and years. Executions count by created_at; outcome metrics
// (duration, failure and flaky ratios) count completed jobs by finished_at.

#include "buildtwin/store.hpp"

#include <functional>
#include <list>
#include <unordered_map>

namespace buildtwin {

Timestamp align_down(Timestamp t, Interval interval);
bool is_aligned(Timestamp t, Interval interval);
/// Start of the window following the one starting at `start` (must be aligned).
Timestamp next_boundary(Timestamp start, Interval interval);
Timestamp prev_boundary(Timestamp start, Interval interval);

/// Throws Error{kUnalignedWindow}.
MetricSnapshot compute_snapshot(const Storage& store, const Scope& scope, Interval interval,
                                Timestamp window_start);

/// One snapshot per window in [from, to), empty windows included.
/// Throws Error{kUnalignedWindow}, Error{kInvertedRange}.
std::vector<MetricSnapshot> series(const Storage& store, const Scope& scope, Interval interval,
                                   Timestamp from, Timestamp to);

/// Snapshot reads with a cache of closed windows, cleared whenever new data
/// is integrated.
class MetricsService {
 public:
  MetricsService(const Storage& store, const Clock& clock, std::size_t capacity = 4096);

  MetricSnapshot snapshot(const Scope& scope, Interval interval, Timestamp window_start);
  std::vector<MetricSnapshot> series(const Scope& scope, Interval interval, Timestamp from, Timestamp to);

  void invalidate();
  std::size_t cache_hits() const { return hits_.load(); }

 private:
  const Storage& store_;
  const Clock& clock_;
  std::size_t capacity_;
  std::mutex mu_;
  std::unordered_map<std::string, MetricSnapshot> cache_;
  std::atomic<std::size_t> hits_{0};
};

/// Edge-triggered threshold alerts over the most recent closed window.
class AlertEngine {
 public:
  using Sink = std::function<void(const AlertRule&, const AlertFiring&)>;

  AlertEngine(MetricsService& metrics, Storage& store, const Clock& clock);

  /// Replaces the default sink ("log" writes a log line, URLs get a POST).
  void set_sink(Sink sink) { sink_ = std::move(sink); }

  /// Assigns a rule_id when empty. Throws Error{kValidation}.
  AlertRule add_rule(AlertRule rule);
  bool remove_rule(const std::string& rule_id);
  std::vector<AlertRule> rules() const;

  /// Fires rules whose condition holds on the latest closed window but did
  /// not hold on the window before. A window fires at most once per rule.
  std::vector<AlertFiring> evaluate(Timestamp now);

  std::vector<AlertFiring> recent_firings(std::size_t n = 100) const;

  static void deliver_default(const AlertRule& rule, const AlertFiring& firing);

 private:
  void persist_locked();

  MetricsService& metrics_;
  Storage& store_;
  const Clock& clock_;
  Sink sink_;
  mutable std::mutex mu_;
  std::map<std::string, AlertRule> rules_;
  std::map<std::string, Timestamp> last_fired_window_;
};

}  // namespace buildtwin
