#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace buildtwin {

// All twin timestamps are UTC at millisecond precision.
using Timestamp = std::chrono::sys_time<std::chrono::milliseconds>;
using Millis = std::chrono::milliseconds;

/// Formats as RFC 3339 UTC, e.g. "2024-07-01T08:00:00Z" or
/// "2024-07-01T08:00:00.250Z" when the millisecond part is non-zero.
std::string format_rfc3339(Timestamp t);

/// Parses RFC 3339 with any offset ("Z", "+02:00", "-0530") as well as the
/// GitLab webhook form "2024-07-01 10:00:00 UTC". The result is in UTC.
std::optional<Timestamp> parse_timestamp(std::string_view text);

Timestamp from_unix_millis(std::int64_t ms);
std::int64_t to_unix_millis(Timestamp t);

inline double seconds_between(Timestamp from, Timestamp to) {
  return std::chrono::duration<double>(to - from).count();
}

inline Timestamp add_seconds(Timestamp t, double seconds) {
  return t + std::chrono::duration_cast<Millis>(std::chrono::duration<double>(seconds));
}

/// Source of "now". Simulations and tests use ManualClock.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual Timestamp now() const = 0;
};

class SystemClock final : public Clock {
 public:
  Timestamp now() const override;
};

class ManualClock final : public Clock {
 public:
  explicit ManualClock(Timestamp start) : now_ms_(to_unix_millis(start)) {}
  Timestamp now() const override { return from_unix_millis(now_ms_.load()); }
  void set(Timestamp t) { now_ms_.store(to_unix_millis(t)); }
  void advance(Millis d) { now_ms_.fetch_add(d.count()); }

 private:
  std::atomic<std::int64_t> now_ms_;
};

}  // namespace buildtwin
