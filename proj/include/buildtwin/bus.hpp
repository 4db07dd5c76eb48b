#pragma once

// In-process publish/subscribe broker for data-availability signals.
//
// Delivery is at-least-once with per-subscriber FIFO order. Every publish,
// subscriber registration and ack is spilled to a Storage log before it takes
// effect, so a broker rebuilt over the same storage resumes every cursor.
// Events handed out but not acked are redelivered when the subscriber_id
// subscribes again.

#include "buildtwin/store.hpp"
#include "buildtwin/time.hpp"
#include "buildtwin/types.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <memory>
#include <set>
#include <thread>

namespace buildtwin {

inline constexpr std::string_view kDataIntegratedTopic = "build-data.integrated";

/// Lowercase dot-separated segments of [a-z0-9-].
bool is_valid_topic(std::string_view topic);

struct BusOptions {
  std::chrono::seconds ttl{std::chrono::hours(24 * 7)};
  /// Expired/fully-acked events are purged every this many publishes.
  std::size_t compact_every = 1024;
};

struct Delivery {
  std::uint64_t sequence = 0;
  DataIntegratedEvent event;
  /// 1 on first hand-out to this subscriber_id, incremented on redelivery.
  std::size_t attempt = 1;
};

class MessageBus;

/// One live consumer session. Destroying it without acking leaves the
/// outstanding events queued for redelivery.
class Subscription {
 public:
  Subscription() = default;
  Subscription(Subscription&& o) noexcept;
  Subscription& operator=(Subscription&& o) noexcept;
  Subscription(const Subscription&) = delete;
  Subscription& operator=(const Subscription&) = delete;
  ~Subscription();

  std::optional<Delivery> try_next();
  std::optional<Delivery> next(std::chrono::milliseconds timeout);
  void ack(std::uint64_t sequence);
  void close();

  bool active() const { return bus_ != nullptr; }
  const std::string& subscriber_id() const { return subscriber_id_; }

 private:
  friend class MessageBus;
  Subscription(MessageBus* bus, std::string topic, std::string subscriber_id)
      : bus_(bus), topic_(std::move(topic)), subscriber_id_(std::move(subscriber_id)) {}

  MessageBus* bus_ = nullptr;
  std::string topic_;
  std::string subscriber_id_;
};

class MessageBus {
 public:
  MessageBus(Storage& store, const Clock& clock, BusOptions opts = {});
  ~MessageBus();

  /// Returns after the event is durably enqueued. Throws Error{kValidation}
  /// for an invalid event, Error{kBusUnavailable} after shutdown().
  void publish(std::string_view topic, const DataIntegratedEvent& event);

  /// Throws Error{kDuplicateSubscriber} while another session for the same
  /// subscriber_id is open.
  Subscription subscribe(std::string_view topic, const std::string& subscriber_id);

  /// Events not yet acked by `subscriber_id` (0 for unknown ids).
  std::size_t backlog(std::string_view topic, const std::string& subscriber_id) const;
  std::size_t retained(std::string_view topic) const;
  std::uint64_t published_count() const { return published_.load(); }

  /// Drops expired events and events acked by every known subscriber.
  std::size_t purge();

  /// Wakes all waiters; subsequent publishes fail with kBusUnavailable.
  void shutdown();
  bool healthy() const { return !closed_.load(); }

 private:
  friend class Subscription;

  struct StoredEvent {
    std::uint64_t sequence;
    DataIntegratedEvent event;
  };
  struct SubscriberState {
    std::set<std::uint64_t> acked;
    std::map<std::uint64_t, std::size_t> attempts;
    std::uint64_t cursor = 0;
    bool active = false;
  };
  struct TopicState {
    std::deque<StoredEvent> events;
    std::map<std::string, SubscriberState> subscribers;
  };

  std::optional<Delivery> take_locked(const std::string& topic, const std::string& subscriber_id);
  std::optional<Delivery> next(const std::string& topic, const std::string& subscriber_id,
                               std::optional<std::chrono::milliseconds> timeout);
  void ack(const std::string& topic, const std::string& subscriber_id, std::uint64_t sequence);
  void release(const std::string& topic, const std::string& subscriber_id);
  std::size_t purge_locked();
  void restore();

  Storage& store_;
  const Clock& clock_;
  BusOptions opts_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::string, TopicState, std::less<>> topics_;
  std::uint64_t next_sequence_ = 1;
  std::atomic<std::uint64_t> published_{0};
  std::atomic<bool> closed_{false};
};

/// Runs a handler over a subscription and acks after it returns. A handler
/// that keeps throwing is given `max_attempts` tries, then the event is
/// logged and acked so the loop never wedges.
class Consumer {
 public:
  using Handler = std::function<void(const DataIntegratedEvent&)>;

  Consumer(MessageBus& bus, std::string topic, std::string subscriber_id, Handler handler,
           std::size_t max_attempts = 3);
  ~Consumer();
  Consumer(const Consumer&) = delete;
  Consumer& operator=(const Consumer&) = delete;

  /// Background delivery thread.
  void start();
  void stop();
  /// Synchronously handles everything currently queued; returns the count.
  std::size_t pump();
  /// Blocks until the queue is empty and no handler is running.
  bool wait_idle(std::chrono::milliseconds timeout);

  std::size_t handled() const { return handled_.load(); }
  std::size_t failed() const { return failed_.load(); }

 private:
  void handle(const Delivery& d);

  MessageBus& bus_;
  std::string topic_;
  std::string subscriber_id_;
  Handler handler_;
  std::size_t max_attempts_;
  std::mutex session_mu_;
  Subscription session_;
  std::thread worker_;
  std::atomic<bool> running_{false};
  std::atomic<std::size_t> handled_{0};
  std::atomic<std::size_t> failed_{0};
};

}  // namespace buildtwin
