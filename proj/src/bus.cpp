#include "buildtwin/bus.hpp"

#include "buildtwin/codec.hpp"
#include "buildtwin/errors.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>

namespace buildtwin {

namespace {

constexpr const char* kBusLog = "bus";

}  // namespace

bool is_valid_topic(std::string_view topic) {
  if (topic.empty() || topic.front() == '.' || topic.back() == '.') return false;
  char prev = 0;
  for (char c : topic) {
    bool ok = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-' || c == '.';
    if (!ok || (c == '.' && prev == '.')) return false;
    prev = c;
  }
  return true;
}

Subscription::Subscription(Subscription&& o) noexcept
    : bus_(std::exchange(o.bus_, nullptr)),
      topic_(std::move(o.topic_)),
      subscriber_id_(std::move(o.subscriber_id_)) {}

Subscription& Subscription::operator=(Subscription&& o) noexcept {
  if (this != &o) {
    close();
    bus_ = std::exchange(o.bus_, nullptr);
    topic_ = std::move(o.topic_);
    subscriber_id_ = std::move(o.subscriber_id_);
  }
  return *this;
}

Subscription::~Subscription() { close(); }

std::optional<Delivery> Subscription::try_next() {
  if (!bus_) return std::nullopt;
  return bus_->next(topic_, subscriber_id_, std::nullopt);
}

std::optional<Delivery> Subscription::next(std::chrono::milliseconds timeout) {
  if (!bus_) return std::nullopt;
  return bus_->next(topic_, subscriber_id_, timeout);
}

void Subscription::ack(std::uint64_t sequence) {
  if (bus_) bus_->ack(topic_, subscriber_id_, sequence);
}

void Subscription::close() {
  if (bus_) std::exchange(bus_, nullptr)->release(topic_, subscriber_id_);
}

MessageBus::MessageBus(Storage& store, const Clock& clock, BusOptions opts)
    : store_(store), clock_(clock), opts_(opts) {
  restore();
}

MessageBus::~MessageBus() { shutdown(); }

void MessageBus::restore() {
  std::lock_guard lock(mu_);
  for (const auto& rec : store_.read_log(kBusLog)) {
    const auto type = rec.at("t").get<std::string>();
    auto& topic = topics_[rec.at("topic").get<std::string>()];
    if (type == "pub") {
      auto seq = rec.at("seq").get<std::uint64_t>();
      topic.events.push_back({seq, rec.at("event").get<DataIntegratedEvent>()});
      next_sequence_ = std::max(next_sequence_, seq + 1);
    } else if (type == "sub") {
      topic.subscribers[rec.at("id").get<std::string>()];
    } else if (type == "ack") {
      topic.subscribers[rec.at("id").get<std::string>()].acked.insert(rec.at("seq").get<std::uint64_t>());
    }
  }
}

void MessageBus::publish(std::string_view topic_name, const DataIntegratedEvent& event) {
  if (closed_) throw Error(ErrorCode::kBusUnavailable, "bus is shut down");
  if (!is_valid_topic(topic_name))
    throw Error(ErrorCode::kValidation, "invalid topic " + std::string(topic_name));
  if (event.event_id.empty() || event.job_ids.empty())
    throw Error(ErrorCode::kValidation, "event needs an id and at least one job id");
  for (JobId id : event.job_ids)
    if (!store_.get_job(id))
      throw Error(ErrorCode::kValidation, "event references unknown job " + std::to_string(id));

  {
    std::lock_guard lock(mu_);
    const std::uint64_t seq = next_sequence_;
    try {
      store_.append_log(kBusLog, {{"t", "pub"}, {"topic", topic_name}, {"seq", seq}, {"event", event}});
    } catch (const Error& e) {
      throw Error(ErrorCode::kBusUnavailable, std::string("durable enqueue failed: ") + e.what());
    }
    ++next_sequence_;
    auto it = topics_.find(topic_name);
    if (it == topics_.end()) it = topics_.emplace(std::string(topic_name), TopicState{}).first;
    it->second.events.push_back({seq, event});
    if (++published_ % opts_.compact_every == 0) purge_locked();
  }
  cv_.notify_all();
}

Subscription MessageBus::subscribe(std::string_view topic_name, const std::string& subscriber_id) {
  if (!is_valid_topic(topic_name))
    throw Error(ErrorCode::kValidation, "invalid topic " + std::string(topic_name));
  std::lock_guard lock(mu_);
  auto it = topics_.find(topic_name);
  if (it == topics_.end()) it = topics_.emplace(std::string(topic_name), TopicState{}).first;
  auto [sub, fresh] = it->second.subscribers.try_emplace(subscriber_id);
  if (sub->second.active)
    throw Error(ErrorCode::kDuplicateSubscriber, "subscriber " + subscriber_id + " already active");
  if (fresh) store_.append_log(kBusLog, {{"t", "sub"}, {"topic", topic_name}, {"id", subscriber_id}});
  sub->second.active = true;
  sub->second.cursor = 0;
  return Subscription(this, std::string(topic_name), subscriber_id);
}

std::optional<Delivery> MessageBus::take_locked(const std::string& topic_name,
                                                const std::string& subscriber_id) {
  auto t = topics_.find(topic_name);
  if (t == topics_.end()) return std::nullopt;
  auto& topic = t->second;
  auto& sub = topic.subscribers.at(subscriber_id);
  const auto now = clock_.now();
  auto it = std::lower_bound(topic.events.begin(), topic.events.end(), sub.cursor,
                             [](const StoredEvent& e, std::uint64_t s) { return e.sequence < s; });
  for (; it != topic.events.end(); ++it) {
    if (sub.acked.count(it->sequence)) continue;
    if (now - it->event.emitted_at >= opts_.ttl) continue;
    sub.cursor = it->sequence + 1;
    return Delivery{it->sequence, it->event, ++sub.attempts[it->sequence]};
  }
  sub.cursor = topic.events.empty() ? sub.cursor : topic.events.back().sequence + 1;
  return std::nullopt;
}

std::optional<Delivery> MessageBus::next(const std::string& topic, const std::string& subscriber_id,
                                         std::optional<std::chrono::milliseconds> timeout) {
  std::unique_lock lock(mu_);
  auto d = take_locked(topic, subscriber_id);
  if (d || !timeout) return d;
  auto deadline = std::chrono::steady_clock::now() + *timeout;
  while (!d && !closed_) {
    if (cv_.wait_until(lock, deadline) == std::cv_status::timeout) return take_locked(topic, subscriber_id);
    d = take_locked(topic, subscriber_id);
  }
  return d;
}

void MessageBus::ack(const std::string& topic_name, const std::string& subscriber_id,
                     std::uint64_t sequence) {
  std::lock_guard lock(mu_);
  auto& sub = topics_.at(topic_name).subscribers.at(subscriber_id);
  if (!sub.acked.insert(sequence).second) return;
  sub.attempts.erase(sequence);
  store_.append_log(kBusLog,
                    {{"t", "ack"}, {"topic", topic_name}, {"id", subscriber_id}, {"seq", sequence}});
}

void MessageBus::release(const std::string& topic_name, const std::string& subscriber_id) {
  {
    std::lock_guard lock(mu_);
    auto t = topics_.find(topic_name);
    if (t == topics_.end()) return;
    if (auto s = t->second.subscribers.find(subscriber_id); s != t->second.subscribers.end()) {
      s->second.active = false;
      s->second.cursor = 0;
    }
  }
  cv_.notify_all();
}

std::size_t MessageBus::backlog(std::string_view topic_name, const std::string& subscriber_id) const {
  std::lock_guard lock(mu_);
  auto t = topics_.find(topic_name);
  if (t == topics_.end()) return 0;
  auto s = t->second.subscribers.find(subscriber_id);
  if (s == t->second.subscribers.end()) return 0;
  const auto now = clock_.now();
  std::size_t n = 0;
  for (const auto& e : t->second.events)
    if (!s->second.acked.count(e.sequence) && now - e.event.emitted_at < opts_.ttl) ++n;
  return n;
}

std::size_t MessageBus::retained(std::string_view topic_name) const {
  std::lock_guard lock(mu_);
  auto t = topics_.find(topic_name);
  return t == topics_.end() ? 0 : t->second.events.size();
}

std::size_t MessageBus::purge() {
  std::lock_guard lock(mu_);
  return purge_locked();
}

std::size_t MessageBus::purge_locked() {
  const auto now = clock_.now();
  std::size_t dropped = 0;
  std::vector<nlohmann::json> compacted;
  for (auto& [name, topic] : topics_) {
    std::deque<StoredEvent> keep;
    for (auto& e : topic.events) {
      bool expired = now - e.event.emitted_at >= opts_.ttl;
      bool all_acked = !topic.subscribers.empty() &&
                       std::all_of(topic.subscribers.begin(), topic.subscribers.end(),
                                   [&](const auto& s) { return s.second.acked.count(e.sequence) > 0; });
      if (expired || all_acked) {
        ++dropped;
        for (auto& [id, s] : topic.subscribers) {
          s.acked.erase(e.sequence);
          s.attempts.erase(e.sequence);
        }
      } else {
        keep.push_back(std::move(e));
      }
    }
    topic.events = std::move(keep);
    for (const auto& [id, s] : topic.subscribers)
      compacted.push_back({{"t", "sub"}, {"topic", name}, {"id", id}});
    for (const auto& e : topic.events) {
      compacted.push_back({{"t", "pub"}, {"topic", name}, {"seq", e.sequence}, {"event", e.event}});
      for (const auto& [id, s] : topic.subscribers)
        if (s.acked.count(e.sequence))
          compacted.push_back({{"t", "ack"}, {"topic", name}, {"id", id}, {"seq", e.sequence}});
    }
  }
  if (dropped > 0) store_.rewrite_log(kBusLog, std::move(compacted));
  return dropped;
}

void MessageBus::shutdown() {
  closed_ = true;
  cv_.notify_all();
}

Consumer::Consumer(MessageBus& bus, std::string topic, std::string subscriber_id, Handler handler,
                   std::size_t max_attempts)
    : bus_(bus),
      topic_(std::move(topic)),
      subscriber_id_(std::move(subscriber_id)),
      handler_(std::move(handler)),
      max_attempts_(max_attempts) {
  session_ = bus_.subscribe(topic_, subscriber_id_);
}

Consumer::~Consumer() { stop(); }

void Consumer::start() {
  if (running_.exchange(true)) return;
  worker_ = std::thread([this] {
    while (running_) {
      std::optional<Delivery> d;
      {
        std::lock_guard lock(session_mu_);
        d = session_.next(std::chrono::milliseconds(50));
      }
      if (d) handle(*d);
    }
  });
}

void Consumer::stop() {
  if (!running_.exchange(false)) return;
  if (worker_.joinable()) worker_.join();
}

std::size_t Consumer::pump() {
  std::size_t n = 0;
  while (true) {
    std::optional<Delivery> d;
    {
      std::lock_guard lock(session_mu_);
      d = session_.try_next();
    }
    if (!d) return n;
    handle(*d);
    ++n;
  }
}

bool Consumer::wait_idle(std::chrono::milliseconds timeout) {
  auto deadline = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < deadline) {
    if (bus_.backlog(topic_, subscriber_id_) == 0) return true;
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
  return false;
}

void Consumer::handle(const Delivery& d) {
  for (std::size_t attempt = 1;; ++attempt) {
    try {
      handler_(d.event);
      ++handled_;
      break;
    } catch (const std::exception& e) {
      if (attempt >= max_attempts_) {
        spdlog::error("subscriber {} dropped event {} after {} attempts: {}", subscriber_id_,
                      d.event.event_id, attempt, e.what());
        ++failed_;
        break;
      }
    }
  }
  std::lock_guard lock(session_mu_);
  session_.ack(d.sequence);
}

}  // namespace buildtwin
