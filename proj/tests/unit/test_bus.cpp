#include "../support.hpp"

#include "buildtwin/bus.hpp"
#include "buildtwin/errors.hpp"

#include <doctest.h>

using namespace buildtwin;
using namespace buildtwin::test;

namespace {

DataIntegratedEvent event(const std::string& id, Timestamp at = kT0) {
  return {id, at, {1}, EventSource::kWebhook};
}

const std::string kTopic(kDataIntegratedTopic);

}  // namespace

TEST_CASE("topic names") {
  CHECK(is_valid_topic("build-data.integrated"));
  CHECK_FALSE(is_valid_topic("Build.Data"));
  CHECK_FALSE(is_valid_topic("a..b"));
  CHECK_FALSE(is_valid_topic(""));
}

TEST_CASE("per-subscriber FIFO with independent cursors") {
  MemoryStorage store;
  store.upsert_jobs(std::vector{make_job(1)});
  ManualClock clock(kT0);
  MessageBus bus(store, clock);
  auto a = bus.subscribe(kTopic, "a");
  auto b = bus.subscribe(kTopic, "b");
  for (int i = 0; i < 5; ++i) bus.publish(kTopic, event("e" + std::to_string(i)));
  for (int i = 0; i < 5; ++i) {
    auto d = a.try_next();
    REQUIRE(d);
    CHECK(d->event.event_id == "e" + std::to_string(i));
    a.ack(d->sequence);
  }
  CHECK_FALSE(a.try_next());
  CHECK(bus.backlog(kTopic, "a") == 0);
  CHECK(bus.backlog(kTopic, "b") == 5);
  CHECK(b.try_next()->event.event_id == "e0");
}

TEST_CASE("unacked events are redelivered to the next session") {
  MemoryStorage store;
  store.upsert_jobs(std::vector{make_job(1)});
  ManualClock clock(kT0);
  MessageBus bus(store, clock);
  {
    auto s = bus.subscribe(kTopic, "m");
    bus.publish(kTopic, event("x"));
    bus.publish(kTopic, event("y"));
    auto d = s.try_next();
    s.ack(d->sequence);
    auto e = s.try_next();  // taken, never acked
    CHECK(e->attempt == 1);
  }
  auto s = bus.subscribe(kTopic, "m");
  auto d = s.try_next();
  REQUIRE(d);
  CHECK(d->event.event_id == "y");
  CHECK(d->attempt == 2);
}

TEST_CASE("a rebuilt bus resumes every cursor from storage") {
  MemoryStorage store;
  store.upsert_jobs(std::vector{make_job(1)});
  ManualClock clock(kT0);
  {
    MessageBus bus(store, clock);
    auto s = bus.subscribe(kTopic, "m");
    for (auto id : {"a", "b", "c"}) bus.publish(kTopic, event(id));
    s.ack(s.try_next()->sequence);
  }
  MessageBus bus(store, clock);
  CHECK(bus.backlog(kTopic, "m") == 2);
  auto s = bus.subscribe(kTopic, "m");
  CHECK(s.try_next()->event.event_id == "b");
}

TEST_CASE("duplicate active subscriber is refused") {
  MemoryStorage store;
  store.upsert_jobs(std::vector{make_job(1)});
  ManualClock clock(kT0);
  MessageBus bus(store, clock);
  auto s = bus.subscribe(kTopic, "m");
  CHECK_THROWS_AS(bus.subscribe(kTopic, "m"), Error);
  s.close();
  CHECK_NOTHROW(bus.subscribe(kTopic, "m"));
}

TEST_CASE("expired events are skipped and purged") {
  MemoryStorage store;
  store.upsert_jobs(std::vector{make_job(1)});
  ManualClock clock(kT0);
  MessageBus bus(store, clock, BusOptions{std::chrono::hours(1), 1024});
  auto s = bus.subscribe(kTopic, "m");
  bus.publish(kTopic, event("old", kT0));
  clock.advance(std::chrono::hours(2));
  bus.publish(kTopic, event("new", clock.now()));
  CHECK(s.try_next()->event.event_id == "new");
  bus.purge();
  CHECK(bus.retained(kTopic) <= 1);
}

TEST_CASE("publish validates and fails after shutdown") {
  MemoryStorage store;
  store.upsert_jobs(std::vector{make_job(1)});
  ManualClock clock(kT0);
  MessageBus bus(store, clock);
  CHECK_THROWS_AS(bus.publish(kTopic, event("")), Error);
  bus.shutdown();
  CHECK_FALSE(bus.healthy());
  try {
    bus.publish(kTopic, event("z"));
    FAIL("expected throw");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kBusUnavailable);
  }
}

TEST_CASE("consumer retries a throwing handler then moves on") {
  MemoryStorage store;
  store.upsert_jobs(std::vector{make_job(1)});
  ManualClock clock(kT0);
  MessageBus bus(store, clock);
  int calls = 0;
  std::vector<std::string> seen;
  Consumer c(bus, kTopic, "c", [&](const DataIntegratedEvent& e) {
    ++calls;
    if (e.event_id == "poison") throw std::runtime_error("boom");
    seen.push_back(e.event_id);
  });
  bus.publish(kTopic, event("poison"));
  bus.publish(kTopic, event("fine"));
  CHECK(c.pump() == 2);
  CHECK(calls == 4);
  CHECK(seen == std::vector<std::string>{"fine"});
  CHECK(c.failed() == 1);
  CHECK(bus.backlog(kTopic, "c") == 0);
}

TEST_CASE("threaded consumer drains") {
  MemoryStorage store;
  store.upsert_jobs(std::vector{make_job(1)});
  ManualClock clock(kT0);
  MessageBus bus(store, clock);
  std::atomic<int> n{0};
  Consumer c(bus, kTopic, "c", [&](const DataIntegratedEvent&) { ++n; });
  c.start();
  for (int i = 0; i < 100; ++i) bus.publish(kTopic, event("e" + std::to_string(i)));
  CHECK(c.wait_idle(std::chrono::seconds(10)));
  CHECK(n == 100);
  c.stop();
}
