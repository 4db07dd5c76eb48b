#include "../support.hpp"

#include "buildtwin/errors.hpp"
#include "buildtwin/ingest.hpp"
#include "buildtwin/models.hpp"

#include <doctest.h>

#include <cmath>

using namespace buildtwin;
using namespace buildtwin::test;

namespace {

const FeatureVector kZero{};

PredictionRecord prediction(ModelKind kind, double predicted, double actual, std::optional<double> sd = {}) {
  PredictionRecord r;
  r.model_kind = kind;
  r.predicted_value = predicted;
  r.predicted_log_sd = sd;
  r.actual_value = actual;
  return r;
}

}  // namespace

TEST_CASE("log-loss gradient matches central finite differences") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> w_dist(-2, 2), x_dist(0, 1);
  std::bernoulli_distribution label(0.4);
  const double h = 1e-6;
  for (int point = 0; point < 100; ++point) {
    ScaledVector w, x;
    for (auto& v : w) v = w_dist(rng);
    for (auto& v : x) v = x_dist(rng);
    x[0] = 1;
    const double y = label(rng) ? 1 : 0;
    const auto g = log_loss_gradient(w, x, y);
    for (std::size_t i = 0; i < w.size(); ++i) {
      auto up = w, down = w;
      up[i] += h;
      down[i] -= h;
      const double fd = (log_loss(up, x, y) - log_loss(down, x, y)) / (2 * h);
      CHECK(std::abs(g[i] - fd) <= 1e-4 * std::max(std::abs(fd), 1e-3));
    }
  }
}

TEST_CASE("logistic update is one gradient step") {
  LogisticModel m;
  m.weights = {0.1, -0.2, 0.3, 0, 0.5, 0, 0, 1};
  ScaledVector x{1, 0.5, 0.5, 0.2, 0.3, 0.4, 0.2, 1};
  const auto before = m.weights;
  const auto g = log_loss_gradient(before, x, 1.0);
  m.update(x, 1.0, 0.05);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(m.weights[i] == before[i] - 0.05 * g[i]);
  CHECK(m.count == 1);
}

TEST_CASE("intercept-only learner tracks the observed frequency") {
  std::mt19937_64 rng(8);
  std::bernoulli_distribution y(0.3);
  LogisticModel m;
  const auto x = scale(kZero);
  double ones = 0, avg = 0;
  const int n = 40000, tail = 20000;
  for (int i = 0; i < n; ++i) {
    const bool v = y(rng);
    ones += v;
    m.update(x, v ? 1 : 0, 0.05);
    if (i >= n - tail) avg += m.predict(x) / tail;
  }
  // Batch MLE for a constant model is the sample frequency; within 3 binomial sd of 0.3.
  const double mle = ones / n;
  CHECK(std::abs(mle - 0.3) < 3 * std::sqrt(0.3 * 0.7 / n));
  CHECK(std::abs(avg - mle) < 0.02);
}

TEST_CASE("EW mean and variance follow the recurrence") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> v(5, 1);
  const double a = 0.1;
  EwModel m;
  std::vector<double> xs;
  double mean = 0, var = 0;
  for (int k = 1; k <= 200; ++k) {
    const double x = v(rng);
    xs.push_back(x);
    m.update(x, a);
    if (k == 1) {
      mean = x;
      var = 0;
    } else {
      const double d = x - mean;
      mean = mean + a * d;
      var = (1 - a) * (var + a * d * d);
    }
    CHECK(m.mean == mean);
    CHECK(m.variance == doctest::Approx(var).epsilon(1e-12));
    // Closed form: (1-a)^(k-1) x1 + sum_{i>=2} a (1-a)^(k-i) x_i
    double closed = std::pow(1 - a, k - 1) * xs[0];
    for (int i = 2; i <= k; ++i) closed += a * std::pow(1 - a, k - i) * xs[static_cast<std::size_t>(i - 1)];
    CHECK(m.mean == doctest::Approx(closed).epsilon(1e-12));
  }
  CHECK(m.count == 200);
}

TEST_CASE("anomaly verdicts") {
  using K = ModelKind;
  CHECK_THROWS_AS(detect_anomaly(PredictionRecord{}), Error);
  auto v = detect_anomaly(prediction(K::kDuration, 100, 100 * std::exp(0.5), 0.1));
  CHECK(v.anomaly);
  CHECK(*v.score == doctest::Approx(5.0));
  CHECK_FALSE(detect_anomaly(prediction(K::kDuration, 100, 100 * std::exp(0.25), 0.1)).anomaly);
  CHECK_FALSE(detect_anomaly(prediction(K::kDuration, 100, 1000)).anomaly);  // no spread yet
  CHECK(detect_anomaly(prediction(K::kFailure, 0.01, 1)).anomaly);
  CHECK_FALSE(detect_anomaly(prediction(K::kFailure, 0.01, 0)).anomaly);
  CHECK(detect_anomaly(prediction(K::kFlaky, 0.99, 0)).anomaly);
  CHECK_FALSE(detect_anomaly(prediction(K::kFlaky, 0.5, 1)).anomaly);
  CHECK(*detect_anomaly(prediction(K::kFailure, 0.2, 1)).score == doctest::Approx(0.8 / std::sqrt(0.16)));
}

TEST_CASE("registry falls back from project to shared to prior") {
  ManualClock clock(kT0);
  ModelRegistry reg(clock);
  auto e = reg.predict(ModelKind::kFailure, 1, kZero);
  CHECK(e.value == 0.5);
  CHECK(e.snapshot_id == "failure:prior");
  CHECK(reg.predict(ModelKind::kDuration, 1, kZero).value == 600);
  CHECK(reg.predict(ModelKind::kDuration, 1, kZero, 120.0).value == 120);

  reg.update(ModelKind::kFailure, 1, kZero, 1.0);
  CHECK(reg.predict(ModelKind::kFailure, 1, kZero).snapshot_id == "failure:project-1:1");
  CHECK(reg.predict(ModelKind::kFailure, 2, kZero).snapshot_id == "failure:shared:1");
  CHECK(reg.view()->view_id == "models-1");

  for (int i = 0; i < 9; ++i) reg.update(ModelKind::kDuration, 1, kZero, 100.0 + i);
  CHECK_FALSE(reg.predict(ModelKind::kDuration, 1, kZero).log_sd);
  reg.update(ModelKind::kDuration, 1, kZero, 300.0);
  auto d = reg.predict(ModelKind::kDuration, 1, kZero);
  CHECK(d.log_sd);
  CHECK(d.snapshot_id == "duration:project-1:10");
  CHECK(reg.snapshot("duration:project-1:3"));

  CHECK_THROWS_AS(reg.update(ModelKind::kFailure, 1, kZero, 0.5), Error);
  CHECK_THROWS_AS(reg.update(ModelKind::kDuration, 1, kZero, 0.0), Error);
}

TEST_CASE("views are immutable snapshots") {
  ManualClock clock(kT0);
  ModelRegistry reg(clock);
  reg.update(ModelKind::kFailure, 1, kZero, 1.0);
  auto pinned = reg.view();
  const auto before = ModelRegistry::predict(*pinned, reg.options(), ModelKind::kFailure, 1, kZero);
  for (int i = 0; i < 20; ++i) reg.update(ModelKind::kFailure, 1, kZero, 0.0);
  const auto after = ModelRegistry::predict(*pinned, reg.options(), ModelKind::kFailure, 1, kZero);
  CHECK(before.value == after.value);
  CHECK(reg.predict(ModelKind::kFailure, 1, kZero).value < before.value);
}

TEST_CASE("registry state round-trips") {
  ManualClock clock(kT0);
  ModelRegistry a(clock);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 50; ++i) {
    FeatureVector x{double(i % 24), double(i % 7), u(rng) * 100, u(rng), u(rng) * 500, double(i % 3), double(i % 2)};
    a.update(ModelKind::kFailure, 1 + i % 2, x, u(rng) < 0.3 ? 1.0 : 0.0);
    a.update(ModelKind::kDuration, 1, x, 50 + 100 * u(rng));
  }
  ModelRegistry b(clock);
  b.load(a.to_json());
  CHECK(b.to_json() == a.to_json());
  FeatureVector probe{3, 2, 10, 0.2, 100, 1, 1};
  CHECK(b.predict(ModelKind::kFailure, 2, probe).value == a.predict(ModelKind::kFailure, 2, probe).value);
  auto bad = a.to_json();
  bad["schema"] = "v0";
  CHECK_THROWS_AS(b.load(bad), Error);
}

TEST_CASE("model service predicts, settles and trains once per job") {
  MemoryStorage store;
  ManualClock clock(kT0);
  MessageBus bus(store, clock);
  Ingestor ingest(store, bus, clock);
  ModelRegistry reg(clock);
  ModelService svc(store, reg, clock);
  std::vector<std::pair<ModelKind, JobId>> heard;
  svc.add_listener([&](const PredictionRecord& r, const BuildJob& j) { heard.emplace_back(r.model_kind, j.job_id); });

  auto running = make_job(1, JobStatus::kRunning);
  auto r1 = ingest.integrate({to_raw_job(running)}, EventSource::kWebhook);
  DataIntegratedEvent e1{*r1.event_id, kT0, r1.job_ids, EventSource::kWebhook};
  svc.on_data_integrated(e1);
  REQUIRE(store.predictions_for_job(1).size() == 3);
  CHECK(heard.size() == 3);
  CHECK(svc.updates() == 0);

  auto failed = make_job(1, JobStatus::kFailed, kT0, 200);
  clock.advance(std::chrono::minutes(5));
  auto r2 = ingest.integrate({to_raw_job(failed)}, EventSource::kWebhook);
  DataIntegratedEvent e2{*r2.event_id, clock.now(), r2.job_ids, EventSource::kWebhook};
  svc.on_data_integrated(e2);
  CHECK(store.predictions_for_job(1).size() == 3);  // no second prediction
  CHECK(svc.updates() == 2);                        // failure + duration
  CHECK(heard.back() == std::pair(ModelKind::kFlaky, JobId{1}));

  // Redelivery of either event changes nothing.
  svc.on_data_integrated(e2);
  DataIntegratedEvent e2b{"other-id", clock.now(), r2.job_ids, EventSource::kWebhook};
  svc.on_data_integrated(e2b);
  CHECK(svc.updates() == 2);

  // The retry succeeds: the failed job's flaky label settles as 1.
  auto retry = make_job(2, JobStatus::kSuccess, kT0 + std::chrono::minutes(6), 150);
  auto r3 = ingest.integrate({to_raw_job(retry)}, EventSource::kWebhook);
  svc.on_data_integrated({*r3.event_id, clock.now(), r3.job_ids, EventSource::kWebhook});
  const auto preds = store.predictions_for_job(1);
  auto flaky = std::find_if(preds.begin(), preds.end(), [](const auto& p) { return p.model_kind == ModelKind::kFlaky; });
  REQUIRE(flaky != preds.end());
  CHECK(flaky->actual_value == 1.0);
  CHECK(svc.updates() == 5);
  for (const auto& p : preds) CHECK(p.features.size() == kFeatureCount);

  // A rebuilt service remembers processed events and the trained models.
  ModelRegistry reg2(clock);
  ModelService svc2(store, reg2, clock);
  CHECK(svc2.processed(e2.event_id));
  CHECK(reg2.to_json() == reg.to_json());

  // Crash after the registry was written but before the id was logged.
  auto ids = store.read_log("models.processed");
  REQUIRE(ids.size() == 4);
  const std::string last = ids.back().get<std::string>();
  ids.pop_back();
  store.rewrite_log("models.processed", ids);
  ModelRegistry reg3(clock);
  ModelService svc3(store, reg3, clock);
  CHECK(svc3.processed(last));
  CHECK(svc3.processed(e1.event_id));
}
