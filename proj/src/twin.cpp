#include "buildtwin/twin.hpp"

#include "buildtwin/errors.hpp"

#include <spdlog/spdlog.h>
#include <toml.hpp>

#include <cstdlib>
#include <fstream>

namespace buildtwin {

namespace {

[[noreturn]] void bad_config(const std::string& m) { throw Error(ErrorCode::kBadConfig, m); }

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

std::int64_t env_int(const char* name, const std::string& v, std::int64_t min) {
  char* end = nullptr;
  const long long n = std::strtoll(v.c_str(), &end, 10);
  if (*end != '\0' || n < min) bad_config(std::string(name) + " must be an integer ≥ " + std::to_string(min));
  return n;
}

}  // namespace

TwinConfig TwinConfig::parse(std::string_view text) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    bad_config("config: " + std::string(e.description()));
  }
  TwinConfig c;
  auto server = root["server"];
  c.host = server["host"].value_or(c.host);
  c.port = server["port"].value_or(c.port);
  c.api_token = server["api_token"].value_or(c.api_token);
  if (auto* origins = server["cors_origins"].as_array()) {
    c.cors_origins.clear();
    for (auto& o : *origins)
      if (auto s = o.value<std::string>()) c.cors_origins.push_back(*s);
  }
  c.webhook_token = root["webhook"]["token"].value_or(c.webhook_token);

  auto store = root["store"];
  if (auto dir = store["dir"].value<std::string>()) c.store_dir = *dir;
  if (auto m = store["max_history_jobs"].value<std::int64_t>()) {
    if (*m < 1) bad_config("store.max_history_jobs must be ≥ 1");
    c.max_history_jobs = static_cast<std::size_t>(*m);
  }
  if (auto s = root["refresh"]["interval_seconds"].value<std::int64_t>()) {
    if (*s < 0) bad_config("refresh.interval_seconds must be ≥ 0");
    if (*s > 0) c.refresh_interval = std::chrono::seconds(*s);
  }
  if (auto s = root["alerts"]["interval_seconds"].value<std::int64_t>()) {
    if (*s < 1) bad_config("alerts.interval_seconds must be ≥ 1");
    c.alert_interval = std::chrono::seconds(*s);
  }

  auto at = root["actual_twin"];
  c.actual_twin = at["kind"].value_or(c.actual_twin);
  c.at_base_url = at["base_url"].value_or(c.at_base_url);
  c.at_token = at["token"].value_or(c.at_token);
  if (auto sim = at["simulator_config"].value<std::string>()) c.simulator_config = *sim;
  if (auto* projects = at["projects"].as_array())
    for (auto& p : *projects)
      if (auto id = p.value<std::int64_t>()) c.projects.push_back(*id);

  auto models = root["models"];
  c.models.learning_rate = models["learning_rate"].value_or(c.models.learning_rate);
  c.models.alpha = models["alpha"].value_or(c.models.alpha);
  c.models.feature_window =
      static_cast<std::size_t>(models["feature_window"].value_or<std::int64_t>(static_cast<std::int64_t>(c.models.feature_window)));
  c.models.min_duration_observations = static_cast<std::size_t>(models["min_duration_observations"].value_or<std::int64_t>(
      static_cast<std::int64_t>(c.models.min_duration_observations)));
  c.models.anomaly_sigmas = models["anomaly_sigmas"].value_or(c.models.anomaly_sigmas);

  auto improve = root["improve"];
  c.improve.long_build_seconds = improve["long_build_seconds"].value_or(c.improve.long_build_seconds);
  c.improve.failure_probability = improve["failure_probability"].value_or(c.improve.failure_probability);
  c.improve.flaky_probability = improve["flaky_probability"].value_or(c.improve.flaky_probability);
  if (auto s = improve["cooldown_seconds"].value<std::int64_t>()) c.improve.cooldown = std::chrono::seconds(*s);
  if (auto* kinds = improve["auto_approve"].as_array()) {
    for (auto& k : *kinds) {
      auto kind = action_kind_from_string(k.value_or(std::string{}));
      if (!kind) bad_config("improve.auto_approve: unknown action kind");
      c.improve.auto_approve.insert(*kind);
    }
  }
  return c;
}

TwinConfig TwinConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) bad_config("cannot read config " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto cfg = parse(text);
  // A relative simulator config is relative to the config file.
  if (!cfg.simulator_config.empty() && cfg.simulator_config.is_relative())
    cfg.simulator_config = path.parent_path() / cfg.simulator_config;
  return cfg;
}

void TwinConfig::apply_env() {
  if (auto v = env("CBDT_WEBHOOK_TOKEN")) webhook_token = *v;
  if (auto v = env("CBDT_API_TOKEN")) api_token = *v;
  if (auto v = env("CBDT_AT_BASE_URL")) at_base_url = *v;
  if (auto v = env("CBDT_AT_TOKEN")) at_token = *v;
  if (auto v = env("CBDT_MAX_HISTORY_JOBS"))
    max_history_jobs = static_cast<std::size_t>(env_int("CBDT_MAX_HISTORY_JOBS", *v, 1));
  if (auto v = env("DATA_REFRESH_INTERVAL"))
    refresh_interval = std::chrono::seconds(env_int("DATA_REFRESH_INTERVAL", *v, 1));
}

void TwinConfig::validate() const {
  if (port < 0 || port > 65535) bad_config("server.port must be in [0, 65535]");
  if (actual_twin != "gitlab" && actual_twin != "simulator" && actual_twin != "none")
    bad_config("actual_twin.kind must be gitlab, simulator or none");
  if (actual_twin == "gitlab" && at_base_url.empty())
    bad_config("actual_twin.base_url (or CBDT_AT_BASE_URL) is required for gitlab");
  if (!(models.learning_rate > 0) || !(models.alpha > 0 && models.alpha <= 1))
    bad_config("models.learning_rate must be > 0 and models.alpha in (0, 1]");
  if (models.feature_window < 1) bad_config("models.feature_window must be ≥ 1");
}

Twin::Twin(TwinConfig cfg, const Clock& clock, std::shared_ptr<ActualTwinReader> reader,
           std::shared_ptr<ActualTwinWriter> writer, std::unique_ptr<Storage> store)
    : cfg_(std::move(cfg)), clock_(clock), reader_(std::move(reader)), writer_(std::move(writer)) {
  cfg_.validate();
  StorageOptions sopts{cfg_.max_history_jobs};
  if (store)
    store_ = std::move(store);
  else if (cfg_.store_dir.empty())
    store_ = std::make_unique<MemoryStorage>(sopts);
  else
    store_ = std::make_unique<FileStorage>(cfg_.store_dir, sopts);

  bus_ = std::make_unique<MessageBus>(*store_, clock_);
  ingestor_ = std::make_unique<Ingestor>(*store_, *bus_, clock_);
  if (reader_) webhooks_ = std::make_unique<WebhookReceiver>(*ingestor_, *reader_, cfg_.webhook_token);
  registry_ = std::make_unique<ModelRegistry>(clock_, cfg_.models);
  models_ = std::make_unique<ModelService>(*store_, *registry_, clock_);
  metrics_ = std::make_unique<MetricsService>(*store_, clock_);
  alerts_ = std::make_unique<AlertEngine>(*metrics_, *store_, clock_);
  whatif_ = std::make_unique<WhatIfService>(*store_, *registry_);
  improve_ = std::make_unique<ImprovementService>(*store_, *registry_, clock_, cfg_.improve);

  models_->add_listener([this](const PredictionRecord& r, const BuildJob& job) { improve_->propose(r, job); });
  alerts_->set_sink([this](const AlertRule& rule, const AlertFiring& f) {
    AlertEngine::deliver_default(rule, f);
    improve_->propose(f, rule);
  });

  model_consumer_ = std::make_unique<Consumer>(
      *bus_, std::string(kDataIntegratedTopic), "models",
      [this](const DataIntegratedEvent& e) { models_->on_data_integrated(e); });
  metrics_consumer_ = std::make_unique<Consumer>(
      *bus_, std::string(kDataIntegratedTopic), "metrics",
      [this](const DataIntegratedEvent&) { metrics_->invalidate(); });
}

Twin::~Twin() { stop(); }

WebhookReceiver& Twin::webhooks() {
  if (!webhooks_) throw Error(ErrorCode::kActualTwinUnreachable, "no actual twin configured");
  return *webhooks_;
}

std::vector<ProjectId> Twin::project_ids() {
  if (!cfg_.projects.empty() || !reader_) return cfg_.projects;
  std::vector<ProjectId> out;
  for (const auto& p : ingestor_->with_backoff([&] { return reader_->list_projects(); }))
    out.push_back(p.project_id);
  return out;
}

void Twin::start() {
  model_consumer_->start();
  metrics_consumer_->start();
  alert_task_ = std::make_unique<PeriodicTask>(cfg_.alert_interval, [this] { alerts_->evaluate(clock_.now()); });
  if (cfg_.refresh_interval && reader_) {
    refresh_task_ = std::make_unique<PeriodicTask>(*cfg_.refresh_interval, [this] {
      auto s = ingestor_->refresh(project_ids(), *reader_);
      spdlog::info("scheduled refresh: {}", s.to_json().dump());
    });
  }
}

void Twin::stop() {
  if (refresh_task_) refresh_task_->stop();
  if (alert_task_) alert_task_->stop();
  if (webhooks_) webhooks_->stop();
  if (model_consumer_) model_consumer_->stop();
  if (metrics_consumer_) metrics_consumer_->stop();
}

bool Twin::wait_idle(std::chrono::milliseconds timeout) {
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  auto left = [&] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
  };
  if (webhooks_ && !webhooks_->drain(left())) return false;
  return model_consumer_->wait_idle(left()) && metrics_consumer_->wait_idle(left());
}

void Twin::pump() {
  model_consumer_->pump();
  metrics_consumer_->pump();
}

}  // namespace buildtwin
