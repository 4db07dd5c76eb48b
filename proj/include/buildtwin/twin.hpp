#pragma once

// Composition root: one store, one bus and every service subscribed to it.

#include "buildtwin/improve.hpp"
#include "buildtwin/ingest.hpp"
#include "buildtwin/metrics.hpp"
#include "buildtwin/models.hpp"
#include "buildtwin/simulator.hpp"
#include "buildtwin/whatif.hpp"

#include <filesystem>

namespace buildtwin {

inline constexpr std::string_view kVersion = "0.1.0";

struct TwinConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  /// Bearer token for mutating endpoints; empty leaves them open.
  std::string api_token;
  std::string webhook_token;
  /// Journal directory; in-memory when empty.
  std::filesystem::path store_dir;
  std::optional<std::size_t> max_history_jobs;
  std::optional<std::chrono::seconds> refresh_interval;
  std::chrono::seconds alert_interval{30};

  /// "gitlab" or "simulator".
  std::string actual_twin = "simulator";
  std::string at_base_url;
  std::string at_token;
  std::vector<ProjectId> projects;
  std::filesystem::path simulator_config;

  ModelOptions models;
  ImproveOptions improve;
  std::vector<std::string> cors_origins{"*"};

  /// Throws Error{kBadConfig}.
  static TwinConfig parse(std::string_view toml_text);
  static TwinConfig load(const std::filesystem::path& path);
  /// CBDT_WEBHOOK_TOKEN, CBDT_MAX_HISTORY_JOBS, CBDT_API_TOKEN, CBDT_AT_BASE_URL,
  /// CBDT_AT_TOKEN and DATA_REFRESH_INTERVAL override file values.
  void apply_env();
  void validate() const;
};

class Twin {
 public:
  /// `reader`/`writer` may be null (no actual twin attached).
  Twin(TwinConfig cfg, const Clock& clock, std::shared_ptr<ActualTwinReader> reader,
       std::shared_ptr<ActualTwinWriter> writer, std::unique_ptr<Storage> store = nullptr);
  ~Twin();

  /// Starts the bus consumers, the alert evaluator and, when configured, the
  /// scheduled refresh.
  void start();
  void stop();

  /// Waits for webhook work and bus consumers to go idle.
  bool wait_idle(std::chrono::milliseconds timeout);
  /// Handles queued bus events on the calling thread (for single-threaded use).
  void pump();

  const TwinConfig& config() const { return cfg_; }
  const Clock& clock() const { return clock_; }
  Storage& store() { return *store_; }
  MessageBus& bus() { return *bus_; }
  Ingestor& ingestor() { return *ingestor_; }
  WebhookReceiver& webhooks();
  ModelRegistry& registry() { return *registry_; }
  ModelService& models() { return *models_; }
  MetricsService& metrics() { return *metrics_; }
  AlertEngine& alerts() { return *alerts_; }
  WhatIfService& whatif() { return *whatif_; }
  ImprovementService& improve() { return *improve_; }
  ActualTwinReader* reader() { return reader_.get(); }
  ActualTwinWriter* writer() { return writer_.get(); }

  /// Projects to backfill/refresh: configured ones, else the platform's list.
  std::vector<ProjectId> project_ids();

 private:
  TwinConfig cfg_;
  const Clock& clock_;
  std::shared_ptr<ActualTwinReader> reader_;
  std::shared_ptr<ActualTwinWriter> writer_;
  std::unique_ptr<Storage> store_;
  std::unique_ptr<MessageBus> bus_;
  std::unique_ptr<Ingestor> ingestor_;
  std::unique_ptr<WebhookReceiver> webhooks_;
  std::unique_ptr<ModelRegistry> registry_;
  std::unique_ptr<ModelService> models_;
  std::unique_ptr<MetricsService> metrics_;
  std::unique_ptr<AlertEngine> alerts_;
  std::unique_ptr<WhatIfService> whatif_;
  std::unique_ptr<ImprovementService> improve_;
  std::unique_ptr<Consumer> model_consumer_;
  std::unique_ptr<Consumer> metrics_consumer_;
  std::unique_ptr<PeriodicTask> refresh_task_;
  std::unique_ptr<PeriodicTask> alert_task_;
};

}  // namespace buildtwin
