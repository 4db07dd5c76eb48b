#pragma once

#include "buildtwin/twin.hpp"

#include <memory>

namespace buildtwin {

/// The published OpenAPI document (api/openapi.json), compiled in.
const nlohmann::json& openapi_document();

/// HTTP surface over a Twin. Read endpoints are open; mutating endpoints
/// require "Authorization: Bearer <api_token>" when a token is configured.
/// Webhooks authenticate with X-Gitlab-Token instead.
class ApiServer {
 public:
  explicit ApiServer(Twin& twin);
  ~ApiServer();

  /// Binds cfg.host on `port` (0 picks a free one) and serves on a background
  /// thread. Returns the bound port. Throws Error{kPortInUse}.
  int start(std::optional<int> port = std::nullopt);
  void stop();
  /// Blocks until stop() is called from elsewhere.
  void wait();
  int port() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace buildtwin
