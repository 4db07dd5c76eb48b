#pragma once

#include "buildtwin/simulator.hpp"

#include <memory>
#include <string>
#include <thread>

namespace buildtwin {

/// Serves a Simulator over the same /api/v4 JSON shapes the GitLab client
/// speaks, on a loopback port.
class SimulatorServer {
 public:
  /// `private_token` empty disables the PRIVATE-TOKEN check.
  SimulatorServer(Simulator& sim, std::string private_token = {});
  ~SimulatorServer();

  /// Binds 127.0.0.1 on `port` (0 picks a free port) and serves in a
  /// background thread. Returns the bound port. Throws Error{kPortInUse}.
  int start(int port = 0);
  void stop();
  std::string base_url() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace buildtwin
