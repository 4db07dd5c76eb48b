#pragma once

#include <nlohmann/json.hpp>

#include <stdexcept>
#include <string>
#include <string_view>

namespace buildtwin {

enum class ErrorCode {
  kValidation,
  kStorageUnavailable,
  kInvalidQuery,
  kNotFound,
  kBusUnavailable,
  kDuplicateSubscriber,
  kUnparseableRecord,
  kActualTwinUnreachable,
  kRateLimited,
  kUnalignedWindow,
  kInvertedRange,
  kSchemaMismatch,
  kMissingActual,
  kEmptySample,
  kUnknownFeature,
  kWriterRejected,
  kIllegalTransition,
  kInvalidConfig,
  kBadConfig,
  kPortInUse,
  kUnauthorized,
  kBadRequest,
};

/// Upper-snake code used in the API error envelope, e.g. "INVERTED_RANGE".
std::string_view error_code_name(ErrorCode code);
int http_status_for(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message, nlohmann::json details = nullptr)
      : std::runtime_error(message), code_(code), details_(std::move(details)) {}

  ErrorCode code() const noexcept { return code_; }
  const nlohmann::json& details() const noexcept { return details_; }

  /// {code, message, details}
  nlohmann::json envelope() const;

 private:
  ErrorCode code_;
  nlohmann::json details_;
};

}  // namespace buildtwin
