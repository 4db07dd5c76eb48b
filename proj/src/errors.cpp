#include "buildtwin/errors.hpp"

namespace buildtwin {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kValidation: return "VALIDATION_ERROR";
    case ErrorCode::kStorageUnavailable: return "STORAGE_UNAVAILABLE";
    case ErrorCode::kInvalidQuery: return "INVALID_QUERY";
    case ErrorCode::kNotFound: return "NOT_FOUND";
    case ErrorCode::kBusUnavailable: return "BUS_UNAVAILABLE";
    case ErrorCode::kDuplicateSubscriber: return "DUPLICATE_SUBSCRIBER";
    case ErrorCode::kUnparseableRecord: return "UNPARSEABLE_RECORD";
    case ErrorCode::kActualTwinUnreachable: return "ACTUAL_TWIN_UNREACHABLE";
    case ErrorCode::kRateLimited: return "RATE_LIMITED";
    case ErrorCode::kUnalignedWindow: return "UNALIGNED_WINDOW";
    case ErrorCode::kInvertedRange: return "INVERTED_RANGE";
    case ErrorCode::kSchemaMismatch: return "SCHEMA_MISMATCH";
    case ErrorCode::kMissingActual: return "MISSING_ACTUAL";
    case ErrorCode::kEmptySample: return "EMPTY_SAMPLE";
    case ErrorCode::kUnknownFeature: return "UNKNOWN_FEATURE";
    case ErrorCode::kWriterRejected: return "WRITER_REJECTED";
    case ErrorCode::kIllegalTransition: return "ILLEGAL_TRANSITION";
    case ErrorCode::kInvalidConfig: return "INVALID_CONFIG";
    case ErrorCode::kBadConfig: return "BAD_CONFIG";
    case ErrorCode::kPortInUse: return "PORT_IN_USE";
    case ErrorCode::kUnauthorized: return "UNAUTHORIZED";
    case ErrorCode::kBadRequest: return "BAD_REQUEST";
  }
  return "INTERNAL";
}

int http_status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNotFound: return 404;
    case ErrorCode::kUnauthorized: return 401;
    case ErrorCode::kIllegalTransition:
    case ErrorCode::kDuplicateSubscriber: return 409;
    case ErrorCode::kRateLimited: return 429;
    case ErrorCode::kStorageUnavailable:
    case ErrorCode::kBusUnavailable:
    case ErrorCode::kActualTwinUnreachable: return 503;
    case ErrorCode::kWriterRejected: return 502;
    case ErrorCode::kPortInUse: return 500;
    default: return 400;
  }
}

nlohmann::json Error::envelope() const {
  return {{"code", std::string(error_code_name(code_))},
          {"message", what()},
          {"details", details_.is_null() ? nlohmann::json::object() : details_}};
}

}  // namespace buildtwin
