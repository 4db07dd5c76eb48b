#pragma once

// Canonical JSON encoding of the domain types: snake_case field names,
// RFC 3339 UTC timestamps, absent optionals omitted. Decoding throws
// Error{kBadRequest} on malformed input.

#include "buildtwin/errors.hpp"
#include "buildtwin/types.hpp"

#include <nlohmann/json.hpp>

namespace buildtwin {

using nlohmann::json;

void to_json(json& j, const BuildJob& v);
void from_json(const json& j, BuildJob& v);

void to_json(json& j, const Project& v);
void from_json(const json& j, Project& v);

void to_json(json& j, const Scope& v);
void from_json(const json& j, Scope& v);

void to_json(json& j, const MetricSnapshot& v);
void from_json(const json& j, MetricSnapshot& v);

void to_json(json& j, const PredictionRecord& v);
void from_json(const json& j, PredictionRecord& v);

void to_json(json& j, const DataIntegratedEvent& v);
void from_json(const json& j, DataIntegratedEvent& v);

void to_json(json& j, const AlertRule& v);
void from_json(const json& j, AlertRule& v);

void to_json(json& j, const AlertFiring& v);

void to_json(json& j, const Scenario& v);
void from_json(const json& j, Scenario& v);

void to_json(json& j, const SensitivityReport& v);

void to_json(json& j, const ImprovementAction& v);
void from_json(const json& j, ImprovementAction& v);

json timestamp_json(Timestamp t);
Timestamp timestamp_from_json(const json& j);

/// Decodes `T` from a json value, converting any library exception into
/// Error{kBadRequest}.
template <typename T>
T decode(const json& j) {
  try {
    return j.get<T>();
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kBadRequest, std::string("malformed JSON: ") + e.what());
  }
}

/// Single-line canonical encoding.
template <typename T>
std::string encode(const T& v) {
  return json(v).dump();
}

}  // namespace buildtwin
