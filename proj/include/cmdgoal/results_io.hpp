#pragma once

#include <string>

#include <json.hpp>

#include "cmdgoal/metrics.hpp"

namespace cmdgoal {

struct ResultFiles {
  std::string csv;
  std::string per_intent_csv;  // empty when no row has a breakdown
  std::string json;
};

/// Writes `<prefix>.csv` (one row per method: ADE with CI, MDE, PA_k with
/// CI), `<prefix>_per_intent.csv` (one row per method and intent category)
/// and `<prefix>.json` (the whole report).
ResultFiles write_results(const MetricsReport& report, const std::string& prefix);

nlohmann::json report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);
MetricsReport read_results_json(const std::string& path);

}  // namespace cmdgoal
