#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ominictl/eval.hpp"
#include "ominictl/flow.hpp"
#include "ominictl/model.hpp"
#include "ominictl/toy_tasks.hpp"

namespace omini {

using Json = nlohmann::ordered_json;

// Everything a CLI run needs. Parsed strictly: unknown keys are rejected.
struct RunConfig {
  ModelConfig model;
  TaskSpec task;
  TrainConfig pretrain;  // base phase; steps = 0 skips it
  TrainConfig train;     // adapter phase
  EvalConfig eval;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};  // comparison arms
  std::optional<double> gamma;
  std::string out = "run";

  RunConfig();
  void validate() const;
};

Json to_json(const ModelConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const EvalConfig& c);
Json to_json(const RunConfig& c);

// Each throws ConfigError naming the offending key.
ModelConfig model_config_from_json(const Json& j);
TrainConfig train_config_from_json(const Json& j);
EvalConfig eval_config_from_json(const Json& j);
RunConfig run_config_from_json(const Json& j);

RunConfig load_run_config(const std::string& path);

// Reports carry per-arm curves and per-seed verdicts; from_json inverts
// to_json exactly.
Json to_json(const ComparisonReport& r);
ComparisonReport comparison_report_from_json(const Json& j);
Json to_json(const EvalReport& r);

// Parses JSON text; syntax errors become ConfigError.
Json parse_json(const std::string& text, const std::string& what);

}  // namespace omini
