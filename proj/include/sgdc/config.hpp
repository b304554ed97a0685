#pragma once

#include <cstdint>
#include <json.hpp>
#include <string>

#include "sgdc/net.hpp"
#include "sgdc/synthdata.hpp"

namespace sgdc {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double lr0 = 1e-4;
  double poly_power = 0.9;
  std::uint64_t seed = 0;
  int eval_every = 1;  // epochs between validation passes; 0 disables
  bool augment = true;
  int max_iters = 0;  // > 0 overrides epochs * iterations_per_epoch

  void validate() const;
};

// One experiment: data, network and optimisation settings. The top-level
// variant / operator / lambda keys set the matching NetConfig fields.
struct RunConfig {
  SynthConfig data;
  NetConfig net;
  TrainConfig train;
  std::string source;  // original JSON text, echoed into checkpoints
};

nlohmann::json to_json(const NetConfig& c);
NetConfig net_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// All sections optional; unknown keys anywhere are a ConfigError.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);
nlohmann::json to_json(const RunConfig& c);

std::string variant_label(const NetConfig& c);

}  // namespace sgdc
