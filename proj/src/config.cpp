#include "sgdc/config.hpp"

#include "sgdc/errors.hpp"
#include "sgdc/json_util.hpp"
#include "sgdc/tnsr.hpp"

namespace sgdc {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(lr0 > 0)) throw ConfigError("train.lr0 must be > 0");
  if (!(poly_power >= 0)) throw ConfigError("train.poly_power must be >= 0");
  if (eval_every < 0) throw ConfigError("train.eval_every must be >= 0");
  if (max_iters < 0) throw ConfigError("train.max_iters must be >= 0");
}

std::string variant_label(const NetConfig& c) {
  SgdcConfig s;
  s.guided = c.guided;
  s.local = c.local;
  s.dynamic = c.dynamic;
  return std::string(variant_name(variant_of(s)));
}

nlohmann::json to_json(const NetConfig& c) {
  return {{"in_ch", c.in_ch},
          {"stage_channels", c.stage_channels},
          {"guide_ch", c.guide_ch},
          {"kernel", c.kernel},
          {"groups", c.groups},
          {"ffn_ratio", c.ffn_ratio},
          {"guided", c.guided},
          {"local", c.local},
          {"dynamic", c.dynamic},
          {"operator", std::string(nn::operator_name(c.op))},
          {"lambda", c.lambda},
          {"no_boundary_supervision", c.no_boundary_supervision}};
}

NetConfig net_config_from_json(const nlohmann::json& j) {
  NetConfig c;
  StrictObject o(j, "net");
  o.get("in_ch", c.in_ch);
  o.get("stage_channels", c.stage_channels);
  o.get("guide_ch", c.guide_ch);
  o.get("kernel", c.kernel);
  o.get("groups", c.groups);
  o.get("ffn_ratio", c.ffn_ratio);
  o.get("guided", c.guided);
  o.get("local", c.local);
  o.get("dynamic", c.dynamic);
  std::string op(nn::operator_name(c.op));
  o.get("operator", op);
  c.op = nn::parse_operator(op);
  o.get("lambda", c.lambda);
  o.get("no_boundary_supervision", c.no_boundary_supervision);
  o.finish();
  c.validate();
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr0", c.lr0},
          {"poly_power", c.poly_power}, {"seed", c.seed}, {"eval_every", c.eval_every},
          {"augment", c.augment}, {"max_iters", c.max_iters}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  StrictObject o(j, "train");
  o.get("epochs", c.epochs);
  o.get("batch_size", c.batch_size);
  o.get("lr0", c.lr0);
  o.get("poly_power", c.poly_power);
  o.get("seed", c.seed);
  o.get("eval_every", c.eval_every);
  o.get("augment", c.augment);
  o.get("max_iters", c.max_iters);
  o.finish();
  c.validate();
  return c;
}

RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig rc;
  rc.source = text;
  StrictObject o(j, "config");
  if (const auto* d = o.sub("data")) rc.data = synth_config_from_json(*d);
  if (const auto* n = o.sub("net")) rc.net = net_config_from_json(*n);
  if (const auto* t = o.sub("train")) rc.train = train_config_from_json(*t);
  std::string variant, op;
  o.get("variant", variant);
  o.get("operator", op);
  o.get("lambda", rc.net.lambda);
  o.finish();
  if (!variant.empty()) rc.net.set_variant(parse_variant(variant));
  if (!op.empty()) rc.net.op = nn::parse_operator(op);
  rc.net.validate();
  if (rc.net.in_ch != rc.data.channels) {
    throw ConfigError("net.in_ch (" + std::to_string(rc.net.in_ch) + ") must match data.channels (" +
                      std::to_string(rc.data.channels) + ")");
  }
  return rc;
}

RunConfig load_run_config(const std::string& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(text);
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"data", to_json(c.data)}, {"net", to_json(c.net)}, {"train", to_json(c.train)}};
}

}  // namespace sgdc
