#include "ominictl/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "ominictl/errors.hpp"

namespace omini {

namespace {

void require_object(const Json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
}

void reject_unknown(const Json& j, const std::string& where, std::set<std::string> allowed) {
  require_object(j, where);
  for (const auto& [key, value] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

// Unsigned fields must be non-negative integers; nlohmann would wrap -1.
void read_size(const Json& j, const char* key, std::size_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if (!v.is_number_unsigned()) {
    throw ConfigError(where + "." + key + ": expected a non-negative integer");
  }
  out = v.get<std::size_t>();
}

void read_u64(const Json& j, const char* key, std::uint64_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  if (!v.is_number_unsigned()) {
    throw ConfigError(where + "." + key + ": expected a non-negative integer");
  }
  out = v.get<std::uint64_t>();
}

Integration parse_integration(const std::string& s) {
  for (Integration i : {Integration::UnifiedSequence, Integration::FeatureAdding, Integration::None})
    if (to_string(i) == s) return i;
  throw ConfigError("model.integration: unknown value '" + s + "'");
}

PositionMode parse_position_mode(const std::string& s) {
  for (PositionMode m : {PositionMode::Aligned, PositionMode::NonAligned})
    if (to_string(m) == s) return m;
  throw ConfigError("model.position_mode: unknown value '" + s + "'");
}

LoraDepth parse_depth(const std::string& s) {
  for (LoraDepth d : {LoraDepth::Full, LoraDepth::EarlyOnly})
    if (to_string(d) == s) return d;
  throw ConfigError("model.lora_depth: unknown value '" + s + "'");
}

}  // namespace

Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(what + ": invalid JSON (" + e.what() + ")");
  }
}

Json to_json(const ModelConfig& c) {
  Json j;
  j["image_size"] = c.image_size;
  j["channels"] = c.channels;
  j["patch_size"] = c.patch_size;
  j["d_model"] = c.d_model;
  j["n_heads"] = c.n_heads;
  j["n_dual_blocks"] = c.n_dual_blocks;
  j["n_single_blocks"] = c.n_single_blocks;
  j["mlp_ratio"] = c.mlp_ratio;
  j["vocab"] = c.vocab;
  j["text_len"] = c.text_len;
  j["lora_rank"] = c.lora_rank;
  j["lora_alpha"] = c.lora_alpha ? Json(*c.lora_alpha) : Json(nullptr);
  Json targets = Json::array();
  for (LoraTarget t : c.lora_targets) targets.push_back(std::string(to_string(t)));
  j["lora_targets"] = targets;
  j["lora_depth"] = std::string(to_string(c.lora_depth));
  j["integration"] = std::string(to_string(c.integration));
  j["position_mode"] = std::string(to_string(c.position_mode));
  j["position_delta"] = c.position_delta ? Json::array({c.position_delta->i, c.position_delta->j})
                                         : Json(nullptr);
  j["feature_alpha"] = c.feature_alpha;
  j["init_seed"] = c.init_seed;
  j["ln_eps"] = c.ln_eps;
  return j;
}

ModelConfig model_config_from_json(const Json& j) {
  const std::string w = "model";
  reject_unknown(j, w,
                 {"image_size", "channels", "patch_size", "d_model", "n_heads", "n_dual_blocks",
                  "n_single_blocks", "mlp_ratio", "vocab", "text_len", "lora_rank", "lora_alpha",
                  "lora_targets", "lora_depth", "integration", "position_mode", "position_delta",
                  "feature_alpha", "init_seed", "ln_eps"});
  ModelConfig c;
  read_size(j, "image_size", c.image_size, w);
  read_size(j, "channels", c.channels, w);
  read_size(j, "patch_size", c.patch_size, w);
  read_size(j, "d_model", c.d_model, w);
  read_size(j, "n_heads", c.n_heads, w);
  read_size(j, "n_dual_blocks", c.n_dual_blocks, w);
  read_size(j, "n_single_blocks", c.n_single_blocks, w);
  read_size(j, "mlp_ratio", c.mlp_ratio, w);
  read_size(j, "vocab", c.vocab, w);
  read_size(j, "text_len", c.text_len, w);
  read_size(j, "lora_rank", c.lora_rank, w);
  if (j.contains("lora_alpha") && !j.at("lora_alpha").is_null()) {
    double a = 0.0;
    read(j, "lora_alpha", a, w);
    c.lora_alpha = a;
  }
  if (j.contains("lora_targets")) {
    const Json& t = j.at("lora_targets");
    if (!t.is_array()) throw ConfigError("model.lora_targets: expected an array");
    c.lora_targets.clear();
    for (const Json& name : t) {
      if (!name.is_string()) throw ConfigError("model.lora_targets: expected strings");
      c.lora_targets.insert(parse_lora_target(name.get<std::string>()));
    }
  }
  std::string s;
  if (j.contains("lora_depth")) {
    read(j, "lora_depth", s, w);
    c.lora_depth = parse_depth(s);
  }
  if (j.contains("integration")) {
    read(j, "integration", s, w);
    c.integration = parse_integration(s);
  }
  if (j.contains("position_mode")) {
    read(j, "position_mode", s, w);
    c.position_mode = parse_position_mode(s);
  }
  if (j.contains("position_delta") && !j.at("position_delta").is_null()) {
    const Json& d = j.at("position_delta");
    if (!d.is_array() || d.size() != 2 || !d[0].is_number_integer() ||
        !d[1].is_number_integer()) {
      throw ConfigError("model.position_delta: expected [i, j] integers");
    }
    c.position_delta = Position2D{d[0].get<std::int64_t>(), d[1].get<std::int64_t>()};
  }
  read(j, "feature_alpha", c.feature_alpha, w);
  read_u64(j, "init_seed", c.init_seed, w);
  read(j, "ln_eps", c.ln_eps, w);
  c.validate();
  return c;
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["steps"] = c.steps;
  j["micro_batch"] = c.micro_batch;
  j["accum_steps"] = c.accum_steps;
  j["lr"] = c.lr;
  j["seed"] = c.seed;
  j["loss_log_every"] = c.loss_log_every;
  j["weight_decay"] = c.weight_decay;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  return j;
}

namespace {

TrainConfig train_from(const Json& j, const std::string& w, TrainConfig c) {
  reject_unknown(j, w,
                 {"steps", "micro_batch", "accum_steps", "lr", "seed", "loss_log_every",
                  "weight_decay", "beta1", "beta2", "adam_eps"});
  read_size(j, "steps", c.steps, w);
  read_size(j, "micro_batch", c.micro_batch, w);
  read_size(j, "accum_steps", c.accum_steps, w);
  read(j, "lr", c.lr, w);
  read_u64(j, "seed", c.seed, w);
  read_size(j, "loss_log_every", c.loss_log_every, w);
  read(j, "weight_decay", c.weight_decay, w);
  read(j, "beta1", c.beta1, w);
  read(j, "beta2", c.beta2, w);
  read(j, "adam_eps", c.adam_eps, w);
  c.validate();
  return c;
}

}  // namespace

TrainConfig train_config_from_json(const Json& j) { return train_from(j, "train", {}); }

Json to_json(const EvalConfig& c) {
  Json j;
  j["n"] = c.n;
  j["seed"] = c.seed;
  j["n_steps"] = c.n_steps;
  return j;
}

EvalConfig eval_config_from_json(const Json& j) {
  const std::string w = "eval";
  reject_unknown(j, w, {"n", "seed", "n_steps"});
  EvalConfig c;
  read_size(j, "n", c.n, w);
  read_u64(j, "seed", c.seed, w);
  read_size(j, "n_steps", c.n_steps, w);
  if (c.n_steps == 0) throw ConfigError("eval.n_steps must be >= 1");
  return c;
}

RunConfig::RunConfig() { pretrain.steps = 3000; }

void RunConfig::validate() const {
  model.validate();
  task.validate();
  pretrain.validate();
  train.validate();
  if (task.image_size != model.image_size) {
    throw ConfigError("task image size must equal model.image_size");
  }
  if (gamma && !(*gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
  if (out.empty()) throw ConfigError("out must be a non-empty path");
}

Json to_json(const RunConfig& c) {
  Json j;
  j["task"] = std::string(to_string(c.task.kind));
  j["model"] = to_json(c.model);
  j["pretrain"] = to_json(c.pretrain);
  j["train"] = to_json(c.train);
  j["eval"] = to_json(c.eval);
  j["seeds"] = c.seeds;
  j["gamma"] = c.gamma ? Json(*c.gamma) : Json(nullptr);
  j["out"] = c.out;
  return j;
}

RunConfig run_config_from_json(const Json& j) {
  reject_unknown(j, "config", {"task", "model", "pretrain", "train", "eval", "seeds", "gamma", "out"});
  RunConfig c;
  if (j.contains("task")) {
    if (!j.at("task").is_string()) throw ConfigError("config.task: expected a string");
    c.task = TaskSpec::make(parse_task_kind(j.at("task").get<std::string>()));
  }
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  c.task.image_size = c.model.image_size;
  if (j.contains("pretrain")) c.pretrain = train_from(j.at("pretrain"), "pretrain", c.pretrain);
  if (j.contains("train")) c.train = train_from(j.at("train"), "train", c.train);
  if (j.contains("eval")) c.eval = eval_config_from_json(j.at("eval"));
  if (j.contains("seeds")) {
    const Json& s = j.at("seeds");
    if (!s.is_array()) throw ConfigError("config.seeds: expected an array");
    c.seeds.clear();
    for (const Json& v : s) {
      if (!v.is_number_unsigned()) throw ConfigError("config.seeds: expected integers >= 0");
      c.seeds.push_back(v.get<std::uint64_t>());
    }
  }
  if (j.contains("gamma") && !j.at("gamma").is_null()) {
    double g = 0.0;
    read(j, "gamma", g, "config");
    c.gamma = g;
  }
  read(j, "out", c.out, "config");
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from_json(parse_json(ss.str(), path));
}

Json to_json(const ComparisonReport& r) {
  Json j;
  j["mode"] = r.mode;
  j["arm_a"] = r.arm_a;
  j["arm_b"] = r.arm_b;
  Json seeds = Json::array();
  for (const SeedVerdict& v : r.seeds) {
    seeds.push_back({{"seed", v.seed}, {"a", v.a}, {"b", v.b}, {"a_wins", v.a_wins}});
  }
  j["seeds"] = std::move(seeds);
  j["wins"] = r.wins;
  j["verdict"] = r.verdict;
  Json arms = Json::array();
  for (const ArmResult& a : r.arms) {
    Json curve = Json::array();
    for (const LossPoint& p : a.result.curve) curve.push_back({p.step, p.loss});
    arms.push_back({{"arm", a.arm},
                    {"seed", a.seed},
                    {"final_loss", a.result.final_loss},
                    {"step_loss", a.result.step_loss},
                    {"curve", std::move(curve)}});
  }
  j["arms"] = std::move(arms);
  return j;
}

ComparisonReport comparison_report_from_json(const Json& j) {
  try {
    ComparisonReport r;
    r.mode = j.at("mode").get<std::string>();
    r.arm_a = j.at("arm_a").get<std::string>();
    r.arm_b = j.at("arm_b").get<std::string>();
    for (const Json& v : j.at("seeds")) {
      r.seeds.push_back({v.at("seed").get<std::uint64_t>(), v.at("a").get<double>(),
                         v.at("b").get<double>(), v.at("a_wins").get<bool>()});
    }
    r.wins = j.at("wins").get<std::size_t>();
    r.verdict = j.at("verdict").get<std::string>();
    for (const Json& a : j.at("arms")) {
      ArmResult ar;
      ar.arm = a.at("arm").get<std::string>();
      ar.seed = a.at("seed").get<std::uint64_t>();
      ar.result.final_loss = a.at("final_loss").get<double>();
      ar.result.step_loss = a.at("step_loss").get<std::vector<double>>();
      for (const Json& p : a.at("curve")) {
        ar.result.curve.push_back({p.at(0).get<std::size_t>(), p.at(1).get<double>()});
      }
      r.arms.push_back(std::move(ar));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("comparison report: ") + e.what());
  }
}

Json to_json(const EvalReport& r) {
  Json j;
  j["task"] = std::string(to_string(r.task));
  j["metric"] = r.metric;
  j["n"] = r.per_sample.size();
  j["per_sample"] = r.per_sample;
  j["aggregate"] = r.aggregate ? Json(*r.aggregate) : Json(nullptr);
  return j;
}

}  // namespace omini
