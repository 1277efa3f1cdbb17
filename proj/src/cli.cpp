#include "ominictl/cli.hpp"

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "ominictl/checkpoint.hpp"
#include "ominictl/config.hpp"
#include "ominictl/errors.hpp"
#include "ominictl/eval.hpp"

namespace omini {

namespace {

namespace fs = std::filesystem;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> gamma;
  std::string out;
};

struct ModelSource {
  std::string checkpoint;
  std::string adapters;
  std::string task;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

std::string join(const fs::path& dir, const char* name) { return (dir / name).string(); }

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
  if (c.seed) {
    cfg.train.seed = *c.seed;
    cfg.eval.seed = *c.seed;
  }
  if (c.gamma) cfg.gamma = c.gamma;
  if (!c.out.empty()) cfg.out = c.out;
  cfg.validate();
  return cfg;
}

// Logs window means as they complete; the same lines end up in loss.log.
class LossLog {
 public:
  LossLog(std::ostream& err, std::size_t every) : err_(err), every_(every) {}

  StepCallback watch(const std::string& arm) {
    return [this, arm](std::size_t step, double loss) {
      window_ += loss;
      ++count_;
      if (count_ == every_) {
        err_ << "[" << arm << "] step " << step << " loss " << window_ / count_ << '\n';
        window_ = 0.0;
        count_ = 0;
      }
    };
  }

  void add(const std::string& arm, const TrainResult& r) {
    for (const LossPoint& p : r.curve) {
      text_ << p.step << ' ' << arm << ' ' << std::setprecision(12) << p.loss << '\n';
    }
    window_ = 0.0;
    count_ = 0;
  }

  std::string str() const { return "# step arm loss\n" + text_.str(); }

 private:
  std::ostream& err_;
  std::size_t every_;
  double window_ = 0.0;
  std::size_t count_ = 0;
  std::ostringstream text_;
};

void write_metadata(const fs::path& dir, const std::string& command, const std::string& started) {
  Json meta;
  meta["command"] = command;
  meta["started_utc"] = started;
  meta["finished_utc"] = utc_now();
  write_file_atomic(join(dir, "metadata.json"), dump(meta));
}

Json params_json(const Model& m) {
  const ParamCount pc = count_trainable(m);
  return {{"lora_params", pc.lora_params}, {"base_params", pc.base_params}, {"ratio", pc.ratio}};
}

Model pretrained_base(const RunConfig& cfg, const std::string& base_path, LossLog& log) {
  if (!base_path.empty()) return load_model(base_path);
  Model base(cfg.model);
  if (cfg.pretrain.steps > 0) {
    log.add("base", train(base, cfg.task, cfg.pretrain, TrainPhase::Base, log.watch("base")));
  }
  return base;
}

int cmd_train(const Common& c, const std::string& base_path, std::ostream& out,
              std::ostream& err) {
  const RunConfig cfg = resolve(c);
  const fs::path dir(cfg.out);
  write_file_atomic(join(dir, "resolved_config.json"), dump(to_json(cfg)));
  const std::string started = utc_now();

  LossLog log(err, cfg.train.loss_log_every);
  const Model base = pretrained_base(cfg, base_path, log);
  save_checkpoint(join(dir, "base.odit"), base, nullptr, cfg.task.kind);

  Model arm = make_arm(base, cfg.model, adapter_seed_for(cfg.train.seed));
  AdamW opt(arm.adapter_parameters(), cfg.train);
  const TrainResult r = train(arm, cfg.task, cfg.train, TrainPhase::Adapter,
                              log.watch("adapter"), &opt);
  log.add("adapter", r);
  save_checkpoint(join(dir, "model.odit"), arm, &opt, cfg.task.kind);
  save_adapters(join(dir, "adapters.odit"), arm, cfg.task.kind);
  write_file_atomic(join(dir, "loss.log"), log.str());

  Json summary;
  summary["task"] = std::string(to_string(cfg.task.kind));
  summary["steps"] = cfg.train.steps;
  summary["first_window_loss"] = r.curve.empty() ? Json(nullptr) : Json(r.curve.front().loss);
  summary["final_loss"] = r.final_loss;
  summary["params"] = params_json(arm);
  write_file_atomic(join(dir, "summary.json"), dump(summary));
  write_metadata(dir, "train", started);
  out << dump(summary);
  return kExitOk;
}

struct Loaded {
  Model model;
  TaskSpec task;
};

Loaded load_for_task(const ModelSource& src, const RunConfig* cfg) {
  const CheckpointData d = load_checkpoint(src.checkpoint);
  Model m = model_from_checkpoint(d);
  if (!src.adapters.empty()) attach_adapters(m, load_checkpoint(src.adapters));
  TaskKind kind = d.task.value_or(TaskKind::EdgeToImage);
  if (!src.task.empty()) {
    kind = parse_task_kind(src.task);
  } else if (cfg != nullptr) {
    kind = cfg->task.kind;
  }
  if (d.task && *d.task != kind) {
    throw ConfigError("task '" + std::string(to_string(kind)) + "' does not match checkpoint trained on '" +
                      std::string(to_string(*d.task)) + "'");
  }
  const TaskSpec task = TaskSpec::make(kind, m.config().image_size);
  return {std::move(m), task};
}

EvalConfig eval_settings(const Common& c, std::optional<std::size_t> n,
                         std::optional<std::size_t> steps, std::optional<RunConfig>& cfg) {
  if (!c.config.empty()) cfg = resolve(c);
  EvalConfig e = cfg ? cfg->eval : EvalConfig{};
  if (cfg) e.gamma = cfg->gamma;
  if (c.seed) e.seed = *c.seed;
  if (c.gamma) e.gamma = c.gamma;
  if (n) e.n = *n;
  if (steps) e.n_steps = *steps;
  if (e.n_steps == 0) throw ConfigError("--steps must be >= 1");
  if (e.gamma && !(*e.gamma >= 0.0)) throw ConfigError("--gamma must be >= 0");
  return e;
}

int cmd_eval(const Common& c, const ModelSource& src, std::optional<std::size_t> n,
             std::optional<std::size_t> steps, std::ostream& out) {
  std::optional<RunConfig> cfg;
  const EvalConfig e = eval_settings(c, n, steps, cfg);
  Loaded l = load_for_task(src, cfg ? &*cfg : nullptr);
  Json j = to_json(evaluate(l.model, l.task, e));
  j["seed"] = e.seed;
  j["n_steps"] = e.n_steps;
  j["gamma"] = e.gamma ? Json(*e.gamma) : Json(nullptr);
  if (!c.out.empty()) write_file_atomic(join(c.out, "eval.json"), dump(j));
  out << dump(j);
  return kExitOk;
}

void write_ppm_file(const fs::path& path, const Image& img) {
  std::ostringstream os;
  write_ppm(os, img);
  write_file_atomic(path.string(), os.str());
}

int cmd_sample(const Common& c, const ModelSource& src, std::size_t index,
               std::optional<std::size_t> steps, std::ostream& out) {
  std::optional<RunConfig> cfg;
  const EvalConfig e = eval_settings(c, std::nullopt, steps, cfg);
  Loaded l = load_for_task(src, cfg ? &*cfg : nullptr);
  const EvalSample s = evaluate_one(l.model, l.task, e, index);
  const fs::path dir = c.out.empty() ? fs::path("sample") : fs::path(c.out);
  write_ppm_file(dir / "condition.ppm", s.pair.condition);
  write_ppm_file(dir / "target.ppm", s.pair.target);
  write_ppm_file(dir / "sample.ppm", s.generated);
  Json j;
  j["index"] = index;
  j["seed"] = e.seed;
  j["metric"] = metric_name(l.task.kind);
  j["score"] = s.score;
  j["pair"] = Json::parse(manifest_line(s.pair.metadata));
  write_file_atomic((dir / "sample.json").string(), dump(j));
  out << dump(j);
  return kExitOk;
}

int cmd_compare(const Common& c, const std::string& mode, const std::string& base_path,
                std::optional<std::size_t> steps, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve(c);
  if (c.seed) cfg.seeds = {*c.seed};
  if (steps) cfg.train.steps = *steps;
  cfg.train.validate();
  const PositionMode need = mode == "integration" ? PositionMode::Aligned : PositionMode::NonAligned;
  if (cfg.task.alignment != need) {
    throw ConfigError(mode + " comparison requires " +
                      (need == PositionMode::Aligned ? "an aligned" : "a non-aligned") + " task");
  }
  const fs::path dir(cfg.out);
  write_file_atomic(join(dir, "resolved_config.json"), dump(to_json(cfg)));
  const std::string started = utc_now();

  LossLog base_log(err, cfg.pretrain.loss_log_every);
  const Model base = pretrained_base(cfg, base_path, base_log);
  if (base_path.empty()) {
    save_checkpoint(join(dir, "base.odit"), base, nullptr, cfg.task.kind);
    write_file_atomic(join(dir, "loss_base.log"), base_log.str());
  }
  std::size_t done = 0;
  const StepCallback progress = [&](std::size_t step, double loss) {
    if (step % cfg.train.loss_log_every == 0) {
      err << "[arm " << done / cfg.train.steps + 1 << "/" << 2 * cfg.seeds.size() << "] step "
          << step << " loss " << loss << '\n';
    }
    ++done;
  };
  const ComparisonReport r = mode == "integration"
                                 ? compare_integrations(base, cfg.task, cfg.train, cfg.seeds, progress)
                                 : compare_positions(base, cfg.task, cfg.train, cfg.seeds, progress);
  for (const ArmResult& a : r.arms) {
    LossLog log(err, cfg.train.loss_log_every);
    log.add(a.arm, a.result);
    const std::string name = "loss_" + a.arm + "_seed" + std::to_string(a.seed) + ".log";
    write_file_atomic((dir / name).string(), log.str());
  }
  write_file_atomic(join(dir, "report.json"), dump(to_json(r)));
  Json summary;
  summary["mode"] = r.mode;
  summary["arm_a"] = r.arm_a;
  summary["arm_b"] = r.arm_b;
  summary["wins"] = r.wins;
  summary["seeds"] = r.seeds.size();
  summary["verdict"] = r.verdict;
  write_file_atomic(join(dir, "summary.json"), dump(summary));
  write_metadata(dir, "compare", started);
  out << dump(summary);
  return kExitOk;
}

std::string matrix_text(const Tensor& m) {
  std::ostringstream os;
  write_matrix_text(os, m);
  return os.str();
}

int cmd_inspect(const Common& c, const ModelSource& src, std::size_t index, std::size_t layer,
                std::size_t head, double t, std::ostream& out) {
  std::optional<RunConfig> cfg;
  const EvalConfig e = eval_settings(c, std::nullopt, std::nullopt, cfg);
  Loaded l = load_for_task(src, cfg ? &*cfg : nullptr);
  const ModelConfig& mc = l.model.config();
  if (layer >= mc.n_blocks()) {
    throw ConfigError("--layer " + std::to_string(layer) + " out of range (model has " +
                      std::to_string(mc.n_blocks()) + " blocks)");
  }
  if (head >= mc.n_heads) {
    throw ConfigError("--head " + std::to_string(head) + " out of range (model has " +
                      std::to_string(mc.n_heads) + " heads)");
  }
  if (!(t > 0.0 && t < 1.0)) throw ConfigError("--t must lie in (0, 1)");
  std::optional<BiasSpec> bias;
  if (e.gamma) bias = BiasSpec{*e.gamma};
  const AttentionProbe p = probe_attention(l.model, l.task, e.seed, index, t, bias);
  const Tensor xc = cross_block(p.maps[layer], p.layout, head, CrossBlock::ImageToCondition, true);
  const Tensor cx = cross_block(p.maps[layer], p.layout, head, CrossBlock::ConditionToImage, true);
  const fs::path dir = c.out.empty() ? fs::path("attention") : fs::path(c.out);
  write_file_atomic((dir / "x_to_cond.txt").string(), matrix_text(xc));
  write_file_atomic((dir / "cond_to_x.txt").string(), matrix_text(cx));
  Json j;
  j["layer"] = layer;
  j["head"] = head;
  j["index"] = index;
  j["seed"] = e.seed;
  j["t"] = t;
  j["gamma"] = e.gamma ? Json(*e.gamma) : Json(nullptr);
  j["x_to_cond_dominance"] = diag_dominance(xc);
  j["cond_to_x_dominance"] = diag_dominance(cx);
  j["uniform_baseline"] = 1.0 / static_cast<double>(xc.rows());
  write_file_atomic((dir / "attention.json").string(), dump(j));
  out << dump(j);
  return kExitOk;
}

int cmd_count(const Common& c, const std::string& checkpoint, std::ostream& out) {
  const Model m = checkpoint.empty() ? Model(resolve(c).model) : load_model(checkpoint);
  const Json j = params_json(m);
  if (!c.out.empty()) write_file_atomic(join(c.out, "params.json"), dump(j));
  out << dump(j);
  return kExitOk;
}

void add_common(CLI::App* cmd, Common& c, bool config = true) {
  if (config) cmd->add_option("--config", c.config, "JSON run config");
  cmd->add_option("--seed", c.seed, "Seed override");
  cmd->add_option("--gamma", c.gamma, "Condition strength override");
  cmd->add_option("--out", c.out, "Output directory");
}

void add_source(CLI::App* cmd, ModelSource& s) {
  cmd->add_option("--checkpoint", s.checkpoint, "Full model checkpoint")->required();
  cmd->add_option("--adapters", s.adapters, "Adapter export to attach");
  cmd->add_option("--task", s.task, "edge_to_image, colorization or subject_relocation");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Desk-scale multi-modal DiT with token-gated LoRA conditioning", "ominictl"};
  app.require_subcommand(1);
  Common c;
  ModelSource src;
  std::string base_path, mode, checkpoint;
  std::optional<std::size_t> n, steps;
  std::size_t index = 0, layer = 0, head = 0;
  double t = 0.5;

  auto* train_cmd = app.add_subcommand("train", "Pretrain a base (or load one) and train adapters");
  add_common(train_cmd, c);
  train_cmd->add_option("--base", base_path, "Pretrained base checkpoint to reuse");

  auto* eval_cmd = app.add_subcommand("eval", "Score generations on held-out pairs");
  add_common(eval_cmd, c);
  add_source(eval_cmd, src);
  eval_cmd->add_option("--n", n, "Number of held-out samples");
  eval_cmd->add_option("--steps", steps, "Euler steps");

  auto* sample_cmd = app.add_subcommand("sample", "Generate one held-out sample as PPM files");
  add_common(sample_cmd, c);
  add_source(sample_cmd, src);
  sample_cmd->add_option("--index", index, "Held-out pair index");
  sample_cmd->add_option("--steps", steps, "Euler steps");

  auto* compare_cmd = app.add_subcommand("compare", "Integration or position comparison");
  add_common(compare_cmd, c);
  compare_cmd->add_option("--mode", mode, "integration or position")
      ->required()
      ->check(CLI::IsMember({"integration", "position"}));
  compare_cmd->add_option("--base", base_path, "Pretrained base checkpoint to reuse");
  compare_cmd->add_option("--steps", steps, "Adapter steps per arm");

  auto* inspect_cmd = app.add_subcommand("inspect-attn", "Export cross-attention blocks");
  add_common(inspect_cmd, c);
  add_source(inspect_cmd, src);
  inspect_cmd->add_option("--index", index, "Held-out pair index");
  inspect_cmd->add_option("--layer", layer, "Block index");
  inspect_cmd->add_option("--head", head, "Head index");
  inspect_cmd->add_option("--t", t, "Interpolation time of the probe");

  auto* count_cmd = app.add_subcommand("count-params", "Trainable adapter and base parameter counts");
  add_common(count_cmd, c);
  count_cmd->add_option("--checkpoint", checkpoint, "Count a saved model instead of a config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*train_cmd) return cmd_train(c, base_path, out, err);
    if (*eval_cmd) return cmd_eval(c, src, n, steps, out);
    if (*sample_cmd) return cmd_sample(c, src, index, steps, out);
    if (*compare_cmd) return cmd_compare(c, mode, base_path, steps, out, err);
    if (*inspect_cmd) return cmd_inspect(c, src, index, layer, head, t, out);
    if (*count_cmd) return cmd_count(c, checkpoint, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const PolicyError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace omini
