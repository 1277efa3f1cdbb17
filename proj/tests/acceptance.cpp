// End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
// Pretrained bases and trained arms are cached so reruns only re-evaluate.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ominictl/checkpoint.hpp"
#include "ominictl/config.hpp"
#include "ominictl/eval.hpp"
#include "support/grad_suite.hpp"

using namespace omini;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

struct Outcome {
  int id = 0;
  bool pass = false;
  std::string detail;
};

// Experiment settings shared by every trained arm.
constexpr std::uint64_t kBaseSeed = 1234;
constexpr std::size_t kBaseSteps = 3000;
constexpr std::size_t kArmSteps = 3000;
constexpr std::size_t kRelocationSteps = 1500;
constexpr std::size_t kEvalN = 200;
const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

struct Arm {
  Model model;
  TrainResult result;
  double seconds = 0.0;
};

class Cache {
 public:
  explicit Cache(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  // Text-only pretraining of the default model on `kind`.
  Arm base(TaskKind kind) {
    const std::string name = "base_" + std::string(to_string(kind));
    TrainConfig tc;
    tc.steps = kBaseSteps;
    tc.seed = kBaseSeed;
    return get(name, [&](TrainResult& r) {
      Model m{ModelConfig{}};
      r = train(m, TaskSpec::make(kind), tc, TrainPhase::Base);
      return m;
    });
  }

  // Adapter training from `base` with config overrides applied by `tweak`.
  Arm arm(const std::string& name, const Model& base, TaskKind kind, std::uint64_t seed,
          std::size_t steps, const std::function<void(ModelConfig&)>& tweak) {
    return get(name, [&](TrainResult& r) {
      ModelConfig mc = base.config();
      tweak(mc);
      Model m = make_arm(base, mc, adapter_seed_for(seed));
      TrainConfig tc;
      tc.steps = steps;
      tc.seed = seed;
      r = train(m, TaskSpec::make(kind), tc, TrainPhase::Adapter);
      return m;
    });
  }

 private:
  Arm get(const std::string& name, const std::function<Model(TrainResult&)>& make) {
    const fs::path ckpt = dir_ / (name + ".odit"), meta = dir_ / (name + ".json");
    if (fs::exists(ckpt) && fs::exists(meta)) {
      std::ifstream in(meta);
      const Json j = Json::parse(in);
      Arm a{load_model(ckpt.string()), {}, j.at("seconds").get<double>()};
      a.result.step_loss = j.at("step_loss").get<std::vector<double>>();
      for (const Json& p : j.at("curve"))
        a.result.curve.push_back({p.at(0).get<std::size_t>(), p.at(1).get<double>()});
      a.result.final_loss = final_window_mean(a.result.step_loss);
      std::cerr << "[cache] " << name << "\n";
      return a;
    }
    std::cerr << "[train] " << name << " ..." << std::flush;
    const auto t0 = Clock::now();
    TrainResult r;
    Model m = make(r);
    const double secs = seconds_since(t0);
    std::cerr << " " << fmt(secs / 60.0, 3) << " min, final loss " << fmt(r.final_loss) << "\n";
    save_checkpoint(ckpt.string(), m);
    Json j;
    j["seconds"] = secs;
    j["final_loss"] = r.final_loss;
    j["step_loss"] = r.step_loss;
    j["curve"] = Json::array();
    for (const LossPoint& p : r.curve) j["curve"].push_back({p.step, p.loss});
    write_file_atomic(meta.string(), j.dump());
    return {std::move(m), std::move(r), secs};
  }

  fs::path dir_;
};

// ---------------------------------------------------------------- exact checks

Outcome gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string where;
  std::size_t checks = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (auto& c : testing::op_cases(seed)) {
      const auto r = testing::check_gradients(c.fn, c.inputs, 0, seed);
      ++checks;
      if (r.max_rel_err > worst) worst = r.max_rel_err, where = c.name;
    }
    const auto r = testing::check_model_gradients(seed);
    ++checks;
    if (r.max_rel_err > worst) worst = r.max_rel_err, where = "model:" + r.worst;
  }
  const double secs = seconds_since(t0);
  return {1, worst < 1e-4 && secs < 60.0,
          std::to_string(checks) + " checks over 20 seeds, max rel err " + fmt(worst, 3) + " (" +
              where + "), " + fmt(secs, 3) + " s"};
}

AttentionWeights random_weights(Rng& rng, std::size_t d, std::size_t heads) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  return {rng.normal_tensor({d, d}, s), rng.normal_tensor({d, d}, s),
          rng.normal_tensor({d, d}, s), rng.normal_tensor({d, d}, s), heads};
}

TokenSequence positioned(Tensor emb, SequenceLayout layout) {
  return assign_positions(TokenSequence::make(std::move(emb), layout), PositionPolicy::aligned());
}

Outcome bias_excision() {
  Rng rng(2);
  bool exact = true;
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t d = 16, text = 2, h = 3, w = 3;
    const auto wts = random_weights(rng, d, 2);
    const auto layout = SequenceLayout::make(text, h, w, true);
    const auto seq = positioned(rng.normal_tensor({layout.total(), d}, 1.0), layout);
    exact = exact && mma(seq, wts, BiasSpec{1.0}).bit_equal(mma(seq, wts, std::nullopt));

    const auto rl = SequenceLayout::make(text, h, w, false);
    Tensor remb({rl.total(), d});
    for (std::size_t i = 0; i < remb.size(); ++i) remb[i] = seq.embeddings[i];
    const Tensor a = mma(seq, wts, BiasSpec{0.0});
    const Tensor b = mma(positioned(remb, rl), wts, std::nullopt);
    for (std::size_t r = text; r < text + h * w; ++r)
      for (std::size_t c = 0; c < d; ++c) worst = std::max(worst, std::abs(a(r, c) - b(r, c)));
  }
  return {2, exact && worst <= 1e-10,
          std::string("gamma 1 bit-exact: ") + (exact ? "yes" : "no") +
              ", gamma 0 vs reduced max diff " + fmt(worst, 3) + " over 100 trials"};
}

struct Inputs {
  Tensor noisy, cond;
  double t = 0.5;
  std::vector<int> text;
};

Inputs random_inputs(const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  Inputs in{rng.normal_tensor({c.image_tokens(), c.d_model}, 1.0),
            rng.normal_tensor({c.image_tokens(), c.d_model}, 1.0), rng.uniform(), {}};
  for (std::size_t k = 0; k < c.text_len; ++k)
    in.text.push_back(static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(c.vocab) - 1)));
  return in;
}

Tensor run(Model& m, const Inputs& in, const Tensor* cond, std::optional<Integration> mode) {
  ForwardRequest req{&in.noisy, in.t, in.text, cond, std::nullopt, mode};
  return forward(m, req);
}

Outcome zero_paths() {
  const ModelConfig c;
  Model adapted(c);
  testing::randomize_adapters(adapted, 4);
  Model fresh(c);
  Model base = fresh;
  base.remove_adapters();
  std::size_t ok_gates = 0, ok_init = 0, ok_none = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Inputs in = random_inputs(c, 1000 + s);
    const Tensor ref = run(base, in, nullptr, Integration::None);
    // No condition tokens: every gate is zero.
    ok_gates += run(adapted, in, nullptr, Integration::None).bit_equal(ref);
    ok_none += run(adapted, in, &in.cond, Integration::None).bit_equal(ref);
    ok_init += run(fresh, in, &in.cond, std::nullopt)
                   .bit_equal(run(base, in, &in.cond, std::nullopt));
  }
  return {3, ok_gates == 100 && ok_init == 100 && ok_none == 100,
          "bit-identical of 100: zero gates " + std::to_string(ok_gates) + ", zero-init " +
              std::to_string(ok_init) + ", integration none " + std::to_string(ok_none)};
}

Outcome rope_properties() {
  Rng rng(5);
  double rel = 0.0, norm = 0.0;
  auto dot = [](const Tensor& q, const Tensor& k, Position2D a, Position2D b) {
    const std::vector<Position2D> pa{a}, pb{b};
    const Tensor rq = rope_rotate(q, pa), rk = rope_rotate(k, pb);
    double s = 0.0;
    for (std::size_t i = 0; i < rq.size(); ++i) s += rq[i] * rk[i];
    return s;
  };
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor q = rng.normal_tensor({1, 1, 16}, 1.0), k = rng.normal_tensor({1, 1, 16}, 1.0);
    const Position2D p1{rng.uniform_int(0, 30), rng.uniform_int(0, 30)};
    const Position2D p2{rng.uniform_int(0, 30), rng.uniform_int(0, 30)};
    const Position2D s{rng.uniform_int(0, 30), rng.uniform_int(0, 30)};
    rel = std::max(rel, std::abs(dot(q, k, p1, p2) -
                                 dot(q, k, {p1.i + s.i, p1.j + s.j}, {p2.i + s.i, p2.j + s.j})));
    const std::vector<Position2D> one{p1};
    const Tensor r = rope_rotate(q, one);
    for (std::size_t i = 0; i < q.size(); i += 2)
      norm = std::max(norm, std::abs(std::hypot(q[i], q[i + 1]) - std::hypot(r[i], r[i + 1])));
  }
  return {4, rel <= 1e-10 && norm <= 1e-12,
          "relative-position max diff " + fmt(rel, 3) + ", pair-norm max diff " + fmt(norm, 3)};
}

// Trainable adapter parameters in closed form: each adapted stream carries
// rank r on the four d x d projections, rank 1 on the four norm vectors, and
// optionally rank r on the two MLP projections.
std::size_t closed_form_lora(const ModelConfig& c) {
  const std::size_t d = c.d_model, r = c.lora_rank, h = d * c.mlp_ratio;
  std::size_t per = 0;
  for (LoraTarget t : c.lora_targets) {
    if (t == LoraTarget::MlpIn) per += r * (d + h);
    else if (t == LoraTarget::MlpOut) per += r * (h + d);
    else if (is_vector_target(t)) per += 2 * (1 + d);  // scale and shift
    else per += r * (d + d);
  }
  const std::size_t streams =
      c.n_dual_blocks + (c.lora_depth == LoraDepth::EarlyOnly ? 0 : c.n_single_blocks);
  return streams * per;
}

Outcome parameter_counts() {
  std::vector<ModelConfig> cfgs(5);
  cfgs[1].lora_rank = 1;
  cfgs[2].lora_rank = 16;
  cfgs[3].lora_depth = LoraDepth::EarlyOnly;
  cfgs[4].lora_targets.insert(LoraTarget::MlpIn);
  cfgs[4].lora_targets.insert(LoraTarget::MlpOut);
  bool exact = true;
  for (const ModelConfig& c : cfgs) exact = exact && count_trainable(Model(c)).lora_params == closed_form_lora(c);
  const ParamCount pc = count_trainable(Model(ModelConfig{}));
  return {5, exact && pc.ratio < 0.02,
          std::string("closed form matches on 5 configs: ") + (exact ? "yes" : "no") +
              ", default " + std::to_string(pc.lora_params) + "/" +
              std::to_string(pc.base_params) + " = " + fmt(100.0 * pc.ratio, 4) + "%"};
}

// ------------------------------------------------------------- trained checks

double eval_metric(Model& m, TaskKind kind, std::optional<double> gamma = std::nullopt) {
  EvalConfig ec;
  ec.n = kEvalN;
  ec.gamma = gamma;
  return *evaluate(m, TaskSpec::make(kind), ec).aggregate;
}

std::string arm_name(const std::string& what, std::uint64_t seed) {
  return what + "_seed" + std::to_string(seed);
}

void unified(ModelConfig& c) {
  c.integration = Integration::UnifiedSequence;
  c.position_mode = PositionMode::Aligned;
}

struct Run {
  Cache& cache;
  std::map<std::string, Arm> arms;

  Arm& get(const std::string& name, const std::function<Arm()>& make) {
    auto it = arms.find(name);
    if (it == arms.end()) it = arms.emplace(name, make()).first;
    return it->second;
  }
  Arm& base(TaskKind kind) {
    return get("base_" + std::string(to_string(kind)), [&] { return cache.base(kind); });
  }
  Arm& edge_arm(const std::string& what, std::uint64_t seed,
                const std::function<void(ModelConfig&)>& tweak, std::size_t steps = kArmSteps) {
    const std::string name = arm_name("edge_" + what, seed);
    return get(name, [&] {
      return cache.arm(name, base(TaskKind::EdgeToImage).model, TaskKind::EdgeToImage, seed,
                       steps, tweak);
    });
  }
  Arm& unified_edge(std::uint64_t seed) { return edge_arm("unified", seed, unified); }
};

Outcome integration_comparison(Run& run) {
  std::size_t wins = 0;
  double slowest = 0.0;
  std::string per;
  for (std::uint64_t s : kSeeds) {
    Arm& u = run.unified_edge(s);
    Arm& f = run.edge_arm("feature_adding", s, [](ModelConfig& c) {
      c.integration = Integration::FeatureAdding;
      c.position_mode = PositionMode::Aligned;
    });
    wins += u.result.final_loss < f.result.final_loss;
    slowest = std::max({slowest, u.seconds, f.seconds});
    per += " " + fmt(u.result.final_loss) + "/" + fmt(f.result.final_loss);
  }
  return {6, wins >= 4 && slowest < 1800.0,
          "unified lower in " + std::to_string(wins) + "/5 seeds (unified/adding:" + per +
              "), slowest arm " + fmt(slowest / 60.0, 3) + " min"};
}

Outcome position_comparison(Run& run) {
  const Model& base = run.base(TaskKind::SubjectRelocation).model;
  std::size_t wins = 0;
  std::string per;
  for (std::uint64_t s : kSeeds) {
    auto make = [&](const std::string& what, PositionMode mode) -> Arm& {
      const std::string name = arm_name("reloc_" + what, s);
      return run.get(name, [&] {
        return run.cache.arm(name, base, TaskKind::SubjectRelocation, s, kRelocationSteps,
                             [mode](ModelConfig& c) {
                               c.integration = Integration::UnifiedSequence;
                               c.position_mode = mode;
                             });
      });
    };
    Arm& shifted = make("shifted", PositionMode::NonAligned);
    Arm& shared = make("shared", PositionMode::Aligned);
    const double target = shared.result.final_loss;
    const std::size_t a = shifted.result.steps_to_reach(target);
    const std::size_t b = shared.result.steps_to_reach(target);
    wins += a < b;
    per += " " + std::to_string(a) + "/" + std::to_string(b);
  }
  return {7, wins >= 4,
          "shifted faster in " + std::to_string(wins) + "/5 seeds (steps shifted/shared:" + per +
              ")"};
}

Model untrained_arm(const Model& base) {
  ModelConfig mc = base.config();
  unified(mc);
  return make_arm(base, mc, adapter_seed_for(kSeeds.front()));
}

Outcome controllability(Run& run) {
  Model& trained = run.unified_edge(kSeeds.front()).model;
  Model fresh = untrained_arm(run.base(TaskKind::EdgeToImage).model);
  const double f1 = eval_metric(trained, TaskKind::EdgeToImage);
  const double f1_0 = eval_metric(fresh, TaskKind::EdgeToImage);

  const Model& cbase = run.base(TaskKind::Colorization).model;
  Arm& color = run.get("color_unified_seed1", [&] {
    return run.cache.arm("color_unified_seed1", cbase, TaskKind::Colorization, kSeeds.front(),
                         kArmSteps, unified);
  });
  Model cfresh = untrained_arm(cbase);
  const double mse = eval_metric(color.model, TaskKind::Colorization);
  const double mse_0 = eval_metric(cfresh, TaskKind::Colorization);
  return {8, f1 >= 0.5 && f1 > f1_0 && mse < 0.25 * mse_0,
          "edge F1 " + fmt(f1) + " (untrained " + fmt(f1_0) + ", need >= 0.5), colorization MSE " +
              fmt(mse) + " vs untrained " + fmt(mse_0) + " (ratio " + fmt(mse / mse_0, 3) + ")"};
}

Outcome dominance(Run& run) {
  const TaskSpec task = TaskSpec::make(TaskKind::EdgeToImage);
  Model& trained = run.unified_edge(kSeeds.front()).model;
  Model fresh = untrained_arm(run.base(TaskKind::EdgeToImage).model);
  const DominanceReport a = attention_dominance(trained, task, 50, 0);
  const DominanceReport b = attention_dominance(fresh, task, 50, 0);
  return {9, a.mean >= 3.0 * b.mean,
          "diag dominance trained " + fmt(a.mean) + " vs untrained " + fmt(b.mean) + " (ratio " +
              fmt(a.mean / b.mean, 3) + ", uniform " + fmt(a.uniform_baseline) + ")"};
}

Outcome gamma_sweep(Run& run) {
  const TaskSpec task = TaskSpec::make(TaskKind::EdgeToImage);
  Model& m = run.unified_edge(kSeeds.front()).model;
  std::vector<double> f1;
  for (double g : {0.0, 0.5, 1.0}) f1.push_back(eval_metric(m, TaskKind::EdgeToImage, g));
  const bool f1_ok = f1[0] <= f1[1] && f1[1] <= f1[2];

  // The first block sees gamma-independent inputs, so its cross mass is an
  // exact function of gamma for a fixed sample.
  bool mass_ok = true;
  for (std::size_t i = 0; i < 20; ++i) {
    double prev = -1.0;
    for (double g : {0.0, 0.25, 0.5, 1.0, 2.0}) {
      const AttentionProbe p = probe_attention(m, task, 0, i, 0.5, BiasSpec{g});
      const double mass = cross_attention_mass(p.maps.front(), p.layout);
      mass_ok = mass_ok && mass >= prev;
      prev = mass;
    }
  }
  return {10, f1_ok && mass_ok,
          "edge F1 at gamma 0/0.5/1: " + fmt(f1[0]) + "/" + fmt(f1[1]) + "/" + fmt(f1[2]) +
              ", cross mass monotone on 20 samples: " + (mass_ok ? "yes" : "no")};
}

Outcome ablations(Run& run) {
  const std::uint64_t s0 = kSeeds.front();
  Arm& r16 = run.edge_arm("rank16", s0, [](ModelConfig& c) { unified(c), c.lora_rank = 16; });
  Arm& r1 = run.edge_arm("rank1", s0, [](ModelConfig& c) { unified(c), c.lora_rank = 1; });
  std::size_t wins = 0;
  std::string per;
  for (std::uint64_t s : kSeeds) {
    Arm& early = run.edge_arm("early_only", s, [](ModelConfig& c) {
      unified(c);
      c.lora_depth = LoraDepth::EarlyOnly;
    });
    const double fe = eval_metric(early.model, TaskKind::EdgeToImage);
    const double ff = eval_metric(run.unified_edge(s).model, TaskKind::EdgeToImage);
    wins += fe < ff;
    per += " " + fmt(fe) + "/" + fmt(ff);
  }
  const bool rank_ok = r16.result.final_loss <= r1.result.final_loss;
  return {11, rank_ok && wins >= 4,
          "final loss rank16 " + fmt(r16.result.final_loss) + " vs rank1 " +
              fmt(r1.result.final_loss) + "; early-only F1 lower in " + std::to_string(wins) +
              "/5 seeds (early/full:" + per + ")"};
}

Outcome checkpoints(Run& state, const fs::path& dir) {
  Model& trained = state.unified_edge(kSeeds.front()).model;
  const fs::path full = dir / "roundtrip.odit", adapters = dir / "roundtrip_adapters.odit";
  save_checkpoint(full.string(), trained);
  save_adapters(adapters.string(), trained);

  auto bytes = [](const CheckpointData& d) {
    std::ostringstream s;
    write_checkpoint(s, d);
    return s.str();
  };
  Model back = load_model(full.string());
  const bool same_bytes = bytes(snapshot(back)) == bytes(snapshot(trained));

  Model fresh = untrained_arm(state.base(TaskKind::EdgeToImage).model);
  attach_adapters(fresh, load_checkpoint(adapters.string()));
  const ModelConfig& c = trained.config();
  std::size_t same_out = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Inputs in = random_inputs(c, 5000 + s);
    const Tensor ref = run(trained, in, &in.cond, std::nullopt);
    same_out += run(back, in, &in.cond, std::nullopt).bit_equal(ref) &&
                run(fresh, in, &in.cond, std::nullopt).bit_equal(ref);
  }
  return {12, same_bytes && same_out == 20,
          std::string("reload byte-identical: ") + (same_bytes ? "yes" : "no") +
              ", reload and adapter reattach match on " + std::to_string(same_out) +
              "/20 inputs"};
}

// The text-only base roughly halves its loss over the first 2000 steps.
std::string base_progress(Run& run) {
  const TrainResult& r = run.base(TaskKind::EdgeToImage).result;
  const double first = r.curve.front().loss;
  double at = first;
  for (const LossPoint& p : r.curve)
    if (p.step == 2000) at = p.loss;
  return "base loss first window " + fmt(first) + ", at step 2000 " + fmt(at) +
         (at <= 0.5 * first ? " (halved)" : " (not halved)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  std::string cache_dir = "acceptance_cache";
  std::vector<int> only;
  bool strict = false;
  app.add_option("--cache", cache_dir, "directory for pretrained bases and trained arms");
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_flag("--strict", strict, "exit nonzero if any criterion fails");
  CLI11_PARSE(app, argc, argv);

  const std::set<int> want(only.begin(), only.end());
  auto wanted = [&](int id) { return want.empty() || want.count(id) > 0; };

  Cache cache{fs::path(cache_dir)};
  Run state{cache, {}};
  const std::vector<std::pair<int, std::function<Outcome()>>> checks{
      {1, gradients},
      {2, bias_excision},
      {3, zero_paths},
      {4, rope_properties},
      {5, parameter_counts},
      {6, [&] { return integration_comparison(state); }},
      {7, [&] { return position_comparison(state); }},
      {8, [&] { return controllability(state); }},
      {9, [&] { return dominance(state); }},
      {10, [&] { return gamma_sweep(state); }},
      {11, [&] { return ablations(state); }},
      {12, [&] { return checkpoints(state, fs::path(cache_dir)); }},
  };

  std::size_t failed = 0;
  for (const auto& [id, check] : checks) {
    if (!wanted(id)) continue;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {id, false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << std::setw(2) << o.id << ": " << (o.pass ? "PASS" : "FAIL")
              << "  " << o.detail << std::endl;
  }
  if (wanted(6)) std::cout << "note: " << base_progress(state) << std::endl;
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " failed")
            << std::endl;
  return strict && failed > 0 ? 1 : 0;
}
