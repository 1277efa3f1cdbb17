#include "ominictl/flow.hpp"

#include <algorithm>
#include <cmath>

#include "ominictl/errors.hpp"
#include "ominictl/random.hpp"

namespace omini {

FlowSample FlowSample::make(Tensor x0, Tensor x1, double t) {
  if (!x0.same_shape(x1)) throw DimensionError("flow sample: x0 and x1 shapes differ");
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("flow sample: t must lie in [0, 1]");
  FlowSample s;
  s.t = t;
  s.xt = Tensor(x0.shape());
  s.v_target = Tensor(x0.shape());
  for (std::size_t i = 0; i < x0.size(); ++i) {
    s.xt[i] = (1.0 - t) * x0[i] + t * x1[i];
    s.v_target[i] = x1[i] - x0[i];
  }
  s.x0 = std::move(x0);
  s.x1 = std::move(x1);
  return s;
}

void FlowSample::validate() const {
  if (!x0.same_shape(x1) || !x0.same_shape(xt) || !x0.same_shape(v_target)) {
    throw DimensionError("flow sample: component shapes differ");
  }
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("flow sample: t must lie in [0, 1]");
  for (std::size_t i = 0; i < x0.size(); ++i) {
    const double tol = 1e-12 * (1.0 + std::abs(x0[i]) + std::abs(x1[i]));
    if (std::abs(xt[i] - ((1.0 - t) * x0[i] + t * x1[i])) > tol ||
        std::abs(v_target[i] - (x1[i] - x0[i])) > tol) {
      throw DomainError("flow sample: interpolant or velocity target inconsistent");
    }
  }
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (micro_batch == 0 || accum_steps == 0) fail("micro_batch and accum_steps must be >= 1");
  if (loss_log_every == 0) fail("loss_log_every must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail("lr must be finite and >= 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    fail("betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
}

AdamW::AdamW(std::vector<Parameter*> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      lr_(cfg.lr),
      wd_(cfg.weight_decay),
      b1_(cfg.beta1),
      b2_(cfg.beta2),
      eps_(cfg.adam_eps) {
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.shape());
    v_.emplace_back(p->value.shape());
  }
}

void AdamW::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Parameter& p = *params_[k];
    if (!p.trainable) continue;
    if (!p.grad.same_shape(p.value)) p.grad = Tensor(p.value.shape());
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = b1_ * m[i] + (1.0 - b1_) * g;
      v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + wd_ * p.value[i];
      p.value[i] -= lr_ * update;
    }
  }
}

Var flow_loss(Graph& g, Model& model, const FlowSample& sample, std::span<const int> text,
              const Tensor* cond, std::optional<BiasSpec> bias,
              std::optional<Integration> integration) {
  ForwardRequest req{&sample.xt, sample.t, text, cond, bias, integration};
  Var pred = forward(g, model, req);
  return mse(pred, g.tape().constant(sample.v_target));
}

double flow_loss(Model& model, const FlowSample& sample, std::span<const int> text,
                 const Tensor* cond, std::optional<BiasSpec> bias) {
  Tape tape(false);
  Graph g(tape);
  return flow_loss(g, model, sample, text, cond, bias).value()[0];
}

std::size_t TrainResult::steps_to_reach(double target) const {
  for (const LossPoint& p : curve)
    if (p.loss <= target) return p.step;
  return step_loss.size() + 1;
}

double final_window_mean(std::span<const double> step_loss) {
  if (step_loss.empty()) return 0.0;
  const std::size_t w = std::max<std::size_t>(1, step_loss.size() / 10);
  double s = 0.0;
  for (std::size_t i = step_loss.size() - w; i < step_loss.size(); ++i) s += step_loss[i];
  return s / static_cast<double>(w);
}

namespace {

constexpr std::uint64_t kNoiseSalt = 0xF10;

void set_phase(Model& model, TrainPhase phase) {
  model.set_base_trainable(phase != TrainPhase::Adapter);
  model.set_adapters_trainable(phase != TrainPhase::Base);
}

std::vector<Parameter*> phase_parameters(Model& model, TrainPhase phase) {
  if (phase == TrainPhase::Base) return model.base_parameters();
  if (phase == TrainPhase::Adapter) return model.adapter_parameters();
  std::vector<Parameter*> ps = model.base_parameters();
  for (Parameter* p : model.adapter_parameters()) ps.push_back(p);
  return ps;
}

}  // namespace

TrainResult train(Model& model, const TaskSpec& task, const TrainConfig& cfg, TrainPhase phase,
                  const StepCallback& on_step, AdamW* optimizer) {
  cfg.validate();
  task.validate();
  const ModelConfig& mc = model.config();
  if (task.image_size != mc.image_size) {
    throw ConfigError("train: task canvas differs from the model image size");
  }
  set_phase(model, phase);
  std::optional<AdamW> own;
  if (optimizer == nullptr) {
    own.emplace(phase_parameters(model, phase), cfg);
    optimizer = &*own;
  }
  const std::optional<Integration> mode =
      phase == TrainPhase::Base ? std::optional(Integration::None) : std::nullopt;
  const bool needs_cond = mode.value_or(mc.integration) != Integration::None;
  const std::size_t batch = cfg.effective_batch();
  const double inv_batch = 1.0 / static_cast<double>(batch);
  const PatchCodec& codec = model.codec();

  TrainResult result;
  result.step_loss.reserve(cfg.steps);
  double window = 0.0;
  std::size_t in_window = 0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    optimizer->zero_grad();
    double step_loss = 0.0;
    // Micro-batches only group samples; every sample has its own tape, so
    // the accumulated gradient is the same for any split of the batch.
    for (std::size_t j = 0; j < batch; ++j) {
      const ToyPair pair = gen_pair(task, cfg.seed, step * batch + j);
      Rng rng(mix_seed({cfg.seed, step, j, kNoiseSalt}));
      const double t = rng.uniform_open();
      Tensor x0 = codec.encode(pair.target);
      Tensor x1 = rng.normal_tensor(x0.shape(), 1.0);
      const FlowSample fs = FlowSample::make(std::move(x0), std::move(x1), t);
      const Tensor cond = needs_cond ? codec.encode(pair.condition) : Tensor();
      Tape tape;
      Graph g(tape);
      Var loss = flow_loss(g, model, fs, pair.text, needs_cond ? &cond : nullptr, std::nullopt,
                           mode);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw NumericError("train: non-finite loss at step " + std::to_string(step + 1));
      }
      step_loss += lv;
      tape.backward(scale(loss, inv_batch));
    }
    optimizer->step();
    step_loss *= inv_batch;
    result.step_loss.push_back(step_loss);
    window += step_loss;
    ++in_window;
    if (in_window == cfg.loss_log_every || step + 1 == cfg.steps) {
      result.curve.push_back({step + 1, window / static_cast<double>(in_window)});
      window = 0.0;
      in_window = 0;
    }
    if (on_step) on_step(step + 1, step_loss);
  }
  result.final_loss = final_window_mean(result.step_loss);
  return result;
}

void copy_base_weights(const Model& src, Model& dst) {
  auto from = src.base_parameters();
  auto to = dst.base_parameters();
  if (from.size() != to.size()) throw ConfigError("copy_base_weights: architectures differ");
  for (std::size_t k = 0; k < from.size(); ++k) {
    if (!from[k]->value.same_shape(to[k]->value)) {
      throw ConfigError("copy_base_weights: shape mismatch at " + from[k]->name);
    }
    to[k]->value = from[k]->value;
  }
  dst.codec() = src.codec();
}

Tensor euler_integrate(Tensor x, std::size_t n_steps, const VelocityFn& velocity) {
  if (n_steps == 0) throw ArgumentError("sample: n_steps must be >= 1");
  const double dt = 1.0 / static_cast<double>(n_steps);
  for (std::size_t i = 0; i < n_steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) * dt;
    const Tensor v = velocity(x, t);
    if (!v.same_shape(x)) throw DimensionError("sample: velocity shape differs from state");
    for (std::size_t k = 0; k < x.size(); ++k) x[k] -= dt * v[k];
  }
  return x;
}

Image sample(Model& model, std::span<const int> text, const Tensor* cond,
             std::optional<BiasSpec> bias, std::size_t n_steps, std::uint64_t seed) {
  const ModelConfig& mc = model.config();
  Rng rng(seed);
  Tensor x1 = rng.normal_tensor({mc.image_tokens(), mc.d_model}, 1.0);
  Tensor x0 = euler_integrate(std::move(x1), n_steps, [&](const Tensor& x, double t) {
    ForwardRequest req{&x, t, text, cond, bias, std::nullopt};
    return forward(model, req);
  });
  Image img = model.codec().decode(x0);
  clamp_unit(img);
  return img;
}

std::uint64_t adapter_seed_for(std::uint64_t seed) { return mix_seed({seed, 0xADA9}); }

Model make_arm(const Model& base, const ModelConfig& cfg, std::uint64_t adapter_seed) {
  Model arm(cfg);
  copy_base_weights(base, arm);
  arm.install_adapters(adapter_seed);
  return arm;
}

namespace {

ComparisonReport run_comparison(const Model& base, const TaskSpec& task, const TrainConfig& cfg,
                                std::span<const std::uint64_t> seeds, const ModelConfig& cfg_a,
                                const ModelConfig& cfg_b, ComparisonReport report,
                                const StepCallback& on_step) {
  const bool by_speed = report.mode == "position";
  for (std::uint64_t seed : seeds) {
    TrainConfig tc = cfg;
    tc.seed = seed;
    Model a = make_arm(base, cfg_a, adapter_seed_for(seed));
    Model b = make_arm(base, cfg_b, adapter_seed_for(seed));
    TrainResult ra = train(a, task, tc, TrainPhase::Adapter, on_step);
    TrainResult rb = train(b, task, tc, TrainPhase::Adapter, on_step);
    SeedVerdict v;
    v.seed = seed;
    if (by_speed) {
      // Both arms race to arm b's final-window loss.
      v.a = static_cast<double>(ra.steps_to_reach(rb.final_loss));
      v.b = static_cast<double>(rb.steps_to_reach(rb.final_loss));
    } else {
      v.a = ra.final_loss;
      v.b = rb.final_loss;
    }
    v.a_wins = v.a < v.b;
    report.wins += v.a_wins ? 1 : 0;
    report.seeds.push_back(v);
    report.arms.push_back({report.arm_a, seed, std::move(ra)});
    report.arms.push_back({report.arm_b, seed, std::move(rb)});
  }
  std::size_t b_wins = 0;
  for (const SeedVerdict& v : report.seeds) b_wins += v.b < v.a ? 1 : 0;
  const bool a_lead = report.wins > b_wins, b_lead = b_wins > report.wins;
  if (by_speed) {
    report.verdict = a_lead ? "shifted_faster" : b_lead ? "shared_faster" : "tie";
  } else {
    report.verdict = a_lead ? "unified_lower" : b_lead ? "adding_lower" : "tie";
  }
  return report;
}

}  // namespace

ComparisonReport compare_integrations(const Model& base, const TaskSpec& task,
                                      const TrainConfig& cfg, std::span<const std::uint64_t> seeds,
                                      const StepCallback& on_step) {
  if (task.alignment != PositionMode::Aligned) {
    throw ConfigError("integration comparison requires an aligned task");
  }
  ModelConfig a = base.config(), b = base.config();
  a.integration = Integration::UnifiedSequence;
  b.integration = Integration::FeatureAdding;
  a.position_mode = b.position_mode = PositionMode::Aligned;
  ComparisonReport r;
  r.mode = "integration";
  r.arm_a = "unified_sequence";
  r.arm_b = "feature_adding";
  return run_comparison(base, task, cfg, seeds, a, b, std::move(r), on_step);
}

ComparisonReport compare_positions(const Model& base, const TaskSpec& task,
                                   const TrainConfig& cfg, std::span<const std::uint64_t> seeds,
                                   const StepCallback& on_step) {
  if (task.alignment != PositionMode::NonAligned) {
    throw ConfigError("position comparison requires a non-aligned task");
  }
  ModelConfig a = base.config(), b = base.config();
  a.integration = b.integration = Integration::UnifiedSequence;
  a.position_mode = PositionMode::NonAligned;
  b.position_mode = PositionMode::Aligned;
  ComparisonReport r;
  r.mode = "position";
  r.arm_a = "shifted";
  r.arm_b = "shared";
  return run_comparison(base, task, cfg, seeds, a, b, std::move(r), on_step);
}

}  // namespace omini
