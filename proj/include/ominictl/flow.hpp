#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ominictl/model.hpp"
#include "ominictl/toy_tasks.hpp"

namespace omini {

// Rectified-flow training example: xt = (1 - t) x0 + t x1, v = x1 - x0.
struct FlowSample {
  Tensor x0;
  Tensor x1;
  double t = 0.0;
  Tensor xt;
  Tensor v_target;

  static FlowSample make(Tensor x0, Tensor x1, double t);
  // Throws DimensionError/DomainError if the interpolation invariants fail.
  void validate() const;
};

struct TrainConfig {
  std::size_t steps = 3000;
  std::size_t micro_batch = 1;
  std::size_t accum_steps = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t loss_log_every = 50;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  std::size_t effective_batch() const { return micro_batch * accum_steps; }
  void validate() const;
};

class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, const TrainConfig& cfg);

  // Applies one update from the accumulated Parameter::grad values.
  void step();
  void zero_grad();
  std::size_t step_count() const { return t_; }
  const std::vector<Parameter*>& params() const { return params_; }

  // First and second moments, aligned with params().
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void set_step_count(std::size_t t) { t_ = t; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Tensor> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  std::size_t t_ = 0;
};

// MSE between the predicted and target velocity. Builds on `g`'s tape.
Var flow_loss(Graph& g, Model& model, const FlowSample& sample, std::span<const int> text,
              const Tensor* cond, std::optional<BiasSpec> bias,
              std::optional<Integration> integration = std::nullopt);
double flow_loss(Model& model, const FlowSample& sample, std::span<const int> text,
                 const Tensor* cond, std::optional<BiasSpec> bias);

// Which weights a training run updates.
enum class TrainPhase {
  Base,     // all DiT weights, text-only (integration None)
  Adapter,  // LoRA adapters only, with the configured integration
  Full,     // base and adapters together, with the configured integration
};

struct LossPoint {
  std::size_t step = 0;  // last step of the window (1-based)
  double loss = 0.0;     // window mean
};

struct TrainResult {
  std::vector<double> step_loss;  // mean over the effective batch, per step
  std::vector<LossPoint> curve;
  double final_loss = 0.0;  // mean over the last tenth of the steps

  // First logged step whose window mean is <= target; steps + 1 if never.
  std::size_t steps_to_reach(double target) const;
};

using StepCallback = std::function<void(std::size_t step, double loss)>;

// Deterministic in (model, task, cfg). Throws NumericError on a non-finite
// loss. Trainability flags are set according to `phase`.
TrainResult train(Model& model, const TaskSpec& task, const TrainConfig& cfg, TrainPhase phase,
                  const StepCallback& on_step = {}, AdamW* optimizer = nullptr);

// Mean of the trailing tenth of a per-step loss sequence.
double final_window_mean(std::span<const double> step_loss);

// Copies every DiT weight from `src` into `dst` (architectures must match).
void copy_base_weights(const Model& src, Model& dst);

// Integrates dx/dt = velocity(x, t) from t = 1 to 0 with n_steps Euler steps.
using VelocityFn = std::function<Tensor(const Tensor& x, double t)>;
Tensor euler_integrate(Tensor x1, std::size_t n_steps, const VelocityFn& velocity);

// Noise from `seed`, Euler sampling, then decoding.
Image sample(Model& model, std::span<const int> text, const Tensor* cond,
             std::optional<BiasSpec> bias, std::size_t n_steps, std::uint64_t seed);

struct ArmResult {
  std::string arm;
  std::uint64_t seed = 0;
  TrainResult result;
};

struct SeedVerdict {
  std::uint64_t seed = 0;
  double a = 0.0;  // integration: final losses; position: steps to target
  double b = 0.0;
  bool a_wins = false;
};

struct ComparisonReport {
  std::string mode;  // "integration" or "position"
  std::string arm_a, arm_b;
  std::vector<ArmResult> arms;
  std::vector<SeedVerdict> seeds;
  std::size_t wins = 0;
  std::string verdict;
};

// Trains one adapter arm per (integration, seed) from a shared pretrained
// base. Verdict: "unified_lower", "adding_lower" or "tie".
ComparisonReport compare_integrations(const Model& base, const TaskSpec& task,
                                      const TrainConfig& cfg, std::span<const std::uint64_t> seeds,
                                      const StepCallback& on_step = {});
// Shifted (non-aligned) versus shared (aligned) condition positions on a
// non-aligned task. Verdict: "shifted_faster", "shared_faster" or "tie".
ComparisonReport compare_positions(const Model& base, const TaskSpec& task,
                                   const TrainConfig& cfg, std::span<const std::uint64_t> seeds,
                                   const StepCallback& on_step = {});

// Builds an arm model from `base`: config overrides applied, base weights
// copied, fresh adapters from `adapter_seed`.
Model make_arm(const Model& base, const ModelConfig& cfg, std::uint64_t adapter_seed);

// Adapter seed used for training seed `seed`.
std::uint64_t adapter_seed_for(std::uint64_t seed);

}  // namespace omini
