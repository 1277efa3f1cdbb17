#pragma once

#include <cstddef>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ominictl/autodiff.hpp"
#include "ominictl/random.hpp"
#include "ominictl/sequence.hpp"

namespace omini {

// Module a LoRA adapter binds to inside a block stream. The first six are
// the default adaptation surface; the MLP targets are opt-in.
enum class LoraTarget { WQ, WK, WV, WO, NormScale, NormShift, MlpIn, MlpOut };

std::string_view to_string(LoraTarget t);
// Accepts the binding ids "W_Q", "W_K", "W_V", "W_O", "norm_scale",
// "norm_shift", "mlp_in", "mlp_out". Throws ConfigError otherwise.
LoraTarget parse_lora_target(std::string_view name);
std::set<LoraTarget> default_lora_targets();
bool is_vector_target(LoraTarget t);

// Low-rank delta (alpha / rank) * down * up added to a base weight.
struct LoraAdapter {
  std::string binding;  // unique path, e.g. "single0.joint.W_Q"
  LoraTarget target = LoraTarget::WQ;
  std::size_t rank = 1;
  double alpha = 1.0;
  Parameter down;  // [d_in, rank]
  Parameter up;    // [rank, d_out]
  bool enabled = true;

  std::size_t d_in() const { return down.value.rows(); }
  std::size_t d_out() const { return up.value.cols(); }
  double scale() const { return alpha / static_cast<double>(rank); }
  std::size_t parameter_count() const { return rank * (d_in() + d_out()); }
  // Materialized (alpha / rank) * down * up, [d_in, d_out].
  Tensor delta() const;
  // True when the rank cannot be smaller than a full-rank update.
  bool rank_saturated() const;
};

// Fresh adapter: `down` ~ N(0, 0.02^2), `up` = 0, so it starts as an exact
// no-op. alpha defaults to rank (unit scale).
LoraAdapter make_adapter(std::string binding, LoraTarget target, std::size_t d_in,
                         std::size_t d_out, std::size_t rank, std::optional<double> alpha,
                         Rng& rng);

// Per-token gate: 1 on condition tokens, 0 elsewhere.
struct GatePolicy {
  std::vector<double> gates;

  static GatePolicy from_modalities(std::span<const Modality> tags);
  bool all_zero() const;
};

// out[r] = base[r] + gates[r] * delta[r]; rows with a zero gate are copied
// from `base` untouched.
Var gated_add(Var base, Var delta, std::span<const double> gates);

// x * w + b plus the gated low-rank delta. `down`/`up` may be invalid Vars
// (no adapter); an all-zero gate vector skips the delta path entirely.
Var lora_linear(Var x, Var w, Var b, Var down, Var up, double scale,
                std::span<const double> gates);

// Dense reference: row t = x_t * base_w + gate_t * (alpha/r) * x_t * down * up.
Tensor lora_forward(const Tensor& x, const Tensor& base_w, const LoraAdapter& adapter,
                    const GatePolicy& gates);

}  // namespace omini
