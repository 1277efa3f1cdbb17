#include "ominictl/lora.hpp"

#include <algorithm>
#include <iostream>

#include "ominictl/errors.hpp"

namespace omini {

std::string_view to_string(LoraTarget t) {
  switch (t) {
    case LoraTarget::WQ: return "W_Q";
    case LoraTarget::WK: return "W_K";
    case LoraTarget::WV: return "W_V";
    case LoraTarget::WO: return "W_O";
    case LoraTarget::NormScale: return "norm_scale";
    case LoraTarget::NormShift: return "norm_shift";
    case LoraTarget::MlpIn: return "mlp_in";
    case LoraTarget::MlpOut: return "mlp_out";
  }
  return "unknown";
}

LoraTarget parse_lora_target(std::string_view name) {
  for (LoraTarget t : {LoraTarget::WQ, LoraTarget::WK, LoraTarget::WV, LoraTarget::WO,
                       LoraTarget::NormScale, LoraTarget::NormShift, LoraTarget::MlpIn,
                       LoraTarget::MlpOut}) {
    if (to_string(t) == name) return t;
  }
  throw ConfigError("unknown LoRA binding '" + std::string(name) + "'");
}

std::set<LoraTarget> default_lora_targets() {
  return {LoraTarget::WQ, LoraTarget::WK, LoraTarget::WV,
          LoraTarget::WO, LoraTarget::NormScale, LoraTarget::NormShift};
}

bool is_vector_target(LoraTarget t) {
  return t == LoraTarget::NormScale || t == LoraTarget::NormShift;
}

Tensor LoraAdapter::delta() const {
  Tensor d = matmul(down.value, up.value);
  const double s = scale();
  for (double& v : d.values()) v *= s;
  return d;
}

bool LoraAdapter::rank_saturated() const { return rank >= std::min(d_in(), d_out()); }

LoraAdapter make_adapter(std::string binding, LoraTarget target, std::size_t d_in,
                         std::size_t d_out, std::size_t rank, std::optional<double> alpha,
                         Rng& rng) {
  if (rank == 0) throw ConfigError("LoRA rank must be >= 1");
  LoraAdapter a;
  a.binding = std::move(binding);
  a.target = target;
  a.rank = rank;
  a.alpha = alpha.value_or(static_cast<double>(rank));
  a.down = Parameter{a.binding + "/down", rng.normal_tensor({d_in, rank}, 0.02), {}, true};
  a.up = Parameter{a.binding + "/up", Tensor({rank, d_out}), {}, true};
  return a;
}

GatePolicy GatePolicy::from_modalities(std::span<const Modality> tags) {
  GatePolicy g;
  g.gates.reserve(tags.size());
  for (Modality m : tags) g.gates.push_back(m == Modality::CondImage ? 1.0 : 0.0);
  return g;
}

bool GatePolicy::all_zero() const {
  return std::all_of(gates.begin(), gates.end(), [](double v) { return v == 0.0; });
}

Var gated_add(Var base, Var delta, std::span<const double> gates) {
  Tape& t = *base.tape();
  if (base.shape() != delta.shape() || gates.size() != base.rows()) {
    throw DimensionError("gated_add: operand shapes or gate count disagree");
  }
  const std::size_t n = base.cols();
  Tensor out = base.value();
  const double* dv = delta.value().data();
  for (std::size_t r = 0; r < gates.size(); ++r) {
    if (gates[r] == 0.0) continue;
    for (std::size_t j = 0; j < n; ++j) out.data()[r * n + j] += gates[r] * dv[r * n + j];
  }
  std::vector<double> g_copy(gates.begin(), gates.end());
  return t.record(std::move(out), "gated_add", {base, delta},
                  [base, delta, n, g_copy = std::move(g_copy)](Tape& tp, const Tensor& g) {
                    if (tp.requires_grad(base)) {
                      Tensor& gb = tp.grad_buffer(base);
                      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                    }
                    if (tp.requires_grad(delta)) {
                      Tensor& gd = tp.grad_buffer(delta);
                      for (std::size_t r = 0; r < g_copy.size(); ++r) {
                        if (g_copy[r] == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j) gd(r, j) += g_copy[r] * g(r, j);
                      }
                    }
                  });
}

Var lora_linear(Var x, Var w, Var b, Var down, Var up, double scale_factor,
                std::span<const double> gates) {
  Var base = linear(x, w, b);
  if (!down.valid() || !up.valid()) return base;
  if (gates.size() != x.rows()) {
    throw DimensionError("lora: " + std::to_string(gates.size()) + " gates for " +
                         std::to_string(x.rows()) + " tokens");
  }
  if (std::all_of(gates.begin(), gates.end(), [](double g) { return g == 0.0; })) return base;
  Var delta = matmul(matmul(x, down), up);
  if (scale_factor != 1.0) delta = scale(delta, scale_factor);
  return gated_add(base, delta, gates);
}

Tensor lora_forward(const Tensor& x, const Tensor& base_w, const LoraAdapter& adapter,
                    const GatePolicy& gates) {
  if (x.rank() != 2 || base_w.rank() != 2 || x.cols() != base_w.rows() ||
      adapter.d_in() != base_w.rows() || adapter.d_out() != base_w.cols()) {
    throw DimensionError("lora_forward: inconsistent shapes");
  }
  if (gates.gates.size() != x.rows()) throw DimensionError("lora_forward: gate count mismatch");
  if (adapter.rank_saturated()) {
    std::clog << "warning: LoRA rank " << adapter.rank << " >= min(" << adapter.d_in() << ", "
              << adapter.d_out() << ") for " << adapter.binding << '\n';
  }
  Tape tape(false);
  Var out = lora_linear(tape.constant(x), tape.constant(base_w), Var{},
                        tape.constant(adapter.down.value), tape.constant(adapter.up.value),
                        adapter.scale(), gates.gates);
  return out.value();
}

}  // namespace omini
