#pragma once

// Central finite-difference checks for tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ominictl/autodiff.hpp"
#include "ominictl/random.hpp"

namespace omini::testing {

// Builds a scalar loss from leaf Vars created on the given tape.
using LossFn = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheck {
  double max_rel_err = 0.0;
  std::string worst;
};

inline double eval_loss(const LossFn& f, const std::vector<Tensor>& inputs) {
  Tape tape(false);
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, false));
  return f(tape, leaves).value()[0];
}

// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||, floor)
// per input tensor. `probe` limits how many coordinates per input are
// perturbed (0 = all).
inline GradCheck check_gradients(const LossFn& f, std::vector<Tensor> inputs,
                                 std::size_t probe = 0, std::uint64_t probe_seed = 0,
                                 double h = 1e-5) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : inputs) leaves.push_back(tape.leaf(t, true));
  Var loss = f(tape, leaves);
  tape.backward(loss);

  GradCheck out;
  Rng rng(probe_seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = leaves[k].grad().empty() ? Tensor(inputs[k].shape()) : leaves[k].grad();
    std::vector<std::size_t> coords;
    if (probe == 0 || probe >= inputs[k].size()) {
      for (std::size_t i = 0; i < inputs[k].size(); ++i) coords.push_back(i);
    } else {
      for (std::size_t n = 0; n < probe; ++n) {
        coords.push_back(static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(inputs[k].size()) - 1)));
      }
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i : coords) {
      const double orig = inputs[k][i];
      inputs[k][i] = orig + h;
      const double up = eval_loss(f, inputs);
      inputs[k][i] = orig - h;
      const double down = eval_loss(f, inputs);
      inputs[k][i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
    const double rel = std::sqrt(diff) / denom;
    if (rel > out.max_rel_err) {
      out.max_rel_err = rel;
      out.worst = "input " + std::to_string(k);
    }
  }
  return out;
}

// Weighted sum with fixed random weights: turns any output into a scalar
// whose gradient exercises every element.
inline Var random_projection(Tape& tape, Var y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor w = rng.normal_tensor(y.shape(), 1.0);
  return sum(mul(y, tape.constant(std::move(w))));
}

}  // namespace omini::testing
