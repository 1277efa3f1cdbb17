#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ominictl/flow.hpp"

namespace omini {

struct EvalConfig {
  std::size_t n = 200;
  std::uint64_t seed = 0;  // held-out stream, disjoint from training data
  std::size_t n_steps = 20;
  std::optional<double> gamma;
};

struct EvalReport {
  TaskKind task = TaskKind::EdgeToImage;
  std::string metric;  // "edge_f1", "mse" or "subject_fidelity"
  std::vector<double> per_sample;
  std::optional<double> aggregate;  // mean; empty when n == 0
};

// Index stream for held-out evaluation samples.
std::uint64_t heldout_data_seed(std::uint64_t seed);

std::string metric_name(TaskKind task);

// Samples n held-out conditions and scores the generations against them.
EvalReport evaluate(Model& model, const TaskSpec& task, const EvalConfig& cfg);

// One generation and its score.
struct EvalSample {
  ToyPair pair;
  Image generated;
  double score = 0.0;
};
EvalSample evaluate_one(Model& model, const TaskSpec& task, const EvalConfig& cfg,
                        std::size_t i);

struct DominanceReport {
  double mean = 0.0;          // over samples, blocks and heads
  std::vector<double> per_block;  // mean over samples and heads
  double uniform_baseline = 0.0;  // 1 / N
};

// Diagonal dominance of the row-renormalized X->C_I attention block,
// probed at interpolation time `t` on held-out pairs.
DominanceReport attention_dominance(Model& model, const TaskSpec& task, std::size_t n_samples,
                                    std::uint64_t seed, double t = 0.5);

// Attention probe of one held-out pair at time `t`.
AttentionProbe probe_attention(Model& model, const TaskSpec& task, std::uint64_t seed,
                               std::size_t index, double t, std::optional<BiasSpec> bias);

}  // namespace omini
