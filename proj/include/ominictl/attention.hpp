#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>

#include "ominictl/autodiff.hpp"
#include "ominictl/rope.hpp"
#include "ominictl/sequence.hpp"

namespace omini {

// Condition strength. gamma = 1 is neutral, gamma = 0 cuts the noisy-image
// <-> condition attention entirely, gamma > 1 strengthens it.
struct BiasSpec {
  double gamma = 1.0;
};

// Dense [n, n] additive attention bias for `layout`: log(gamma) on the
// X->C_I and C_I->X blocks, zero elsewhere, -inf in those blocks for
// gamma = 0. Throws DomainError for gamma < 0.
Tensor build_bias(const BiasSpec& spec, const SequenceLayout& layout);

// Projection weights of one attention layer, each [d, d].
struct AttentionWeights {
  Tensor wq, wk, wv, wo;
  std::size_t heads = 1;

  std::size_t dim() const { return wq.rows(); }
  void validate() const;
};

// Fused multi-head scaled dot-product attention over packed projections
// q, k, v [n, heads*head_dim]. `bias` (optional, [n, n]) is added to every
// head's logits; -inf entries mask. When `probs` is non-null it receives a
// [heads, n, n] copy of the post-softmax probabilities.
Var multi_head_attention(Var q, Var k, Var v, std::size_t heads, const Tensor* bias,
                         Tensor* probs = nullptr);

// Multi-modal attention over a positioned token sequence: project, rotate
// Q and K with RoPE, attend with the optional bias, project out.
Tensor mma(const TokenSequence& seq, const AttentionWeights& weights,
           const std::optional<BiasSpec>& bias);

// Post-softmax probabilities [heads, n, n] of the same computation.
Tensor attention_map(const TokenSequence& seq, const AttentionWeights& weights,
                     const std::optional<BiasSpec>& bias);

// Pre-softmax logits [heads, n, n] (scaled QK^T plus bias).
Tensor attention_logits(const TokenSequence& seq, const AttentionWeights& weights,
                        const std::optional<BiasSpec>& bias);

enum class CrossBlock { ImageToCondition, ConditionToImage };

// Extracts the X->C_I or C_I->X sub-block of one head's map [N, N]. With
// `renormalize`, each row is rescaled to sum to 1 (rows with zero mass stay
// zero).
Tensor cross_block(const Tensor& map, const SequenceLayout& layout, std::size_t head,
                   CrossBlock which, bool renormalize);

// Total probability mass that noisy-image rows place on condition columns,
// summed over heads and rows.
double cross_attention_mass(const Tensor& map, const SequenceLayout& layout);

// Mean over rows of the probability at the aligned column (row r -> col r).
double diag_dominance(const Tensor& block);

// Portable dense-matrix text: a "rows cols" header line, then one line per
// row of space-separated decimals (round-trip precision).
void write_matrix_text(std::ostream& out, const Tensor& m);
Tensor read_matrix_text(std::istream& in);

}  // namespace omini
