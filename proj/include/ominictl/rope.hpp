#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "ominictl/autodiff.hpp"
#include "ominictl/sequence.hpp"

namespace omini {

enum class PositionMode { Aligned, NonAligned };

// How condition tokens are placed in RoPE index space. Aligned reuses the
// noisy-image grid indices; NonAligned shifts the condition grid by `delta`.
struct PositionPolicy {
  PositionMode mode = PositionMode::Aligned;
  Position2D delta{};

  static PositionPolicy aligned() { return {}; }
  static PositionPolicy non_aligned(Position2D delta) {
    return {PositionMode::NonAligned, delta};
  }
  // Places the condition grid beside the image grid: delta = (0, grid_w).
  static PositionPolicy non_aligned_beside(std::size_t grid_w) {
    return {PositionMode::NonAligned, {0, static_cast<std::int64_t>(grid_w)}};
  }
};

inline constexpr double kRopeBase = 10000.0;

// Positions for every token of `layout`: text at (0,0), noisy image on the
// row-major grid, condition tokens on the grid (Aligned) or grid + delta.
// Throws PolicyError when a NonAligned delta makes the two grids overlap.
std::vector<Position2D> layout_positions(const SequenceLayout& layout,
                                         const PositionPolicy& policy);

TokenSequence assign_positions(TokenSequence seq, const PositionPolicy& policy);

// Precomputed cos/sin per token and dimension pair for a head width.
class RopeTable {
 public:
  RopeTable(std::span<const Position2D> positions, std::size_t head_dim,
            double base = kRopeBase);

  std::size_t tokens() const { return tokens_; }
  std::size_t head_dim() const { return head_dim_; }
  double cos(std::size_t token, std::size_t pair) const { return cos_[token * pairs_ + pair]; }
  double sin(std::size_t token, std::size_t pair) const { return sin_[token * pairs_ + pair]; }

  // Rotates row t of a [tokens, heads*head_dim] buffer in place; `sign`
  // of -1 applies the inverse rotation.
  void rotate_rows(double* data, std::size_t width, double sign) const;

 private:
  std::size_t tokens_;
  std::size_t head_dim_;
  std::size_t pairs_;
  std::vector<double> cos_;
  std::vector<double> sin_;
};

// Angular frequency of within-axis pair k for a head of width head_dim.
double rope_frequency(std::size_t k, std::size_t head_dim, double base = kRopeBase);

// Axial 2D rotation of x[heads, n, head_dim]. The first head_dim/4 pairs
// rotate with the row index i, the rest with the column index j.
Tensor rope_rotate(const Tensor& x, std::span<const Position2D> positions,
                   double base = kRopeBase);

// Differentiable rotation of x[n, heads*head_dim], heads packed along columns.
Var rope(Var x, std::shared_ptr<const RopeTable> table);

}  // namespace omini
