#include "ominictl/rope.hpp"

#include <cmath>
#include <cstdlib>
#include <string>

#include "ominictl/errors.hpp"

namespace omini {

namespace {

void check_head_dim(std::size_t head_dim) {
  if (head_dim == 0 || head_dim % 4 != 0) {
    throw ConfigError("rope: head dimension " + std::to_string(head_dim) +
                      " is not divisible by 4");
  }
}

}  // namespace

std::vector<Position2D> layout_positions(const SequenceLayout& layout,
                                         const PositionPolicy& policy) {
  layout.validate();
  Position2D delta{};
  if (policy.mode == PositionMode::NonAligned) {
    delta = policy.delta;
    const bool disjoint = std::llabs(delta.i) >= static_cast<long long>(layout.grid_h) ||
                          std::llabs(delta.j) >= static_cast<long long>(layout.grid_w);
    if (layout.cond > 0 && !disjoint) {
      throw PolicyError("non-aligned offset (" + std::to_string(delta.i) + "," +
                        std::to_string(delta.j) + ") overlaps the image grid");
    }
  }
  std::vector<Position2D> pos;
  pos.reserve(layout.total());
  pos.insert(pos.end(), layout.text, Position2D{0, 0});
  for (int pass = 0; pass < (layout.cond > 0 ? 2 : 1); ++pass) {
    const Position2D shift = pass == 0 ? Position2D{} : delta;
    for (std::size_t i = 0; i < layout.grid_h; ++i)
      for (std::size_t j = 0; j < layout.grid_w; ++j)
        pos.push_back({static_cast<std::int64_t>(i) + shift.i,
                       static_cast<std::int64_t>(j) + shift.j});
  }
  return pos;
}

TokenSequence assign_positions(TokenSequence seq, const PositionPolicy& policy) {
  seq.validate();
  seq.positions = layout_positions(seq.layout, policy);
  return seq;
}

double rope_frequency(std::size_t k, std::size_t head_dim, double base) {
  const double axis_dim = static_cast<double>(head_dim) / 2.0;
  return std::pow(base, -2.0 * static_cast<double>(k) / axis_dim);
}

RopeTable::RopeTable(std::span<const Position2D> positions, std::size_t head_dim, double base)
    : tokens_(positions.size()), head_dim_(head_dim), pairs_(head_dim / 2) {
  check_head_dim(head_dim);
  if (!(base > 1.0)) throw ConfigError("rope: base must exceed 1");
  const std::size_t per_axis = pairs_ / 2;
  cos_.resize(tokens_ * pairs_);
  sin_.resize(tokens_ * pairs_);
  for (std::size_t t = 0; t < tokens_; ++t) {
    for (std::size_t p = 0; p < pairs_; ++p) {
      const bool row_axis = p < per_axis;
      const std::size_t k = row_axis ? p : p - per_axis;
      const double idx = static_cast<double>(row_axis ? positions[t].i : positions[t].j);
      const double angle = idx * rope_frequency(k, head_dim, base);
      cos_[t * pairs_ + p] = std::cos(angle);
      sin_[t * pairs_ + p] = std::sin(angle);
    }
  }
}

void RopeTable::rotate_rows(double* data, std::size_t width, double sign) const {
  const std::size_t heads = width / head_dim_;
  for (std::size_t t = 0; t < tokens_; ++t) {
    double* row = data + t * width;
    const double* c = cos_.data() + t * pairs_;
    const double* s = sin_.data() + t * pairs_;
    for (std::size_t h = 0; h < heads; ++h) {
      double* x = row + h * head_dim_;
      for (std::size_t p = 0; p < pairs_; ++p) {
        const double a = x[2 * p], b = x[2 * p + 1];
        const double sn = sign * s[p];
        x[2 * p] = a * c[p] - b * sn;
        x[2 * p + 1] = a * sn + b * c[p];
      }
    }
  }
}

Tensor rope_rotate(const Tensor& x, std::span<const Position2D> positions, double base) {
  if (x.rank() != 3) {
    throw DimensionError("rope_rotate: expected [heads, n, d_head], got " +
                         shape_string(x.shape()));
  }
  const std::size_t heads = x.shape()[0], n = x.shape()[1], dh = x.shape()[2];
  if (positions.size() != n) throw DimensionError("rope_rotate: one position per token required");
  const RopeTable table(positions, dh, base);
  Tensor out = x;
  for (std::size_t h = 0; h < heads; ++h) {
    // Each head slice is a contiguous [n, dh] block.
    table.rotate_rows(out.data() + h * n * dh, dh, 1.0);
  }
  return out;
}

Var rope(Var x, std::shared_ptr<const RopeTable> table_ptr) {
  Tape& t = *x.tape();
  const RopeTable& table = *table_ptr;
  const std::size_t width = x.cols();
  if (x.value().rank() != 2 || x.rows() != table.tokens() || width % table.head_dim() != 0) {
    throw DimensionError("rope: input " + shape_string(x.shape()) + " does not fit table of " +
                         std::to_string(table.tokens()) + " tokens, head dim " +
                         std::to_string(table.head_dim()));
  }
  Tensor out = x.value();
  table.rotate_rows(out.data(), width, 1.0);
  return t.record(std::move(out), "rope", {x}, [x, table_ptr, width](Tape& tp, const Tensor& g) {
    Tensor back = g;
    table_ptr->rotate_rows(back.data(), width, -1.0);
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < back.size(); ++i) gx[i] += back[i];
  });
}

}  // namespace omini
