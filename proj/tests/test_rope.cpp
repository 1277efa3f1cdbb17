#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "ominictl/errors.hpp"
#include "ominictl/random.hpp"
#include "ominictl/rope.hpp"

using namespace omini;

namespace {

double dot_rotated(const Tensor& q, const Tensor& k, Position2D pq, Position2D pk) {
  const std::vector<Position2D> a{pq}, b{pk};
  const Tensor rq = rope_rotate(q, a), rk = rope_rotate(k, b);
  double s = 0.0;
  for (std::size_t i = 0; i < rq.size(); ++i) s += rq[i] * rk[i];
  return s;
}

}  // namespace

TEST_CASE("aligned condition reuses the image grid") {
  const auto layout = SequenceLayout::make(1, 2, 2, true);
  const auto pos = layout_positions(layout, PositionPolicy::aligned());
  REQUIRE(pos.size() == 9);
  CHECK(pos[0] == Position2D{0, 0});
  for (std::size_t k = 0; k < 4; ++k) CHECK(pos[1 + k] == pos[5 + k]);
  CHECK(pos[1] == Position2D{0, 0});
  CHECK(pos[2] == Position2D{0, 1});
  CHECK(pos[3] == Position2D{1, 0});
}

TEST_CASE("non-aligned condition is shifted beside the grid") {
  const auto layout = SequenceLayout::make(0, 2, 2, true);
  const auto pos = layout_positions(layout, PositionPolicy::non_aligned({0, 2}));
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(pos[k].j <= 1);
    CHECK(pos[4 + k].j >= 2);
    CHECK(pos[4 + k].j <= 3);
    CHECK(pos[4 + k].i == pos[k].i);
  }
  CHECK(PositionPolicy::non_aligned_beside(2).delta == Position2D{0, 2});
}

TEST_CASE("overlapping shifts are rejected") {
  const auto layout = SequenceLayout::make(0, 2, 2, true);
  CHECK_THROWS_AS(layout_positions(layout, PositionPolicy::non_aligned({0, 0})), PolicyError);
  CHECK_THROWS_AS(layout_positions(layout, PositionPolicy::non_aligned({1, 1})), PolicyError);
  CHECK_NOTHROW(layout_positions(layout, PositionPolicy::non_aligned({2, 1})));
}

TEST_CASE("aligned mode ignores any delta") {
  const auto layout = SequenceLayout::make(0, 2, 2, true);
  PositionPolicy p = PositionPolicy::aligned();
  p.delta = {5, 5};
  const auto pos = layout_positions(layout, p);
  CHECK(pos[4] == Position2D{0, 0});
}

TEST_CASE("assign_positions is idempotent") {
  auto seq = TokenSequence::make(Tensor({9, 8}), SequenceLayout::make(1, 2, 2, true));
  const auto once = assign_positions(seq, PositionPolicy::non_aligned_beside(2));
  const auto twice = assign_positions(once, PositionPolicy::non_aligned_beside(2));
  CHECK(once.positions == twice.positions);
  CHECK(once.positions_assigned());
}

TEST_CASE("position (0,0) is the identity rotation") {
  Rng rng(3);
  const Tensor x = rng.normal_tensor({2, 1, 8}, 1.0);
  const std::vector<Position2D> p{{0, 0}};
  CHECK(rope_rotate(x, p).bit_equal(x));
}

TEST_CASE("row index 1 rotates the first pair by exactly one radian") {
  // d_head = 4: pair 0 carries the row axis with theta_0 = 1, pair 1 the column axis.
  const Tensor x({1, 1, 4}, std::vector<double>{1.0, 0.0, 1.0, 0.0});
  const std::vector<Position2D> p{{1, 0}};
  const Tensor r = rope_rotate(x, p);
  CHECK(r[0] == std::cos(1.0));
  CHECK(r[1] == std::sin(1.0));
  CHECK(r[2] == 1.0);
  CHECK(r[3] == 0.0);
  CHECK(rope_frequency(0, 4) == 1.0);
}

TEST_CASE("frequencies restart on each axis") {
  CHECK(rope_frequency(1, 16) == doctest::Approx(std::pow(10000.0, -2.0 / 8.0)));
  const Tensor x({1, 1, 16}, std::vector<double>(16, 1.0));
  const std::vector<Position2D> row{{2, 0}}, col{{0, 2}};
  const Tensor a = rope_rotate(x, row), b = rope_rotate(x, col);
  // The column rotation mirrors the row rotation, shifted by four pairs.
  for (std::size_t k = 0; k < 8; ++k) CHECK(a[k] == b[8 + k]);
}

TEST_CASE("rotations preserve every pair norm") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = rng.normal_tensor({2, 3, 8}, 2.0);
    std::vector<Position2D> p;
    for (int t = 0; t < 3; ++t) p.push_back({rng.uniform_int(0, 40), rng.uniform_int(0, 40)});
    const Tensor r = rope_rotate(x, p);
    for (std::size_t i = 0; i < x.size(); i += 2) {
      const double n0 = std::hypot(x[i], x[i + 1]), n1 = std::hypot(r[i], r[i + 1]);
      CHECK(std::abs(n0 - n1) <= 1e-12);
    }
  }
}

TEST_CASE("dot products depend only on relative position") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor q = rng.normal_tensor({1, 1, 16}, 1.0), k = rng.normal_tensor({1, 1, 16}, 1.0);
    const Position2D p1{rng.uniform_int(0, 30), rng.uniform_int(0, 30)};
    const Position2D p2{rng.uniform_int(0, 30), rng.uniform_int(0, 30)};
    const Position2D s{rng.uniform_int(0, 30), rng.uniform_int(0, 30)};
    const double a = dot_rotated(q, k, p1, p2);
    const double b = dot_rotated(q, k, {p1.i + s.i, p1.j + s.j}, {p2.i + s.i, p2.j + s.j});
    CHECK(std::abs(a - b) <= 1e-10);
  }
}

TEST_CASE("invalid head widths and bases are config errors") {
  const std::vector<Position2D> p{{0, 0}};
  CHECK_THROWS_AS(rope_rotate(Tensor({1, 1, 6}), p), ConfigError);
  CHECK_THROWS_AS(RopeTable(p, 8, 1.0), ConfigError);
}

TEST_CASE("differentiable rope matches the tensor version") {
  Rng rng(9);
  const std::vector<Position2D> p{{0, 0}, {1, 3}, {2, 2}};
  const Tensor x = rng.normal_tensor({3, 16}, 1.0);  // two heads of width 8
  Tape tape(false);
  const Tensor y = rope(tape.constant(x), std::make_shared<const RopeTable>(p, 8)).value();
  Tensor packed({2, 3, 8});
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t c = 0; c < 8; ++c) packed[(h * 3 + t) * 8 + c] = x(t, h * 8 + c);
  const Tensor ref = rope_rotate(packed, p);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t c = 0; c < 8; ++c) CHECK(y(t, h * 8 + c) == ref[(h * 3 + t) * 8 + c]);
}
