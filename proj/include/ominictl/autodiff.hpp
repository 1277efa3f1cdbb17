#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ominictl/tensor.hpp"

namespace omini {

// A named model weight. Gradients accumulate into `grad` during
// Tape::backward only when `trainable` is set.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = false;

  void zero_grad();
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  const Tensor& value() const;
  const Tensor& grad() const;
  const std::vector<std::size_t>& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Define-by-run reverse-mode tape. Nodes are appended in execution order;
// backward replays them in reverse. A tape is single-threaded; independent
// tapes may run concurrently.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);
  Var param(Parameter& p);

  // Appends the output of a forward op. Throws NumericError if `value`
  // holds NaN or +Inf (-Inf is a legal mask value). The closure runs only
  // if some input requires a gradient.
  Var record(Tensor value, std::string_view op, std::initializer_list<Var> inputs,
             Backward backward);
  Var record(Tensor value, std::string_view op, std::span<const Var> inputs,
             Backward backward);

  const Tensor& value(Var v) const { return nodes_[check(v)].val(); }
  const Tensor& grad(Var v) const { return nodes_[check(v)].grad; }
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }

  // Gradient buffer of `v`, zero-initialized on first access.
  Tensor& grad_buffer(Var v);

  // Seeds d(loss)/d(loss) = 1 and replays the tape. Parameter leaves
  // accumulate into Parameter::grad.
  void backward(Var loss);

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
    Parameter* param = nullptr;
    const Tensor* ext = nullptr;  // parameter leaves read the live value
    const Tensor& val() const { return ext != nullptr ? *ext : value; }
  };

  std::size_t check(Var v) const;

  bool record_;
  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. All inputs must live on the same tape.

Var matmul(Var a, Var b);
// x[n,k] * w[k,m] + b[m] (b may be an invalid Var for no bias).
Var linear(Var x, Var w, Var b);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);

// Broadcast a length-cols vector over every row.
Var add_rowvec(Var x, Var v);
Var mul_rowvec(Var x, Var v);
// Multiply row r of x by the constant gates[r].
Var scale_rows(Var x, std::span<const double> gates);

Var silu(Var x);
Var gelu(Var x);

// Softmax over the last dimension. -inf entries are legal mask values; a row
// made only of -inf yields an all-zero row.
Var softmax_lastdim(Var x);
Tensor softmax_lastdim(const Tensor& x);

// Per-row normalization over the last dimension with affine scale/shift.
Var layernorm(Var x, Var scale, Var shift, double eps);
// Normalization without the affine step.
Var layernorm(Var x, double eps);

Var concat_tokens(std::span<const Var> parts);
Var concat_tokens(std::initializer_list<Var> parts);
std::vector<Var> split_tokens(Var x, std::span<const std::size_t> lengths);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var gather_rows(Var x, std::span<const std::size_t> indices);

Var sum(Var x);
Var mean(Var x);
// mean((pred - target)^2) over all elements.
Var mse(Var pred, Var target);

}  // namespace omini
