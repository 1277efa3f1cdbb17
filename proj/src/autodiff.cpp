#include "ominictl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "ominictl/errors.hpp"

namespace omini {

void Parameter::zero_grad() {
  if (grad.same_shape(value)) {
    grad.fill(0.0);
  } else {
    grad = Tensor(value.shape());
  }
}

const Tensor& Var::value() const { return tape_->value(*this); }
const Tensor& Var::grad() const { return tape_->grad(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

std::size_t Tape::check(Var v) const {
  if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size()) {
    throw ArgumentError("variable does not belong to this tape");
  }
  return static_cast<std::size_t>(v.id_);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), {}, false, {}, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), {}, record_ && requires_grad, {}, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(Parameter& p) {
  // Parameter leaves alias the live value; weights must not change while the
  // tape is in use.
  nodes_.push_back(Node{{}, {}, record_ && p.trainable, {}, &p, &p.value});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::string_view op, std::initializer_list<Var> inputs,
                 Backward backward) {
  return record(std::move(value), op, std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

namespace {

// -Inf is a legal attention-mask value; NaN and +Inf are not.
bool has_nan_or_pos_inf(const Tensor& t) {
  for (double v : t.values())
    if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) return true;
  return false;
}

}  // namespace

Var Tape::record(Tensor value, std::string_view op, std::span<const Var> inputs,
                 Backward backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    if (!in.valid()) continue;
    needs = needs || requires_grad(in);
  }
  if (!value.all_finite() && has_nan_or_pos_inf(value)) {
    throw NumericError(std::string(op) + ": NaN or +Inf in forward output");
  }
  needs = needs && record_;
  nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(backward) : Backward{},
                        nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_[check(v)];
  if (n.grad.empty() && !n.val().empty()) n.grad = Tensor(n.val().shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  const std::size_t root = check(loss);
  if (nodes_[root].val().size() != 1) {
    throw DimensionError("backward: loss must be a scalar, got " +
                         shape_string(nodes_[root].val().shape()));
  }
  if (!nodes_[root].requires_grad) return;
  grad_buffer(loss).fill(1.0);
  for (std::size_t i = root + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (n.param == nullptr || !n.requires_grad || n.grad.empty()) continue;
    Parameter& p = *n.param;
    if (!p.grad.same_shape(p.value)) p.grad = Tensor(p.value.shape());
    for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.grad[k];
  }
}

// ---------------------------------------------------------------------------

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw ArgumentError("operation on an empty variable");
  return *a.tape();
}

void require_same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw ArgumentError("variables live on different tapes");
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_matrix(const char* op, Var a) {
  if (a.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": rank-2 tensor required, got " +
                         shape_string(a.shape()));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a);
  require_same_tape(a, b);
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner extents differ " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor out({m, n});
  kernels::gemm_nn(m, k, n, a.value().data(), b.value().data(), out.data(), false);
  return t.record(std::move(out), "matmul", {a, b}, [a, b, m, k, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      kernels::gemm_nt(m, n, k, g.data(), b.value().data(), tp.grad_buffer(a).data(), true);
    }
    if (tp.requires_grad(b)) {
      kernels::gemm_tn(m, k, n, a.value().data(), g.data(), tp.grad_buffer(b).data(), true);
    }
  });
}

Var linear(Var x, Var w, Var b) {
  Tape& t = tape_of(x);
  require_same_tape(x, w);
  require_matrix("linear", x);
  require_matrix("linear", w);
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  if (w.rows() != k) {
    throw DimensionError("linear: " + shape_string(x.shape()) + " x " +
                         shape_string(w.shape()));
  }
  const bool has_bias = b.valid();
  if (has_bias) {
    require_same_tape(x, b);
    if (b.value().size() != n) throw DimensionError("linear: bias length mismatch");
  }
  Tensor out({m, n});
  if (has_bias) {
    const double* bv = b.value().data();
    for (std::size_t i = 0; i < m; ++i) std::copy(bv, bv + n, out.data() + i * n);
  }
  kernels::gemm_nn(m, k, n, x.value().data(), w.value().data(), out.data(), has_bias);
  return t.record(std::move(out), "linear", {x, w, b},
                  [x, w, b, has_bias, m, k, n](Tape& tp, const Tensor& g) {
                    if (tp.requires_grad(x)) {
                      kernels::gemm_nt(m, n, k, g.data(), w.value().data(),
                                       tp.grad_buffer(x).data(), true);
                    }
                    if (tp.requires_grad(w)) {
                      kernels::gemm_tn(m, k, n, x.value().data(), g.data(),
                                       tp.grad_buffer(w).data(), true);
                    }
                    if (has_bias && tp.requires_grad(b)) {
                      Tensor& gb = tp.grad_buffer(b);
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < n; ++j) gb[j] += g(i, j);
                    }
                  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a);
  require_same_tape(a, b);
  require_same_shape("add", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return t.record(std::move(out), "add", {a, b}, [a, b](Tape& tp, const Tensor& g) {
    for (Var v : {a, b}) {
      if (!tp.requires_grad(v)) continue;
      Tensor& gv = tp.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a);
  require_same_tape(a, b);
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.record(std::move(out), "sub", {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a);
  require_same_tape(a, b);
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record(std::move(out), "mul", {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_buffer(a);
      const Tensor& bv = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_buffer(b);
      const Tensor& av = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return t.record(std::move(out), "scale", {a}, [a, s](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_scalar(Var a, double s) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (double& v : out.values()) v += s;
  return t.record(std::move(out), "add_scalar", {a}, [a](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad_buffer(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var add_rowvec(Var x, Var v) {
  Tape& t = tape_of(x);
  require_same_tape(x, v);
  const std::size_t n = x.cols(), rows = x.rows();
  if (v.value().size() != n) {
    throw DimensionError("add_rowvec: vector of " + std::to_string(v.value().size()) +
                         " for width " + std::to_string(n));
  }
  Tensor out = x.value();
  const double* vv = v.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out(r, j) += vv[j];
  return t.record(std::move(out), "add_rowvec", {x, v},
                  [x, v, n, rows](Tape& tp, const Tensor& g) {
                    if (tp.requires_grad(x)) {
                      Tensor& gx = tp.grad_buffer(x);
                      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                    }
                    if (tp.requires_grad(v)) {
                      Tensor& gv = tp.grad_buffer(v);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < n; ++j) gv[j] += g(r, j);
                    }
                  });
}

Var mul_rowvec(Var x, Var v) {
  Tape& t = tape_of(x);
  require_same_tape(x, v);
  const std::size_t n = x.cols(), rows = x.rows();
  if (v.value().size() != n) {
    throw DimensionError("mul_rowvec: vector of " + std::to_string(v.value().size()) +
                         " for width " + std::to_string(n));
  }
  Tensor out = x.value();
  const double* vv = v.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out(r, j) *= vv[j];
  return t.record(std::move(out), "mul_rowvec", {x, v},
                  [x, v, n, rows](Tape& tp, const Tensor& g) {
                    const Tensor& xv = x.value();
                    const Tensor& vv = v.value();
                    if (tp.requires_grad(x)) {
                      Tensor& gx = tp.grad_buffer(x);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < n; ++j) gx(r, j) += g(r, j) * vv[j];
                    }
                    if (tp.requires_grad(v)) {
                      Tensor& gv = tp.grad_buffer(v);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < n; ++j) gv[j] += g(r, j) * xv(r, j);
                    }
                  });
}

Var scale_rows(Var x, std::span<const double> gates) {
  Tape& t = tape_of(x);
  const std::size_t n = x.cols(), rows = x.rows();
  if (gates.size() != rows) {
    throw DimensionError("scale_rows: " + std::to_string(gates.size()) + " gates for " +
                         std::to_string(rows) + " rows");
  }
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out(r, j) *= gates[r];
  std::vector<double> g_copy(gates.begin(), gates.end());
  return t.record(std::move(out), "scale_rows", {x},
                  [x, n, rows, g_copy = std::move(g_copy)](Tape& tp, const Tensor& g) {
                    Tensor& gx = tp.grad_buffer(x);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < n; ++j) gx(r, j) += g(r, j) * g_copy[r];
                  });
}

Var silu(Var x) {
  Tape& t = tape_of(x);
  Tensor out = x.value();
  for (double& v : out.values()) v = v / (1.0 + std::exp(-v));
  return t.record(std::move(out), "silu", {x}, [x](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xv[i]));
      gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
    }
  });
}

Var gelu(Var x) {
  constexpr double kC = 0.044715;
  const double k = std::sqrt(2.0 / std::numbers::pi);
  Tape& t = tape_of(x);
  Tensor out = x.value();
  for (double& v : out.values()) v = 0.5 * v * (1.0 + std::tanh(k * (v + kC * v * v * v)));
  return t.record(std::move(out), "gelu", {x}, [x, k](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double th = std::tanh(k * (v + kC * v * v * v));
      const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * k * (1.0 + 3.0 * kC * v * v);
      gx[i] += g[i] * d;
    }
  });
}

Tensor softmax_lastdim(const Tensor& x) {
  Tensor out(x.shape());
  const std::size_t n = x.cols(), rows = x.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto in = x.row(r);
    auto o = out.row(r);
    const double m = n == 0 ? -std::numeric_limits<double>::infinity()
                            : *std::max_element(in.begin(), in.end());
    if (m == -std::numeric_limits<double>::infinity()) continue;  // fully masked
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - m);
      s += o[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
  }
  return out;
}

Var softmax_lastdim(Var x) {
  Tape& t = tape_of(x);
  Tensor out = softmax_lastdim(x.value());
  const std::size_t n = x.cols(), rows = x.rows();
  return t.record(Tensor(out), "softmax_lastdim", {x},
                  [x, yv = std::move(out), n, rows](Tape& tp, const Tensor& g) {
                    Tensor& gx = tp.grad_buffer(x);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double s = 0.0;
                      for (std::size_t j = 0; j < n; ++j) s += g(r, j) * yv(r, j);
                      for (std::size_t j = 0; j < n; ++j) gx(r, j) += yv(r, j) * (g(r, j) - s);
                    }
                  });
}

namespace {

struct NormStats {
  Tensor xhat;
  std::vector<double> rstd;
};

NormStats normalize_rows(const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw DomainError("layernorm: eps must be positive");
  const std::size_t n = x.cols(), rows = x.rows();
  NormStats st{Tensor(x.shape()), std::vector<double>(rows)};
  for (std::size_t r = 0; r < rows; ++r) {
    const auto in = x.row(r);
    double mu = 0.0;
    for (double v : in) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : in) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    st.rstd[r] = rs;
    auto o = st.xhat.row(r);
    for (std::size_t j = 0; j < n; ++j) o[j] = (in[j] - mu) * rs;
  }
  return st;
}

// dL/dx given dL/dxhat for a normalized row.
void normalize_backward(const Tensor& xhat, const std::vector<double>& rstd,
                        const Tensor& gxhat, Tensor& gx) {
  const std::size_t n = xhat.cols(), rows = xhat.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < rows; ++r) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      m1 += gxhat(r, j);
      m2 += gxhat(r, j) * xhat(r, j);
    }
    m1 *= inv_n;
    m2 *= inv_n;
    for (std::size_t j = 0; j < n; ++j)
      gx(r, j) += rstd[r] * (gxhat(r, j) - m1 - xhat(r, j) * m2);
  }
}

}  // namespace

Var layernorm(Var x, Var scale_v, Var shift_v, double eps) {
  Tape& t = tape_of(x);
  require_same_tape(x, scale_v);
  require_same_tape(x, shift_v);
  const std::size_t n = x.cols(), rows = x.rows();
  if (scale_v.value().size() != n || shift_v.value().size() != n) {
    throw DimensionError("layernorm: affine parameters must have length " + std::to_string(n));
  }
  NormStats st = normalize_rows(x.value(), eps);
  Tensor out(x.shape());
  const double* s = scale_v.value().data();
  const double* b = shift_v.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out(r, j) = st.xhat(r, j) * s[j] + b[j];
  return t.record(std::move(out), "layernorm", {x, scale_v, shift_v},
                  [x, scale_v, shift_v, n, rows, st = std::move(st)](Tape& tp, const Tensor& g) {
                    const double* s = scale_v.value().data();
                    if (tp.requires_grad(x)) {
                      Tensor gxhat(g.shape());
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < n; ++j) gxhat(r, j) = g(r, j) * s[j];
                      normalize_backward(st.xhat, st.rstd, gxhat, tp.grad_buffer(x));
                    }
                    if (tp.requires_grad(scale_v)) {
                      Tensor& gs = tp.grad_buffer(scale_v);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < n; ++j) gs[j] += g(r, j) * st.xhat(r, j);
                    }
                    if (tp.requires_grad(shift_v)) {
                      Tensor& gb = tp.grad_buffer(shift_v);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < n; ++j) gb[j] += g(r, j);
                    }
                  });
}

Var layernorm(Var x, double eps) {
  Tape& t = tape_of(x);
  NormStats st = normalize_rows(x.value(), eps);
  Tensor out = st.xhat;
  return t.record(std::move(out), "layernorm", {x},
                  [x, st = std::move(st)](Tape& tp, const Tensor& g) {
                    normalize_backward(st.xhat, st.rstd, g, tp.grad_buffer(x));
                  });
}

Var concat_tokens(std::initializer_list<Var> parts) {
  return concat_tokens(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_tokens(std::span<const Var> parts) {
  if (parts.empty()) throw ArgumentError("concat_tokens: no parts");
  Tape& t = tape_of(parts.front());
  const std::size_t d = parts.front().cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p);
    require_matrix("concat_tokens", p);
    if (p.cols() != d) {
      throw DimensionError("concat_tokens: width " + std::to_string(p.cols()) + " vs " +
                           std::to_string(d));
    }
    total += p.rows();
  }
  Tensor out({total, d});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off * d);
    off += p.rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.record(std::move(out), "concat_tokens", parts,
                  [ps, d](Tape& tp, const Tensor& g) {
                    std::size_t off = 0;
                    for (const Var& p : ps) {
                      const std::size_t n = p.rows() * d;
                      if (tp.requires_grad(p)) {
                        Tensor& gp = tp.grad_buffer(p);
                        const double* src = g.data() + off * d;
                        for (std::size_t i = 0; i < n; ++i) gp[i] += src[i];
                      }
                      off += p.rows();
                    }
                  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  Tape& t = tape_of(x);
  require_matrix("slice_rows", x);
  if (begin + count > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") exceeds " + std::to_string(x.rows()));
  }
  const std::size_t d = x.cols();
  const double* src = x.value().data() + begin * d;
  Tensor out({count, d}, std::vector<double>(src, src + count * d));
  return t.record(std::move(out), "slice_rows", {x}, [x, begin, count, d](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    double* dst = gx.data() + begin * d;
    for (std::size_t i = 0; i < count * d; ++i) dst[i] += g[i];
  });
}

std::vector<Var> split_tokens(Var x, std::span<const std::size_t> lengths) {
  require_matrix("split_tokens", x);
  std::size_t total = 0;
  for (std::size_t l : lengths) total += l;
  if (total != x.rows()) {
    throw DimensionError("split_tokens: lengths sum to " + std::to_string(total) + " but " +
                         std::to_string(x.rows()) + " rows");
  }
  std::vector<Var> parts;
  std::size_t off = 0;
  for (std::size_t l : lengths) {
    parts.push_back(slice_rows(x, off, l));
    off += l;
  }
  return parts;
}

Var gather_rows(Var x, std::span<const std::size_t> indices) {
  Tape& t = tape_of(x);
  require_matrix("gather_rows", x);
  const std::size_t d = x.cols();
  Tensor out({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.rows()) throw DimensionError("gather_rows: index out of range");
    const auto src = x.value().row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return t.record(std::move(out), "gather_rows", {x},
                  [x, d, idx = std::move(idx)](Tape& tp, const Tensor& g) {
                    Tensor& gx = tp.grad_buffer(x);
                    for (std::size_t i = 0; i < idx.size(); ++i)
                      for (std::size_t j = 0; j < d; ++j) gx(idx[i], j) += g(i, j);
                  });
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return t.record(Tensor({1}, {s}), "sum", {x}, [x](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (double& v : gx.values()) v += g[0];
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var mse(Var pred, Var target) {
  Tape& t = tape_of(pred);
  require_same_tape(pred, target);
  require_same_shape("mse", pred, target);
  const Tensor& p = pred.value();
  const Tensor& q = target.value();
  const std::size_t n = p.size();
  if (n == 0) throw DimensionError("mse of empty tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (p[i] - q[i]) * (p[i] - q[i]);
  return t.record(Tensor({1}, {s / static_cast<double>(n)}), "mse", {pred, target},
                  [pred, target, n](Tape& tp, const Tensor& g) {
                    const Tensor& p = pred.value();
                    const Tensor& q = target.value();
                    const double c = 2.0 * g[0] / static_cast<double>(n);
                    if (tp.requires_grad(pred)) {
                      Tensor& gp = tp.grad_buffer(pred);
                      for (std::size_t i = 0; i < n; ++i) gp[i] += c * (p[i] - q[i]);
                    }
                    if (tp.requires_grad(target)) {
                      Tensor& gq = tp.grad_buffer(target);
                      for (std::size_t i = 0; i < n; ++i) gq[i] -= c * (p[i] - q[i]);
                    }
                  });
}

}  // namespace omini
