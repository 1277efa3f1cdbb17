#include "ominictl/attention.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <memory>
#include <ostream>
#include <sstream>

#include "ominictl/errors.hpp"

namespace omini {

Tensor build_bias(const BiasSpec& spec, const SequenceLayout& layout) {
  if (!(spec.gamma >= 0.0) || !std::isfinite(spec.gamma)) {
    throw DomainError("bias: strength factor must be finite and >= 0, got " +
                      std::to_string(spec.gamma));
  }
  layout.validate();
  const std::size_t n = layout.total();
  Tensor b({n, n});
  if (layout.cond == 0) return b;
  const double v = spec.gamma == 0.0 ? -std::numeric_limits<double>::infinity()
                                     : std::log(spec.gamma);
  const std::size_t x0 = layout.image_begin(), c0 = layout.cond_begin();
  for (std::size_t r = 0; r < layout.image; ++r) {
    for (std::size_t c = 0; c < layout.cond; ++c) {
      b(x0 + r, c0 + c) = v;
      b(c0 + c, x0 + r) = v;
    }
  }
  return b;
}

void AttentionWeights::validate() const {
  const std::size_t d = wq.rows();
  for (const Tensor* w : {&wq, &wk, &wv, &wo}) {
    if (w->rank() != 2 || w->rows() != d || w->cols() != d) {
      throw DimensionError("attention weights must all be [d, d]");
    }
  }
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("model width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

namespace {

void copy_head(const Tensor& packed, std::size_t h, std::size_t dh, double* dst) {
  const std::size_t n = packed.rows(), width = packed.cols();
  for (std::size_t t = 0; t < n; ++t) {
    const double* src = packed.data() + t * width + h * dh;
    std::copy(src, src + dh, dst + t * dh);
  }
}

void add_head(double* packed, std::size_t n, std::size_t width, std::size_t h,
              std::size_t dh, const double* src) {
  for (std::size_t t = 0; t < n; ++t) {
    double* dst = packed + t * width + h * dh;
    for (std::size_t j = 0; j < dh; ++j) dst[j] += src[t * dh + j];
  }
}

}  // namespace

Var multi_head_attention(Var q, Var k, Var v, std::size_t heads, const Tensor* bias,
                         Tensor* probs) {
  Tape& t = *q.tape();
  const std::size_t n = q.rows(), width = q.cols();
  if (k.shape() != q.shape() || v.shape() != q.shape() || q.value().rank() != 2) {
    throw DimensionError("attention: q, k, v must share shape [n, d]");
  }
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (bias != nullptr && (bias->rank() != 2 || bias->rows() != n || bias->cols() != n)) {
    throw DimensionError("attention: bias " + shape_string(bias->shape()) + " for " +
                         std::to_string(n) + " tokens");
  }
  const std::size_t dh = width / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  auto p_all = std::make_shared<std::vector<double>>(heads * n * n);
  std::vector<double> qh(n * dh), kh(n * dh), vh(n * dh), oh(n * dh);
  Tensor out({n, width});
  for (std::size_t h = 0; h < heads; ++h) {
    copy_head(q.value(), h, dh, qh.data());
    copy_head(k.value(), h, dh, kh.data());
    copy_head(v.value(), h, dh, vh.data());
    double* p = p_all->data() + h * n * n;
    kernels::gemm_nt(n, dh, n, qh.data(), kh.data(), p, false);
    for (std::size_t r = 0; r < n; ++r) {
      double* row = p + r * n;
      for (std::size_t c = 0; c < n; ++c) row[c] *= sc;
      if (bias != nullptr) {
        const double* br = bias->data() + r * n;
        for (std::size_t c = 0; c < n; ++c) row[c] += br[c];
      }
      const double m = *std::max_element(row, row + n);
      if (m == -std::numeric_limits<double>::infinity()) {
        std::fill(row, row + n, 0.0);
        continue;
      }
      double s = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        row[c] = std::exp(row[c] - m);
        s += row[c];
      }
      const double inv = 1.0 / s;
      for (std::size_t c = 0; c < n; ++c) row[c] *= inv;
    }
    kernels::gemm_nn(n, n, dh, p, vh.data(), oh.data(), false);
    for (std::size_t r = 0; r < n; ++r)
      std::copy(oh.data() + r * dh, oh.data() + (r + 1) * dh, out.data() + r * width + h * dh);
  }
  if (probs != nullptr) *probs = Tensor({heads, n, n}, *p_all);

  return t.record(
      std::move(out), "attention", {q, k, v},
      [q, k, v, heads, n, width, dh, sc, p_all](Tape& tp, const Tensor& g) {
        const bool gq = tp.requires_grad(q), gk = tp.requires_grad(k), gv = tp.requires_grad(v);
        std::vector<double> qh(n * dh), kh(n * dh), vh(n * dh), gh(n * dh), tmp(n * dh);
        std::vector<double> dp(n * n);
        for (std::size_t h = 0; h < heads; ++h) {
          const double* p = p_all->data() + h * n * n;
          copy_head(g, h, dh, gh.data());
          copy_head(v.value(), h, dh, vh.data());
          if (gv) {
            kernels::gemm_tn(n, n, dh, p, gh.data(), tmp.data(), false);
            add_head(tp.grad_buffer(v).data(), n, width, h, dh, tmp.data());
          }
          if (!gq && !gk) continue;
          kernels::gemm_nt(n, dh, n, gh.data(), vh.data(), dp.data(), false);
          for (std::size_t r = 0; r < n; ++r) {
            const double* pr = p + r * n;
            double* dr = dp.data() + r * n;
            double s = 0.0;
            for (std::size_t c = 0; c < n; ++c) s += dr[c] * pr[c];
            for (std::size_t c = 0; c < n; ++c) dr[c] = sc * pr[c] * (dr[c] - s);
          }
          copy_head(q.value(), h, dh, qh.data());
          copy_head(k.value(), h, dh, kh.data());
          if (gq) {
            kernels::gemm_nn(n, n, dh, dp.data(), kh.data(), tmp.data(), false);
            add_head(tp.grad_buffer(q).data(), n, width, h, dh, tmp.data());
          }
          if (gk) {
            kernels::gemm_tn(n, n, dh, dp.data(), qh.data(), tmp.data(), false);
            add_head(tp.grad_buffer(k).data(), n, width, h, dh, tmp.data());
          }
        }
      });
}

namespace {

struct AttentionRun {
  Tensor output;
  Tensor probs;
  Tensor logits;
};

AttentionRun run_mma(const TokenSequence& seq, const AttentionWeights& w,
                     const std::optional<BiasSpec>& bias_spec, bool want_logits) {
  seq.validate();
  w.validate();
  if (!seq.positions_assigned()) {
    throw StateError("mma: token positions have not been assigned");
  }
  if (seq.embeddings.cols() != w.dim()) {
    throw DimensionError("mma: embedding width " + std::to_string(seq.embeddings.cols()) +
                         " vs weights " + std::to_string(w.dim()));
  }
  const std::size_t dh = w.dim() / w.heads;
  auto table = std::make_shared<const RopeTable>(seq.positions, dh);
  std::optional<Tensor> bias;
  if (bias_spec) bias = build_bias(*bias_spec, seq.layout);

  Tape tape(false);
  Var x = tape.constant(seq.embeddings);
  Var q = rope(matmul(x, tape.constant(w.wq)), table);
  Var k = rope(matmul(x, tape.constant(w.wk)), table);
  Var v = matmul(x, tape.constant(w.wv));
  AttentionRun run;
  if (want_logits) {
    const std::size_t n = seq.layout.total();
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    run.logits = Tensor({w.heads, n, n});
    for (std::size_t h = 0; h < w.heads; ++h)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < n; ++c) {
          const double l = sc * kernels::dot(q.value().data() + r * w.dim() + h * dh,
                                             k.value().data() + c * w.dim() + h * dh, dh);
          run.logits[(h * n + r) * n + c] = l + (bias ? (*bias)(r, c) : 0.0);
        }
  }
  Var a = multi_head_attention(q, k, v, w.heads, bias ? &*bias : nullptr, &run.probs);
  run.output = matmul(a, tape.constant(w.wo)).value();
  return run;
}

}  // namespace

Tensor mma(const TokenSequence& seq, const AttentionWeights& weights,
           const std::optional<BiasSpec>& bias) {
  return run_mma(seq, weights, bias, false).output;
}

Tensor attention_map(const TokenSequence& seq, const AttentionWeights& weights,
                     const std::optional<BiasSpec>& bias) {
  return run_mma(seq, weights, bias, false).probs;
}

Tensor attention_logits(const TokenSequence& seq, const AttentionWeights& weights,
                        const std::optional<BiasSpec>& bias) {
  return run_mma(seq, weights, bias, true).logits;
}

Tensor cross_block(const Tensor& map, const SequenceLayout& layout, std::size_t head,
                   CrossBlock which, bool renormalize) {
  const std::size_t n = layout.total();
  if (map.rank() != 3 || map.shape()[1] != n || map.shape()[2] != n) {
    throw DimensionError("cross_block: map " + shape_string(map.shape()) +
                         " does not match layout of " + std::to_string(n) + " tokens");
  }
  if (head >= map.shape()[0]) throw DimensionError("cross_block: head out of range");
  if (layout.cond == 0) throw StateError("cross_block: sequence has no condition tokens");
  const std::size_t rows = which == CrossBlock::ImageToCondition ? layout.image : layout.cond;
  const std::size_t cols = which == CrossBlock::ImageToCondition ? layout.cond : layout.image;
  const std::size_t r0 =
      which == CrossBlock::ImageToCondition ? layout.image_begin() : layout.cond_begin();
  const std::size_t c0 =
      which == CrossBlock::ImageToCondition ? layout.cond_begin() : layout.image_begin();
  Tensor b({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      b(r, c) = map[(head * n + r0 + r) * n + c0 + c];
      s += b(r, c);
    }
    if (renormalize && s > 0.0)
      for (std::size_t c = 0; c < cols; ++c) b(r, c) /= s;
  }
  return b;
}

double cross_attention_mass(const Tensor& map, const SequenceLayout& layout) {
  const std::size_t n = layout.total();
  if (map.rank() != 3 || map.shape()[1] != n || map.shape()[2] != n) {
    throw DimensionError("cross_attention_mass: map does not match layout");
  }
  double s = 0.0;
  for (std::size_t h = 0; h < map.shape()[0]; ++h)
    for (std::size_t r = layout.image_begin(); r < layout.cond_begin(); ++r)
      for (std::size_t c = layout.cond_begin(); c < n; ++c) s += map[(h * n + r) * n + c];
  return s;
}

double diag_dominance(const Tensor& block) {
  if (block.rank() != 2 || block.rows() != block.cols()) {
    throw DimensionError("diag_dominance: square block required, got " +
                         shape_string(block.shape()));
  }
  const std::size_t n = block.rows();
  if (n == 0) throw DimensionError("diag_dominance: empty block");
  double s = 0.0;
  for (std::size_t r = 0; r < n; ++r) s += block(r, r);
  return s / static_cast<double>(n);
}

void write_matrix_text(std::ostream& out, const Tensor& m) {
  if (m.rank() != 2) throw DimensionError("write_matrix_text: rank-2 tensor required");
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << m.rows() << ' ' << m.cols() << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) {
      if (c) os << ' ';
      os << m(r, c);
    }
    os << '\n';
  }
  out << os.str();
}

Tensor read_matrix_text(std::istream& in) {
  std::size_t rows = 0, cols = 0;
  if (!(in >> rows >> cols)) throw FormatError("matrix text: missing header");
  Tensor m({rows, cols});
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!(in >> m[i])) throw FormatError("matrix text: truncated payload");
  }
  return m;
}

}  // namespace omini
