#include "ominictl/model.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "ominictl/errors.hpp"
#include "ominictl/random.hpp"

namespace omini {

std::string_view to_string(Integration i) {
  switch (i) {
    case Integration::UnifiedSequence: return "unified_sequence";
    case Integration::FeatureAdding: return "feature_adding";
    case Integration::None: return "none";
  }
  return "unknown";
}

std::string_view to_string(LoraDepth d) {
  return d == LoraDepth::Full ? "full" : "early_only";
}

std::string_view to_string(PositionMode m) {
  return m == PositionMode::Aligned ? "aligned" : "non_aligned";
}

PositionPolicy ModelConfig::position_policy() const {
  if (position_mode == PositionMode::Aligned) return PositionPolicy::aligned();
  if (position_delta) return PositionPolicy::non_aligned(*position_delta);
  return PositionPolicy::non_aligned_beside(grid());
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
    fail("image_size must be a positive multiple of patch_size");
  if (channels == 0) fail("channels must be positive");
  if (n_heads == 0 || d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (head_dim() % 4 != 0) fail("per-head dimension must be divisible by 4 for 2D RoPE");
  if (patch_dim() > d_model) fail("patch_size^2 * channels must not exceed d_model");
  if (n_blocks() == 0) fail("at least one block is required");
  if (mlp_ratio == 0) fail("mlp_ratio must be positive");
  if (vocab == 0 || text_len == 0) fail("vocab and text_len must be positive");
  if (lora_rank == 0) fail("lora_rank must be >= 1");
  if (lora_alpha && !(*lora_alpha > 0.0)) fail("lora_alpha must be positive");
  if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
  if (!std::isfinite(feature_alpha)) fail("feature_alpha must be finite");
  if (integration == Integration::FeatureAdding && position_mode != PositionMode::Aligned)
    fail("feature_adding integration requires aligned positions");
  if (position_mode == PositionMode::NonAligned) {
    const SequenceLayout layout = SequenceLayout::make(text_len, grid(), grid(), true);
    try {
      (void)layout_positions(layout, position_policy());
    } catch (const PolicyError& e) {
      fail(e.what());
    }
  }
}

// ---------------------------------------------------------------------------

PatchCodec::PatchCodec(std::size_t image_size, std::size_t channels, std::size_t patch,
                       std::size_t d_model, std::uint64_t seed)
    : image_size_(image_size), channels_(channels), patch_(patch), grid_(image_size / patch) {
  const std::size_t pd = patch_dim();
  if (pd > d_model) throw ConfigError("codec: patch dimension exceeds model width");
  // Modified Gram-Schmidt on Gaussian rows gives an encoder with orthonormal
  // rows; its transpose is an exact left inverse.
  Rng rng(seed);
  Tensor enc = rng.normal_tensor({pd, d_model}, 1.0);
  for (std::size_t r = 0; r < pd; ++r) {
    auto row = enc.row(r);
    for (std::size_t q = 0; q < r; ++q) {
      const auto prev = enc.row(q);
      const double d = kernels::dot(row.data(), prev.data(), d_model);
      for (std::size_t j = 0; j < d_model; ++j) row[j] -= d * prev[j];
    }
    const double nrm = std::sqrt(kernels::dot(row.data(), row.data(), d_model));
    for (double& v : row) v /= nrm;
  }
  decoder = Parameter{"codec/decoder", transpose(enc), {}, false};
  encoder = Parameter{"codec/encoder", std::move(enc), {}, false};
}

Tensor PatchCodec::patchify(const Image& img) const {
  if (img.height != image_size_ || img.width != image_size_ || img.channels != channels_) {
    throw ConfigError("codec: image is " + std::to_string(img.height) + "x" +
                      std::to_string(img.width) + "x" + std::to_string(img.channels) +
                      ", expected " + std::to_string(image_size_) + "x" +
                      std::to_string(image_size_) + "x" + std::to_string(channels_));
  }
  Tensor out({tokens(), patch_dim()});
  for (std::size_t gy = 0; gy < grid_; ++gy)
    for (std::size_t gx = 0; gx < grid_; ++gx) {
      double* dst = out.data() + (gy * grid_ + gx) * patch_dim();
      std::size_t k = 0;
      for (std::size_t py = 0; py < patch_; ++py)
        for (std::size_t px = 0; px < patch_; ++px)
          for (std::size_t c = 0; c < channels_; ++c)
            dst[k++] = img.at(gy * patch_ + py, gx * patch_ + px, c);
    }
  return out;
}

Image PatchCodec::unpatchify(const Tensor& patches) const {
  if (patches.rank() != 2 || patches.rows() != tokens() || patches.cols() != patch_dim()) {
    throw DimensionError("codec: patch matrix " + shape_string(patches.shape()));
  }
  Image img(image_size_, image_size_, channels_);
  for (std::size_t gy = 0; gy < grid_; ++gy)
    for (std::size_t gx = 0; gx < grid_; ++gx) {
      const double* src = patches.data() + (gy * grid_ + gx) * patch_dim();
      std::size_t k = 0;
      for (std::size_t py = 0; py < patch_; ++py)
        for (std::size_t px = 0; px < patch_; ++px)
          for (std::size_t c = 0; c < channels_; ++c)
            img.at(gy * patch_ + py, gx * patch_ + px, c) = src[k++];
    }
  return img;
}

Tensor PatchCodec::encode(const Image& img) const {
  Tensor p = patchify(img);
  for (double& v : p.values()) v = 2.0 * v - 1.0;
  return matmul(p, encoder.value);
}

Image PatchCodec::decode(const Tensor& tokens_in) const {
  Tensor p = matmul(tokens_in, decoder.value);
  for (double& v : p.values()) v = 0.5 * (v + 1.0);
  return unpatchify(p);
}

Tensor encode_image(const Image& img, const PatchCodec& codec) { return codec.encode(img); }

// ---------------------------------------------------------------------------

LoraTarget target_of(LoraSite s) {
  switch (s) {
    case LoraSite::Q: return LoraTarget::WQ;
    case LoraSite::K: return LoraTarget::WK;
    case LoraSite::V: return LoraTarget::WV;
    case LoraSite::O: return LoraTarget::WO;
    case LoraSite::Norm1Scale:
    case LoraSite::Norm2Scale: return LoraTarget::NormScale;
    case LoraSite::Norm1Shift:
    case LoraSite::Norm2Shift: return LoraTarget::NormShift;
    case LoraSite::MlpIn: return LoraTarget::MlpIn;
    case LoraSite::MlpOut: return LoraTarget::MlpOut;
    case LoraSite::Count: break;
  }
  throw ConfigError("invalid LoRA site");
}

namespace {

const char* site_name(LoraSite s) {
  switch (s) {
    case LoraSite::Q: return "attn.W_Q";
    case LoraSite::K: return "attn.W_K";
    case LoraSite::V: return "attn.W_V";
    case LoraSite::O: return "attn.W_O";
    case LoraSite::Norm1Scale: return "norm1.norm_scale";
    case LoraSite::Norm1Shift: return "norm1.norm_shift";
    case LoraSite::Norm2Scale: return "norm2.norm_scale";
    case LoraSite::Norm2Shift: return "norm2.norm_shift";
    case LoraSite::MlpIn: return "mlp.mlp_in";
    case LoraSite::MlpOut: return "mlp.mlp_out";
    case LoraSite::Count: break;
  }
  return "?";
}

Parameter make_param(const std::string& name, Tensor value) {
  return Parameter{name, std::move(value), {}, true};
}

Parameter gaussian(Rng& rng, const std::string& name, std::size_t rows, std::size_t cols,
                   double stddev) {
  return make_param(name, rng.normal_tensor({rows, cols}, stddev));
}

Parameter filled(const std::string& name, std::size_t n, double v) {
  return make_param(name, Tensor({n}, v));
}

StreamParams make_stream(Rng& rng, const std::string& name, std::size_t d,
                         std::size_t hidden) {
  StreamParams s;
  s.name = name;
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  s.ln1_scale = filled(name + ".norm1.scale", d, 1.0);
  s.ln1_shift = filled(name + ".norm1.shift", d, 0.0);
  s.ln2_scale = filled(name + ".norm2.scale", d, 1.0);
  s.ln2_shift = filled(name + ".norm2.shift", d, 0.0);
  static const char* kModNames[6] = {"shift1", "scale1", "gate1", "shift2", "scale2", "gate2"};
  for (std::size_t m = 0; m < 6; ++m) {
    s.mod_w[m] = gaussian(rng, name + ".mod." + kModNames[m] + ".w", d, d, 0.02);
    // Residual gates start open so an untrained block is not the identity.
    const bool gate = m == 2 || m == 5;
    s.mod_b[m] = filled(name + ".mod." + kModNames[m] + ".b", d, gate ? 1.0 : 0.0);
  }
  s.wq = gaussian(rng, name + ".attn.wq", d, d, proj);
  s.bq = filled(name + ".attn.bq", d, 0.0);
  s.wk = gaussian(rng, name + ".attn.wk", d, d, proj);
  s.bk = filled(name + ".attn.bk", d, 0.0);
  s.wv = gaussian(rng, name + ".attn.wv", d, d, proj);
  s.bv = filled(name + ".attn.bv", d, 0.0);
  s.wo = gaussian(rng, name + ".attn.wo", d, d, proj);
  s.bo = filled(name + ".attn.bo", d, 0.0);
  s.mlp_w1 = gaussian(rng, name + ".mlp.w1", d, hidden, proj);
  s.mlp_b1 = filled(name + ".mlp.b1", hidden, 0.0);
  s.mlp_w2 = gaussian(rng, name + ".mlp.w2", hidden, d, 1.0 / std::sqrt(static_cast<double>(hidden)));
  s.mlp_b2 = filled(name + ".mlp.b2", d, 0.0);
  return s;
}

}  // namespace

std::vector<Parameter*> StreamParams::base_parameters() {
  std::vector<Parameter*> ps{&ln1_scale, &ln1_shift, &ln2_scale, &ln2_shift};
  for (std::size_t m = 0; m < 6; ++m) {
    ps.push_back(&mod_w[m]);
    ps.push_back(&mod_b[m]);
  }
  for (Parameter* p : {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &mlp_w1, &mlp_b1, &mlp_w2, &mlp_b2})
    ps.push_back(p);
  return ps;
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::size_t d = cfg_.d_model;
  codec_ = PatchCodec(cfg_.image_size, cfg_.channels, cfg_.patch_size, d,
                      mix_seed({cfg_.init_seed, 0xC0DEC}));
  Rng rng(mix_seed({cfg_.init_seed, 0xBA5E}));
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  time_w1 = gaussian(rng, "time.w1", d, d, proj);
  time_b1 = filled("time.b1", d, 0.0);
  time_w2 = gaussian(rng, "time.w2", d, d, proj);
  time_b2 = filled("time.b2", d, 0.0);
  x_embed_w = gaussian(rng, "x_embed.w", d, d, proj);
  x_embed_b = filled("x_embed.b", d, 0.0);
  text_embed = gaussian(rng, "text_embed", cfg_.vocab, d, 1.0);
  const std::size_t hidden = cfg_.mlp_ratio * d;
  for (std::size_t b = 0; b < cfg_.n_dual_blocks; ++b) {
    Block blk{true, "dual" + std::to_string(b), {}};
    blk.streams.push_back(make_stream(rng, blk.name + ".text", d, hidden));
    blk.streams.push_back(make_stream(rng, blk.name + ".image", d, hidden));
    blocks.push_back(std::move(blk));
  }
  for (std::size_t b = 0; b < cfg_.n_single_blocks; ++b) {
    Block blk{false, "single" + std::to_string(b), {}};
    blk.streams.push_back(make_stream(rng, blk.name + ".joint", d, hidden));
    blocks.push_back(std::move(blk));
  }
  for (std::size_t m = 0; m < 2; ++m) {
    final_mod_w[m] = gaussian(rng, m == 0 ? "final.mod.shift.w" : "final.mod.scale.w", d, d, 0.02);
    final_mod_b[m] = filled(m == 0 ? "final.mod.shift.b" : "final.mod.scale.b", d, 0.0);
  }
  final_w = gaussian(rng, "final.w", d, d, proj);
  final_b = filled("final.b", d, 0.0);
  install_adapters(mix_seed({cfg_.init_seed, 0x10A}));
}

std::vector<Parameter*> Model::base_parameters() {
  std::vector<Parameter*> ps{&time_w1, &time_b1, &time_w2, &time_b2,
                             &x_embed_w, &x_embed_b, &text_embed};
  for (Block& b : blocks)
    for (StreamParams& s : b.streams)
      for (Parameter* p : s.base_parameters()) ps.push_back(p);
  for (std::size_t m = 0; m < 2; ++m) {
    ps.push_back(&final_mod_w[m]);
    ps.push_back(&final_mod_b[m]);
  }
  ps.push_back(&final_w);
  ps.push_back(&final_b);
  return ps;
}

std::vector<const Parameter*> Model::base_parameters() const {
  auto ps = const_cast<Model*>(this)->base_parameters();
  return {ps.begin(), ps.end()};
}

std::vector<LoraAdapter*> Model::adapters() {
  std::vector<LoraAdapter*> out;
  for (Block& b : blocks)
    for (StreamParams& s : b.streams)
      for (auto& a : s.lora)
        if (a) out.push_back(&*a);
  return out;
}

std::vector<const LoraAdapter*> Model::adapters() const {
  auto as = const_cast<Model*>(this)->adapters();
  return {as.begin(), as.end()};
}

std::vector<Parameter*> Model::adapter_parameters() {
  std::vector<Parameter*> out;
  for (LoraAdapter* a : adapters()) {
    out.push_back(&a->down);
    out.push_back(&a->up);
  }
  return out;
}

void Model::set_base_trainable(bool on) {
  for (Parameter* p : base_parameters()) p->trainable = on;
}

void Model::set_adapters_trainable(bool on) {
  for (Parameter* p : adapter_parameters()) p->trainable = on;
}

void Model::set_ablation(const std::set<LoraTarget>& targets) {
  for (LoraAdapter* a : adapters()) a->enabled = !targets.contains(a->target);
}

void Model::remove_adapters() {
  for (Block& b : blocks)
    for (StreamParams& s : b.streams)
      for (auto& a : s.lora) a.reset();
}

void Model::install_adapters(std::uint64_t seed) {
  remove_adapters();
  Rng rng(seed);
  const std::size_t d = cfg_.d_model, hidden = cfg_.mlp_ratio * d;
  for (Block& b : blocks) {
    if (!b.dual && cfg_.lora_depth == LoraDepth::EarlyOnly) continue;
    // The text stream never carries condition tokens, so only the image
    // (dual) or joint (single) stream is adapted.
    StreamParams& s = b.streams.back();
    for (std::size_t i = 0; i < static_cast<std::size_t>(LoraSite::Count); ++i) {
      const auto site = static_cast<LoraSite>(i);
      const LoraTarget target = target_of(site);
      if (!cfg_.lora_targets.contains(target)) continue;
      std::size_t d_in = d, d_out = d, rank = cfg_.lora_rank;
      if (is_vector_target(target)) {
        // A [1, d] delta has rank at most 1.
        d_in = 1;
        rank = 1;
      } else if (site == LoraSite::MlpIn) {
        d_out = hidden;
      } else if (site == LoraSite::MlpOut) {
        d_in = hidden;
      }
      std::optional<double> alpha = cfg_.lora_alpha;
      if (alpha && rank != cfg_.lora_rank) {
        alpha = *alpha * static_cast<double>(rank) / static_cast<double>(cfg_.lora_rank);
      }
      s.lora[i] = make_adapter(s.name + "." + site_name(site), target, d_in, d_out, rank,
                               alpha, rng);
    }
  }
}

Model ablate(const Model& model, const std::set<LoraTarget>& targets) {
  std::set<LoraTarget> installed;
  for (const LoraAdapter* a : model.adapters()) installed.insert(a->target);
  for (LoraTarget t : targets) {
    if (!installed.contains(t)) {
      throw ConfigError("ablate: no adapter bound to " + std::string(to_string(t)));
    }
  }
  Model out = model;
  for (LoraAdapter* a : out.adapters())
    if (targets.contains(a->target)) a->enabled = false;
  return out;
}

ParamCount count_trainable(const Model& model) {
  ParamCount c;
  for (const LoraAdapter* a : model.adapters()) c.lora_params += a->parameter_count();
  for (const Parameter* p : model.base_parameters()) c.base_params += p->value.size();
  c.ratio = c.base_params == 0 ? 0.0
                               : static_cast<double>(c.lora_params) /
                                     static_cast<double>(c.base_params);
  return c;
}

// ---------------------------------------------------------------------------

Var Graph::p(Parameter& param) {
  auto it = bound_.find(&param);
  if (it != bound_.end()) return it->second;
  Var v = tape_.param(param);
  bound_.emplace(&param, v);
  return v;
}

Var Graph::p(const Parameter& param) {
  auto it = bound_.find(&param);
  if (it != bound_.end()) return it->second;
  Var v = tape_.constant(param.value);
  bound_.emplace(&param, v);
  return v;
}

Tensor timestep_features(double t, std::size_t dim) {
  Tensor f({1, dim});
  const std::size_t half = dim / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) /
                                 static_cast<double>(half));
    const double arg = 1000.0 * t * freq;
    f[k] = std::cos(arg);
    f[half + k] = std::sin(arg);
  }
  return f;
}

namespace {

bool all_zero(std::span<const double> gates) {
  return std::all_of(gates.begin(), gates.end(), [](double v) { return v == 0.0; });
}

struct AdapterVars {
  Var down, up;
  double scale = 1.0;
};

AdapterVars bind_adapter(Graph& g, const StreamParams& s, LoraSite site) {
  const LoraAdapter* a = s.adapter(site);
  if (a == nullptr) return {};
  auto& mut = const_cast<LoraAdapter&>(*a);
  return {g.p(mut.down), g.p(mut.up), a->scale()};
}

// LayerNorm with affine scale/shift whose per-token values get the gated
// low-rank deltas on condition rows.
Var gated_norm(Graph& g, StreamParams& s, Var h, bool second, std::span<const double> gates,
               double eps) {
  Parameter& sc = second ? s.ln2_scale : s.ln1_scale;
  Parameter& sh = second ? s.ln2_shift : s.ln1_shift;
  Var xh = layernorm(h, eps);
  Var y = add_rowvec(mul_rowvec(xh, g.p(sc)), g.p(sh));
  if (all_zero(gates)) return y;
  const AdapterVars ds = bind_adapter(g, s, second ? LoraSite::Norm2Scale : LoraSite::Norm1Scale);
  if (ds.down.valid()) {
    Var dscale = matmul(ds.down, ds.up);
    if (ds.scale != 1.0) dscale = scale(dscale, ds.scale);
    y = gated_add(y, mul_rowvec(xh, dscale), gates);
  }
  const AdapterVars db = bind_adapter(g, s, second ? LoraSite::Norm2Shift : LoraSite::Norm1Shift);
  if (db.down.valid()) {
    Var dshift = matmul(db.down, db.up);
    if (db.scale != 1.0) dshift = scale(dshift, db.scale);
    Var rows = add_rowvec(g.tape().constant(Tensor(h.shape())), dshift);
    y = gated_add(y, rows, gates);
  }
  return y;
}

Var adapted_linear(Graph& g, StreamParams& s, LoraSite site, Var x, Parameter& w,
                   Parameter& b, std::span<const double> gates) {
  const AdapterVars a = bind_adapter(g, s, site);
  return lora_linear(x, g.p(w), g.p(b), a.down, a.up, a.scale, gates);
}

struct Modulation {
  Var shift1, scale1, gate1, shift2, scale2, gate2;
};

Modulation modulation(Graph& g, StreamParams& s, Var time) {
  auto lin = [&](std::size_t m) { return linear(time, g.p(s.mod_w[m]), g.p(s.mod_b[m])); };
  return {lin(0), add_scalar(lin(1), 1.0), lin(2), lin(3), add_scalar(lin(4), 1.0), lin(5)};
}

struct PreAttention {
  Var q, k, v;
  Modulation mod;
};

PreAttention pre_attention(Graph& g, StreamParams& s, Var h, std::span<const double> gates,
                           const BlockContext& ctx) {
  PreAttention pa;
  pa.mod = modulation(g, s, ctx.time);
  Var y = gated_norm(g, s, h, false, gates, ctx.ln_eps);
  y = add_rowvec(mul_rowvec(y, pa.mod.scale1), pa.mod.shift1);
  pa.q = adapted_linear(g, s, LoraSite::Q, y, s.wq, s.bq, gates);
  pa.k = adapted_linear(g, s, LoraSite::K, y, s.wk, s.bk, gates);
  pa.v = adapted_linear(g, s, LoraSite::V, y, s.wv, s.bv, gates);
  return pa;
}

Var post_attention(Graph& g, StreamParams& s, Var h, Var attn, const Modulation& mod,
                   std::span<const double> gates, const BlockContext& ctx) {
  Var o = adapted_linear(g, s, LoraSite::O, attn, s.wo, s.bo, gates);
  h = add(h, mul_rowvec(o, mod.gate1));
  Var y = gated_norm(g, s, h, true, gates, ctx.ln_eps);
  y = add_rowvec(mul_rowvec(y, mod.scale2), mod.shift2);
  Var m = gelu(adapted_linear(g, s, LoraSite::MlpIn, y, s.mlp_w1, s.mlp_b1, gates));
  m = adapted_linear(g, s, LoraSite::MlpOut, m, s.mlp_w2, s.mlp_b2, gates);
  return add(h, mul_rowvec(m, mod.gate2));
}

// Runs one block over streams that partition the sequence in order.
std::vector<Var> run_block(Graph& g, Block& block, std::span<const Var> hidden,
                           const BlockContext& ctx) {
  std::vector<PreAttention> pre;
  std::vector<Var> qs, ks, vs;
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    const std::size_t n = hidden[i].valid() ? hidden[i].rows() : 0;
    offsets.push_back(off);
    lengths.push_back(n);
    if (n == 0) {
      pre.emplace_back();
      continue;
    }
    auto gates = ctx.gates.subspan(off, n);
    pre.push_back(pre_attention(g, block.streams[i], hidden[i], gates, ctx));
    qs.push_back(pre.back().q);
    ks.push_back(pre.back().k);
    vs.push_back(pre.back().v);
    off += n;
  }
  if (off != ctx.layout.total()) {
    throw DimensionError("block: streams cover " + std::to_string(off) + " of " +
                         std::to_string(ctx.layout.total()) + " tokens");
  }
  Var q = rope(concat_tokens(qs), ctx.rope);
  Var k = rope(concat_tokens(ks), ctx.rope);
  Var v = concat_tokens(vs);
  Tensor probs;
  Var attn = multi_head_attention(q, k, v, ctx.heads, ctx.bias,
                                  ctx.probe != nullptr ? &probs : nullptr);
  if (ctx.probe != nullptr) ctx.probe->maps.push_back(std::move(probs));
  std::vector<Var> out(hidden.size());
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    if (lengths[i] == 0) continue;
    Var part = hidden.size() == 1 ? attn : slice_rows(attn, offsets[i], lengths[i]);
    out[i] = post_attention(g, block.streams[i], hidden[i], part, pre[i].mod,
                            ctx.gates.subspan(offsets[i], lengths[i]), ctx);
  }
  return out;
}

}  // namespace

DualStreams block_forward_dual(Graph& g, Block& block, Var text, Var image,
                               const BlockContext& ctx) {
  if (!block.dual || block.streams.size() != 2) throw ConfigError("not a dual block");
  const std::array<Var, 2> in{text, image};
  auto out = run_block(g, block, in, ctx);
  return {out[0], out[1]};
}

Var block_forward_single(Graph& g, Block& block, Var joint, const BlockContext& ctx) {
  if (block.dual || block.streams.size() != 1) throw ConfigError("not a single block");
  const std::array<Var, 1> in{joint};
  return run_block(g, block, in, ctx)[0];
}

namespace {

// Runs the block stack over a sequence [text; rest]; text may be empty.
Var run_stack_block(Graph& g, Block& block, Var seq, std::size_t text_len,
                    const BlockContext& ctx) {
  if (!block.dual) return block_forward_single(g, block, seq, ctx);
  if (text_len == 0) return block_forward_dual(g, block, Var{}, seq, ctx).image;
  Var text = slice_rows(seq, 0, text_len);
  Var rest = slice_rows(seq, text_len, seq.rows() - text_len);
  DualStreams s = block_forward_dual(g, block, text, rest, ctx);
  return concat_tokens({s.text, s.image});
}

}  // namespace

Var forward(Graph& g, Model& model, const ForwardRequest& req, AttentionProbe* probe) {
  const ModelConfig& cfg = model.config();
  const std::size_t d = cfg.d_model, n_img = cfg.image_tokens(), m = cfg.text_len;
  if (req.noisy == nullptr || req.noisy->rank() != 2 || req.noisy->rows() != n_img ||
      req.noisy->cols() != d) {
    throw DimensionError("forward: noisy tokens must be [" + std::to_string(n_img) + ", " +
                        std::to_string(d) + "]");
  }
  if (req.text.size() != m) {
    throw DimensionError("forward: expected " + std::to_string(m) + " text tokens");
  }
  std::vector<std::size_t> ids;
  for (int id : req.text) {
    if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab) {
      throw ArgumentError("forward: text token " + std::to_string(id) + " outside vocabulary");
    }
    ids.push_back(static_cast<std::size_t>(id));
  }
  const Integration mode = req.integration.value_or(cfg.integration);
  const bool uses_cond = mode != Integration::None;
  if (uses_cond) {
    if (req.cond == nullptr) throw ArgumentError("forward: condition tokens required");
    if (req.cond->rank() != 2 || req.cond->rows() != n_img || req.cond->cols() != d) {
      throw DimensionError("forward: condition tokens must match the noisy token shape");
    }
  }

  Tape& tape = g.tape();
  Var tfeat = tape.constant(timestep_features(req.t, d));
  Var t_emb = linear(silu(linear(tfeat, g.p(model.time_w1), g.p(model.time_b1))),
                     g.p(model.time_w2), g.p(model.time_b2));
  Var time = silu(t_emb);
  Var text = gather_rows(g.p(model.text_embed), ids);
  Var x = linear(tape.constant(*req.noisy), g.p(model.x_embed_w), g.p(model.x_embed_b));

  const std::size_t grid = cfg.grid();
  const bool unified = mode == Integration::UnifiedSequence;
  const bool adding = mode == Integration::FeatureAdding && cfg.feature_alpha != 0.0;
  const SequenceLayout layout = SequenceLayout::make(m, grid, grid, unified);
  const auto positions = layout_positions(layout, cfg.position_policy());
  const auto table = std::make_shared<const RopeTable>(positions, cfg.head_dim());
  const std::vector<double> gates = layout.condition_gates();
  std::optional<Tensor> bias;
  if (unified && req.bias) bias = build_bias(*req.bias, layout);

  BlockContext ctx{layout, table, bias ? &*bias : nullptr, gates, time, cfg.ln_eps,
                   cfg.n_heads, probe};
  if (probe != nullptr) {
    probe->layout = layout;
    probe->maps.clear();
  }

  Var seq;
  if (unified) {
    Var c = linear(tape.constant(*req.cond), g.p(model.x_embed_w), g.p(model.x_embed_b));
    seq = concat_tokens({text, x, c});
  } else {
    seq = concat_tokens({text, x});
  }

  // Feature adding keeps the condition in its own sequence through the same
  // blocks (adapters active) and adds its hidden state to the image rows.
  Var cond_h;
  SequenceLayout cond_layout{0, n_img, 0, grid, grid};
  std::vector<double> cond_gates(n_img, 1.0);
  std::shared_ptr<const RopeTable> cond_table;
  if (adding) {
    cond_h = linear(tape.constant(*req.cond), g.p(model.x_embed_w), g.p(model.x_embed_b));
    cond_table = std::make_shared<const RopeTable>(
        layout_positions(cond_layout, PositionPolicy::aligned()), cfg.head_dim());
  }

  for (Block& block : model.blocks) {
    if (adding) {
      Var t_part = slice_rows(seq, 0, m);
      Var x_part = slice_rows(seq, m, n_img);
      x_part = add(x_part, cfg.feature_alpha == 1.0 ? cond_h : scale(cond_h, cfg.feature_alpha));
      seq = concat_tokens({t_part, x_part});
      BlockContext cctx{cond_layout, cond_table, nullptr, cond_gates, time, cfg.ln_eps,
                        cfg.n_heads, nullptr};
      cond_h = run_stack_block(g, block, cond_h, 0, cctx);
    }
    seq = run_stack_block(g, block, seq, m, ctx);
  }

  Var xs = slice_rows(seq, m, n_img);
  Var shift = linear(time, g.p(model.final_mod_w[0]), g.p(model.final_mod_b[0]));
  Var scl = add_scalar(linear(time, g.p(model.final_mod_w[1]), g.p(model.final_mod_b[1])), 1.0);
  Var y = add_rowvec(mul_rowvec(layernorm(xs, cfg.ln_eps), scl), shift);
  return linear(y, g.p(model.final_w), g.p(model.final_b));
}

Tensor forward(Model& model, const ForwardRequest& req, AttentionProbe* probe) {
  Tape tape(false);
  Graph g(tape);
  return forward(g, model, req, probe).value();
}

}  // namespace omini
