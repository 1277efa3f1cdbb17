#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ominictl/attention.hpp"
#include "ominictl/autodiff.hpp"
#include "ominictl/image.hpp"
#include "ominictl/lora.hpp"
#include "ominictl/rope.hpp"

namespace omini {

enum class Integration { UnifiedSequence, FeatureAdding, None };
enum class LoraDepth { Full, EarlyOnly };

std::string_view to_string(Integration i);
std::string_view to_string(LoraDepth d);
std::string_view to_string(PositionMode m);

struct ModelConfig {
  std::size_t image_size = 16;
  std::size_t channels = 3;
  std::size_t patch_size = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_dual_blocks = 2;
  std::size_t n_single_blocks = 2;
  std::size_t mlp_ratio = 4;
  std::size_t vocab = 32;
  std::size_t text_len = 4;
  std::size_t lora_rank = 4;
  std::optional<double> lora_alpha;  // defaults to lora_rank
  std::set<LoraTarget> lora_targets = default_lora_targets();
  LoraDepth lora_depth = LoraDepth::Full;
  Integration integration = Integration::UnifiedSequence;
  PositionMode position_mode = PositionMode::Aligned;
  std::optional<Position2D> position_delta;  // NonAligned; defaults to (0, grid)
  double feature_alpha = 1.0;                // FeatureAdding scale
  std::uint64_t init_seed = 0;
  double ln_eps = 1e-6;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t image_tokens() const { return grid() * grid(); }
  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t n_blocks() const { return n_dual_blocks + n_single_blocks; }
  PositionPolicy position_policy() const;
  // Throws ConfigError on any violated invariant.
  void validate() const;
};

// Linear stand-in for the VAE: patch pixels (mapped to [-1, 1]) times an
// encoder projection; decoding applies the decoder projection. The default
// initialization makes the pair exact inverses (encoder rows orthonormal,
// decoder = encoder^T), shared by noisy and condition images.
class PatchCodec {
 public:
  PatchCodec() = default;
  PatchCodec(std::size_t image_size, std::size_t channels, std::size_t patch,
             std::size_t d_model, std::uint64_t seed);

  std::size_t tokens() const { return grid_ * grid_; }
  std::size_t patch_dim() const { return patch_ * patch_ * channels_; }

  // Row-major patch matrix [N, p*p*c] of raw pixel values.
  Tensor patchify(const Image& img) const;
  Image unpatchify(const Tensor& patches) const;

  Tensor encode(const Image& img) const;
  Image decode(const Tensor& tokens) const;

  Parameter encoder;  // [p*p*c, d_model]
  Parameter decoder;  // [d_model, p*p*c]

 private:
  std::size_t image_size_ = 0, channels_ = 0, patch_ = 0, grid_ = 0;
};

Tensor encode_image(const Image& img, const PatchCodec& codec);

// LoRA attachment points inside one block stream.
enum class LoraSite {
  Q, K, V, O, Norm1Scale, Norm1Shift, Norm2Scale, Norm2Shift, MlpIn, MlpOut, Count
};
LoraTarget target_of(LoraSite s);

// Weights of one token stream inside a block (the text or image half of a
// dual block, or the joint stream of a single block).
struct StreamParams {
  std::string name;
  Parameter ln1_scale, ln1_shift, ln2_scale, ln2_shift;
  // adaLN modulation from the timestep: shift1, scale1, gate1, shift2,
  // scale2, gate2.
  std::array<Parameter, 6> mod_w, mod_b;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;
  Parameter mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  std::array<std::optional<LoraAdapter>, static_cast<std::size_t>(LoraSite::Count)> lora;

  std::vector<Parameter*> base_parameters();
  const LoraAdapter* adapter(LoraSite s) const {
    const auto& a = lora[static_cast<std::size_t>(s)];
    return a && a->enabled ? &*a : nullptr;
  }
};

struct Block {
  bool dual = false;
  std::string name;
  std::vector<StreamParams> streams;  // dual: {text, image}; single: {joint}
};

struct ParamCount {
  std::size_t lora_params = 0;
  std::size_t base_params = 0;
  double ratio = 0.0;
};

class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const PatchCodec& codec() const { return codec_; }
  PatchCodec& codec() { return codec_; }

  Parameter time_w1, time_b1, time_w2, time_b2;
  Parameter x_embed_w, x_embed_b;
  Parameter text_embed;  // [vocab, d]
  std::vector<Block> blocks;
  std::array<Parameter, 2> final_mod_w, final_mod_b;  // shift, scale
  Parameter final_w, final_b;

  // DiT weights excluding the frozen codec, in a fixed order.
  std::vector<Parameter*> base_parameters();
  std::vector<const Parameter*> base_parameters() const;
  std::vector<LoraAdapter*> adapters();
  std::vector<const LoraAdapter*> adapters() const;
  std::vector<Parameter*> adapter_parameters();

  void set_base_trainable(bool on);
  void set_adapters_trainable(bool on);
  // Disable every adapter whose target is in `targets`; others are re-enabled.
  void set_ablation(const std::set<LoraTarget>& targets);
  // Installs fresh adapters per config (replacing existing ones).
  void install_adapters(std::uint64_t seed);
  void remove_adapters();

 private:
  ModelConfig cfg_;
  PatchCodec codec_;
};

// Copy of `model` with adapters bound to `targets` disabled (zero delta).
// Throws ConfigError if a target has no installed adapter.
Model ablate(const Model& model, const std::set<LoraTarget>& targets);

ParamCount count_trainable(const Model& model);

// Binds parameters to tape leaves once per tape.
class Graph {
 public:
  explicit Graph(Tape& tape) : tape_(tape) {}
  Tape& tape() { return tape_; }
  Var p(Parameter& param);
  Var p(const Parameter& param);

 private:
  Tape& tape_;
  std::unordered_map<const Parameter*, Var> bound_;
};

// Per-forward attention probability snapshots, one [heads, n, n] map per block.
struct AttentionProbe {
  SequenceLayout layout;
  std::vector<Tensor> maps;
};

struct ForwardRequest {
  const Tensor* noisy = nullptr;  // [N, d] latent tokens
  double t = 0.0;
  std::span<const int> text;
  const Tensor* cond = nullptr;  // [N, d] encoded condition, or null
  std::optional<BiasSpec> bias;
  // Overrides the configured integration (base pretraining runs with None).
  std::optional<Integration> integration;
};

// Shared per-block inputs: layout, rotary table, optional bias, per-token
// LoRA gates, and the activated timestep vector.
struct BlockContext {
  SequenceLayout layout;
  std::shared_ptr<const RopeTable> rope;
  const Tensor* bias = nullptr;
  std::span<const double> gates;
  Var time;  // silu(t_emb), [1, d]
  double ln_eps = 1e-6;
  std::size_t heads = 1;
  AttentionProbe* probe = nullptr;
};

struct DualStreams {
  Var text;
  Var image;  // noisy-image rows followed by condition rows
};

DualStreams block_forward_dual(Graph& g, Block& block, Var text, Var image,
                               const BlockContext& ctx);
Var block_forward_single(Graph& g, Block& block, Var joint, const BlockContext& ctx);

// Velocity prediction [N, d] for the noisy tokens.
Var forward(Graph& g, Model& model, const ForwardRequest& req, AttentionProbe* probe = nullptr);
Tensor forward(Model& model, const ForwardRequest& req, AttentionProbe* probe = nullptr);

// Sinusoidal timestep features [1, dim].
Tensor timestep_features(double t, std::size_t dim);

}  // namespace omini
