#include "ominictl/eval.hpp"

#include "ominictl/errors.hpp"
#include "ominictl/random.hpp"

namespace omini {

std::uint64_t heldout_data_seed(std::uint64_t seed) { return mix_seed({seed, 0xE7A1}); }

std::string metric_name(TaskKind task) {
  switch (task) {
    case TaskKind::EdgeToImage: return "edge_f1";
    case TaskKind::Colorization: return "mse";
    case TaskKind::SubjectRelocation: return "subject_fidelity";
  }
  return "unknown";
}

namespace {

double score(TaskKind task, const ToyPair& pair, const Image& generated) {
  switch (task) {
    case TaskKind::EdgeToImage: {
      const Image truth = extract_edges(pair.target);
      return edge_f1(extract_edges(generated), truth);
    }
    case TaskKind::Colorization:
      return pixel_mse(extract_gray(generated), pair.condition);
    case TaskKind::SubjectRelocation:
      return subject_fidelity(generated, *pair.metadata.subject);
  }
  return 0.0;
}

std::optional<BiasSpec> bias_of(const EvalConfig& cfg) {
  if (!cfg.gamma) return std::nullopt;
  return BiasSpec{*cfg.gamma};
}

}  // namespace

EvalSample evaluate_one(Model& model, const TaskSpec& task, const EvalConfig& cfg,
                        std::size_t i) {
  EvalSample s;
  s.pair = gen_pair(task, heldout_data_seed(cfg.seed), i);
  const bool needs_cond = model.config().integration != Integration::None;
  const Tensor cond = needs_cond ? model.codec().encode(s.pair.condition) : Tensor();
  s.generated = sample(model, s.pair.text, needs_cond ? &cond : nullptr, bias_of(cfg),
                       cfg.n_steps, mix_seed({cfg.seed, i, 0x5A}));
  s.score = score(task.kind, s.pair, s.generated);
  return s;
}

EvalReport evaluate(Model& model, const TaskSpec& task, const EvalConfig& cfg) {
  task.validate();
  if (task.image_size != model.config().image_size) {
    throw ConfigError("eval: task canvas differs from the model image size");
  }
  EvalReport r;
  r.task = task.kind;
  r.metric = metric_name(task.kind);
  double sum = 0.0;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    r.per_sample.push_back(evaluate_one(model, task, cfg, i).score);
    sum += r.per_sample.back();
  }
  if (cfg.n > 0) r.aggregate = sum / static_cast<double>(cfg.n);
  return r;
}

AttentionProbe probe_attention(Model& model, const TaskSpec& task, std::uint64_t seed,
                               std::size_t index, double t, std::optional<BiasSpec> bias) {
  if (model.config().integration != Integration::UnifiedSequence) {
    throw ConfigError("attention probes need a unified-sequence model");
  }
  const ToyPair pair = gen_pair(task, heldout_data_seed(seed), index);
  const PatchCodec& codec = model.codec();
  Rng rng(mix_seed({seed, index, 0xA77}));
  Tensor x0 = codec.encode(pair.target);
  Tensor x1 = rng.normal_tensor(x0.shape(), 1.0);
  const FlowSample fs = FlowSample::make(std::move(x0), std::move(x1), t);
  const Tensor cond = codec.encode(pair.condition);
  AttentionProbe probe;
  ForwardRequest req{&fs.xt, t, pair.text, &cond, bias, std::nullopt};
  (void)forward(model, req, &probe);
  return probe;
}

DominanceReport attention_dominance(Model& model, const TaskSpec& task, std::size_t n_samples,
                                    std::uint64_t seed, double t) {
  if (n_samples == 0) throw ArgumentError("attention_dominance: n_samples must be >= 1");
  DominanceReport rep;
  const std::size_t blocks = model.config().n_blocks(), heads = model.config().n_heads;
  rep.per_block.assign(blocks, 0.0);
  for (std::size_t s = 0; s < n_samples; ++s) {
    const AttentionProbe probe = probe_attention(model, task, seed, s, t, std::nullopt);
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t h = 0; h < heads; ++h) {
        const Tensor block =
            cross_block(probe.maps[b], probe.layout, h, CrossBlock::ImageToCondition, true);
        rep.per_block[b] += diag_dominance(block);
      }
  }
  const double per = static_cast<double>(n_samples * heads);
  double total = 0.0;
  for (double& v : rep.per_block) {
    total += v;
    v /= per;
  }
  rep.mean = total / (per * static_cast<double>(blocks));
  rep.uniform_baseline = 1.0 / static_cast<double>(model.config().image_tokens());
  return rep;
}

}  // namespace omini
