#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ominictl/flow.hpp"
#include "ominictl/model.hpp"

namespace omini {

// Binary layout (little-endian):
//   "ODIT" | u32 version | u64 header length | header JSON
//   | u64 tensor count | tensors...
// Each tensor: u32 name length | name | u8 dtype (1 = f64) | u32 rank
//   | u64 dims[rank] | f64 payload.
// The header records the model config, the checkpoint kind ("full" or
// "adapters"), adapter enable flags, the optimizer step and the training
// task when present.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct CheckpointData {
  std::string kind = "full";
  ModelConfig config;
  std::vector<NamedTensor> tensors;
  std::vector<std::string> disabled_adapters;
  std::optional<std::size_t> optimizer_step;
  std::optional<TaskKind> task;  // training task, when known
};

// Collects a model's weights (and optionally optimizer moments).
CheckpointData snapshot(const Model& model, const AdamW* optimizer = nullptr);
CheckpointData snapshot_adapters(const Model& model);

void write_checkpoint(std::ostream& out, const CheckpointData& data);
CheckpointData read_checkpoint(std::istream& in);

// File helpers; saving writes a temporary file and renames it into place.
void save_checkpoint(const std::string& path, const Model& model,
                     const AdamW* optimizer = nullptr, std::optional<TaskKind> task = std::nullopt);
void save_adapters(const std::string& path, const Model& model,
                   std::optional<TaskKind> task = std::nullopt);
Model load_model(const std::string& path);
CheckpointData load_checkpoint(const std::string& path);

// Rebuilds a full model; throws FormatError for adapter-only data.
Model model_from_checkpoint(const CheckpointData& data);
// Restores optimizer moments saved alongside `data` into `optimizer`.
void restore_optimizer(const CheckpointData& data, AdamW& optimizer);
// Replaces `base`'s adapters with the exported ones. Throws FormatError if
// the adapter layout does not fit the base architecture.
void attach_adapters(Model& base, const CheckpointData& adapters);

// Writes `content` to `path` through a temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& content);

}  // namespace omini
