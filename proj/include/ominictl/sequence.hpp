#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include "ominictl/tensor.hpp"

namespace omini {

enum class Modality : std::uint8_t { Text, NoisyImage, CondImage };

std::string_view to_string(Modality m);

struct Position2D {
  std::int64_t i = 0;
  std::int64_t j = 0;

  friend bool operator==(const Position2D&, const Position2D&) = default;
};

// Block structure of a unified sequence [C_T; X; C_I]: `text` tokens, then
// `image` noisy-image tokens laid out on a grid_h x grid_w grid, then `cond`
// condition tokens (0 or image).
struct SequenceLayout {
  std::size_t text = 0;
  std::size_t image = 0;
  std::size_t cond = 0;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;

  std::size_t total() const { return text + image + cond; }
  std::size_t image_begin() const { return text; }
  std::size_t cond_begin() const { return text + image; }

  static SequenceLayout make(std::size_t text, std::size_t grid_h, std::size_t grid_w,
                             bool with_cond);

  // Throws DimensionError unless image == grid_h*grid_w and cond in {0, image}.
  void validate() const;
  std::vector<Modality> modalities() const;
  // Per-token LoRA gate: 1 on condition tokens, 0 elsewhere.
  std::vector<double> condition_gates() const;

  friend bool operator==(const SequenceLayout&, const SequenceLayout&) = default;
};

struct TokenSequence {
  Tensor embeddings;  // [layout.total(), d]
  SequenceLayout layout;
  std::vector<Modality> modality;
  std::vector<Position2D> positions;  // empty until assign_positions

  static TokenSequence make(Tensor embeddings, SequenceLayout layout);

  bool positions_assigned() const { return positions.size() == layout.total(); }
  // Throws DimensionError / StateError on inconsistent tags or lengths.
  void validate() const;
};

}  // namespace omini
