#include "ominictl/sequence.hpp"

#include <string>

#include "ominictl/errors.hpp"

namespace omini {

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::Text: return "text";
    case Modality::NoisyImage: return "noisy_image";
    case Modality::CondImage: return "cond_image";
  }
  return "unknown";
}

SequenceLayout SequenceLayout::make(std::size_t text, std::size_t grid_h, std::size_t grid_w,
                                    bool with_cond) {
  const std::size_t n = grid_h * grid_w;
  return {text, n, with_cond ? n : 0, grid_h, grid_w};
}

void SequenceLayout::validate() const {
  if (image != grid_h * grid_w) {
    throw DimensionError("layout: " + std::to_string(image) + " image tokens for a " +
                         std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  }
  if (cond != 0 && cond != image) {
    throw DimensionError("layout: condition block must be empty or match the image block");
  }
}

std::vector<Modality> SequenceLayout::modalities() const {
  std::vector<Modality> tags;
  tags.reserve(total());
  tags.insert(tags.end(), text, Modality::Text);
  tags.insert(tags.end(), image, Modality::NoisyImage);
  tags.insert(tags.end(), cond, Modality::CondImage);
  return tags;
}

std::vector<double> SequenceLayout::condition_gates() const {
  std::vector<double> g(total(), 0.0);
  for (std::size_t t = cond_begin(); t < total(); ++t) g[t] = 1.0;
  return g;
}

TokenSequence TokenSequence::make(Tensor embeddings, SequenceLayout layout) {
  TokenSequence s{std::move(embeddings), layout, layout.modalities(), {}};
  s.validate();
  return s;
}

void TokenSequence::validate() const {
  layout.validate();
  if (embeddings.rank() != 2 || embeddings.rows() != layout.total()) {
    throw DimensionError("token sequence: embeddings " + shape_string(embeddings.shape()) +
                         " for " + std::to_string(layout.total()) + " tokens");
  }
  if (modality != layout.modalities()) {
    throw DimensionError("token sequence: modality tags inconsistent with block lengths");
  }
  if (!positions.empty() && positions.size() != layout.total()) {
    throw StateError("token sequence: partial position assignment");
  }
}

}  // namespace omini
