#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ominictl/image.hpp"
#include "ominictl/rope.hpp"

namespace omini {

enum class TaskKind { EdgeToImage, Colorization, SubjectRelocation };

std::string_view to_string(TaskKind k);
// Throws ConfigError for unknown names.
TaskKind parse_task_kind(std::string_view name);

struct TaskSpec {
  TaskKind kind = TaskKind::EdgeToImage;
  PositionMode alignment = PositionMode::Aligned;
  std::size_t image_size = 16;

  static TaskSpec make(TaskKind kind, std::size_t image_size = 16);
  // Throws ConfigError if alignment disagrees with kind or the canvas is too
  // small to host the shapes.
  void validate() const;
};

using Color = std::array<double, 3>;

enum class ShapeKind { Rect, Disc, Cross };
std::string_view to_string(ShapeKind k);

struct Shape {
  ShapeKind kind = ShapeKind::Rect;
  int cy = 0, cx = 0;  // integer pixel center
  int size = 2;        // half extent (rect), radius (disc), arm length (cross)
  Color color{};

  bool covers(int y, int x) const;
};

struct ToyScene {
  Image canvas;
  Color background{};
  std::vector<Shape> shapes;  // back to front
};

ToyScene render_scene(std::size_t size, const Color& background, std::vector<Shape> shapes);

// Text vocabulary shared by every task.
namespace vocab {
inline constexpr int kPad = 0;
inline constexpr int kTaskEdge = 1;
inline constexpr int kTaskColor = 2;
inline constexpr int kTaskReloc = 3;
inline constexpr int kBackground0 = 4;  // + palette index
inline constexpr int kShapeColor0 = 8;  // + palette index
inline constexpr int kLocation0 = 13;   // + location index
inline constexpr std::size_t kTextLen = 4;
}  // namespace vocab

// Dark backgrounds and bright shape colors; luminances are far apart so
// every shape boundary clears the edge threshold.
const std::vector<Color>& background_palette();
const std::vector<Color>& shape_palette();
// Target centers for relocation, as fractions of the canvas.
std::vector<std::array<int, 2>> relocation_centers(std::size_t image_size);

struct SubjectInfo {
  ShapeKind kind = ShapeKind::Rect;
  Color color{};
  int size = 0;
  std::size_t area = 0;  // rendered pixel count
  int cy = 0, cx = 0;    // center in the target
};

struct PairMetadata {
  TaskKind task = TaskKind::EdgeToImage;
  std::uint64_t seed = 0;
  std::uint64_t index = 0;
  int background = 0;
  std::vector<int> shape_colors;
  std::optional<int> location;
  std::optional<SubjectInfo> subject;
};

struct ToyPair {
  Image condition;
  Image target;
  std::vector<int> text;
  PairMetadata metadata;
};

// Pure function of (spec, seed, index).
ToyPair gen_pair(const TaskSpec& spec, std::uint64_t seed, std::uint64_t index);

inline constexpr double kEdgeThreshold = 0.25;

double luminance(const Image& img, std::size_t y, std::size_t x);
// Single-channel {0,1} map: forward-difference |dL/dx| + |dL/dy| > tau.
Image extract_edges(const Image& img, double tau = kEdgeThreshold);
// Three-channel gray image with every channel equal to the luminance.
Image extract_gray(const Image& img);
// Repeats a single-channel image into three channels.
Image to_rgb(const Image& gray);

// Maps are binarized at 0.5 on channel 0. Both empty -> 1, pred empty -> 0.
double edge_f1(const Image& pred, const Image& truth);
double pixel_mse(const Image& a, const Image& b);
// Best blob score: color closeness times area ratio against the subject.
double subject_fidelity(const Image& generated, const SubjectInfo& subject);

// JSON-lines manifest record {seed, index, task, metadata}.
std::string manifest_line(const PairMetadata& meta);

}  // namespace omini
