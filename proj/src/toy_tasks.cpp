#include "ominictl/toy_tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "json.hpp"
#include "ominictl/errors.hpp"
#include "ominictl/random.hpp"

namespace omini {

std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::EdgeToImage: return "edge_to_image";
    case TaskKind::Colorization: return "colorization";
    case TaskKind::SubjectRelocation: return "subject_relocation";
  }
  return "unknown";
}

TaskKind parse_task_kind(std::string_view name) {
  for (TaskKind k : {TaskKind::EdgeToImage, TaskKind::Colorization, TaskKind::SubjectRelocation})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

std::string_view to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Rect: return "rect";
    case ShapeKind::Disc: return "disc";
    case ShapeKind::Cross: return "cross";
  }
  return "unknown";
}

TaskSpec TaskSpec::make(TaskKind kind, std::size_t image_size) {
  TaskSpec s;
  s.kind = kind;
  s.alignment =
      kind == TaskKind::SubjectRelocation ? PositionMode::NonAligned : PositionMode::Aligned;
  s.image_size = image_size;
  return s;
}

void TaskSpec::validate() const {
  const bool non_aligned = kind == TaskKind::SubjectRelocation;
  if (non_aligned != (alignment == PositionMode::NonAligned)) {
    throw ConfigError("task " + std::string(to_string(kind)) + " must be " +
                      (non_aligned ? "non-aligned" : "aligned"));
  }
  if (image_size < 12) throw ConfigError("task canvas must be at least 12 pixels");
}

bool Shape::covers(int y, int x) const {
  const int dy = y - cy, dx = x - cx;
  switch (kind) {
    case ShapeKind::Rect: return std::abs(dy) <= size && std::abs(dx) <= size;
    case ShapeKind::Disc: return dy * dy + dx * dx <= size * size;
    case ShapeKind::Cross:
      return (std::abs(dy) <= size && std::abs(dx) <= 1) ||
             (std::abs(dx) <= size && std::abs(dy) <= 1);
  }
  return false;
}

ToyScene render_scene(std::size_t size, const Color& background, std::vector<Shape> shapes) {
  ToyScene s;
  s.background = background;
  s.shapes = std::move(shapes);
  s.canvas = Image(size, size, 3);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      Color c = background;
      for (const Shape& sh : s.shapes)
        if (sh.covers(static_cast<int>(y), static_cast<int>(x))) c = sh.color;
      for (std::size_t ch = 0; ch < 3; ++ch) s.canvas.at(y, x, ch) = c[ch];
    }
  return s;
}

const std::vector<Color>& background_palette() {
  static const std::vector<Color> p{
      {0.05, 0.05, 0.20}, {0.20, 0.05, 0.05}, {0.05, 0.15, 0.05}, {0.10, 0.10, 0.10}};
  return p;
}

const std::vector<Color>& shape_palette() {
  static const std::vector<Color> p{{1.0, 0.9, 0.2},
                                    {0.3, 1.0, 0.6},
                                    {1.0, 0.5, 0.8},
                                    {0.5, 0.8, 1.0},
                                    {1.0, 0.6, 0.3}};
  return p;
}

std::vector<std::array<int, 2>> relocation_centers(std::size_t image_size) {
  const int lo = static_cast<int>(image_size) / 4;
  const int hi = static_cast<int>(image_size) - 1 - lo;
  return {{lo, lo}, {lo, hi}, {hi, lo}, {hi, hi}};
}

namespace {

constexpr std::uint64_t kTaskSalt[3] = {0xED6E, 0xC010, 0x4E10};

ShapeKind random_kind(Rng& rng) { return static_cast<ShapeKind>(rng.uniform_int(0, 2)); }

std::size_t area_of(const Shape& s, std::size_t size) {
  std::size_t n = 0;
  for (int y = 0; y < static_cast<int>(size); ++y)
    for (int x = 0; x < static_cast<int>(size); ++x) n += s.covers(y, x) ? 1 : 0;
  return n;
}

ToyPair scene_pair(const TaskSpec& spec, Rng& rng, PairMetadata meta) {
  const int n = static_cast<int>(spec.image_size);
  const int bg = static_cast<int>(rng.uniform_int(0, 3));
  const int count = static_cast<int>(rng.uniform_int(1, 2));
  std::vector<Shape> shapes;
  std::vector<int> colors;
  for (int k = 0; k < count; ++k) {
    Shape s;
    s.kind = random_kind(rng);
    s.size = static_cast<int>(rng.uniform_int(2, std::max(2, n / 5)));
    s.cy = static_cast<int>(rng.uniform_int(s.size, n - 1 - s.size));
    s.cx = static_cast<int>(rng.uniform_int(s.size, n - 1 - s.size));
    int c = static_cast<int>(rng.uniform_int(0, 4));
    // Distinct colors so the text tokens name each shape unambiguously.
    if (!colors.empty() && c == colors.front()) c = (c + 1) % 5;
    s.color = shape_palette()[c];
    colors.push_back(c);
    shapes.push_back(s);
  }
  const ToyScene scene = render_scene(spec.image_size, background_palette()[bg], shapes);
  ToyPair p;
  p.target = scene.canvas;
  p.condition = spec.kind == TaskKind::EdgeToImage ? to_rgb(extract_edges(p.target))
                                                   : extract_gray(p.target);
  p.text = {spec.kind == TaskKind::EdgeToImage ? vocab::kTaskEdge : vocab::kTaskColor,
            vocab::kBackground0 + bg, vocab::kShapeColor0 + colors[0],
            colors.size() > 1 ? vocab::kShapeColor0 + colors[1] : vocab::kPad};
  meta.background = bg;
  meta.shape_colors = colors;
  p.metadata = std::move(meta);
  return p;
}

ToyPair relocation_pair(const TaskSpec& spec, Rng& rng, PairMetadata meta) {
  const int n = static_cast<int>(spec.image_size);
  const auto centers = relocation_centers(spec.image_size);
  Shape s;
  s.kind = random_kind(rng);
  // Keep a one-pixel margin around the subject at every candidate center.
  const int max_size = std::max(2, centers.front()[0] - 1);
  s.size = static_cast<int>(rng.uniform_int(2, std::min(3, max_size)));
  const int color = static_cast<int>(rng.uniform_int(0, 4));
  s.color = shape_palette()[color];
  // The reference view uses the last background; targets use the others.
  const int ref_bg = static_cast<int>(background_palette().size()) - 1;
  const int bg = static_cast<int>(rng.uniform_int(0, ref_bg - 1));
  const int loc = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(centers.size()) - 1));

  Shape ref = s;
  ref.cy = ref.cx = n / 2;
  Shape moved = s;
  moved.cy = centers[loc][0];
  moved.cx = centers[loc][1];

  ToyPair p;
  p.condition = render_scene(spec.image_size, background_palette()[ref_bg], {ref}).canvas;
  p.target = render_scene(spec.image_size, background_palette()[bg], {moved}).canvas;
  p.text = {vocab::kTaskReloc, vocab::kBackground0 + bg, vocab::kLocation0 + loc, vocab::kPad};
  meta.background = bg;
  meta.shape_colors = {color};
  meta.location = loc;
  meta.subject = SubjectInfo{s.kind, s.color, s.size, area_of(moved, spec.image_size),
                             moved.cy, moved.cx};
  p.metadata = std::move(meta);
  return p;
}

}  // namespace

ToyPair gen_pair(const TaskSpec& spec, std::uint64_t seed, std::uint64_t index) {
  spec.validate();
  Rng rng(mix_seed({seed, index, kTaskSalt[static_cast<int>(spec.kind)]}));
  PairMetadata meta;
  meta.task = spec.kind;
  meta.seed = seed;
  meta.index = index;
  if (spec.kind == TaskKind::SubjectRelocation) return relocation_pair(spec, rng, meta);
  return scene_pair(spec, rng, meta);
}

double luminance(const Image& img, std::size_t y, std::size_t x) {
  if (img.channels == 1) return img.at(y, x, 0);
  return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
}

Image extract_edges(const Image& img, double tau) {
  if (img.channels != 1 && img.channels != 3) {
    throw DimensionError("extract_edges: 1 or 3 channels required");
  }
  Image out(img.height, img.width, 1);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double l = luminance(img, y, x);
      const double gx = x + 1 < img.width ? luminance(img, y, x + 1) - l : 0.0;
      const double gy = y + 1 < img.height ? luminance(img, y + 1, x) - l : 0.0;
      out.at(y, x, 0) = std::abs(gx) + std::abs(gy) > tau ? 1.0 : 0.0;
    }
  return out;
}

Image extract_gray(const Image& img) {
  Image out(img.height, img.width, 3);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double l = luminance(img, y, x);
      for (std::size_t c = 0; c < 3; ++c) out.at(y, x, c) = l;
    }
  return out;
}

Image to_rgb(const Image& gray) {
  if (gray.channels != 1) throw DimensionError("to_rgb: single-channel image required");
  Image out(gray.height, gray.width, 3);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) out.pixels[i * 3 + c] = gray.pixels[i];
  return out;
}

double edge_f1(const Image& pred, const Image& truth) {
  if (pred.height != truth.height || pred.width != truth.width) {
    throw DimensionError("edge_f1: map sizes differ");
  }
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t y = 0; y < pred.height; ++y)
    for (std::size_t x = 0; x < pred.width; ++x) {
      const bool p = pred.at(y, x, 0) > 0.5, t = truth.at(y, x, 0) > 0.5;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
  if (tp + fp == 0) return tp + fn == 0 ? 1.0 : 0.0;
  if (tp == 0) return 0.0;
  const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

double pixel_mse(const Image& a, const Image& b) {
  if (!a.same_dims(b)) throw DimensionError("pixel_mse: image dimensions differ");
  if (a.pixels.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    s += d * d;
  }
  return s / static_cast<double>(a.pixels.size());
}

namespace {

Color pixel(const Image& img, std::size_t y, std::size_t x) {
  return {img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)};
}

double distance(const Color& a, const Color& b) {
  double s = 0.0;
  for (std::size_t c = 0; c < 3; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
  return std::sqrt(s);
}

}  // namespace

double subject_fidelity(const Image& generated, const SubjectInfo& subject) {
  if (generated.channels != 3) throw DimensionError("subject_fidelity: RGB image required");
  const std::size_t h = generated.height, w = generated.width;
  if (h < 3 || w < 3 || subject.area == 0) return 0.0;

  // Background: per-channel median of the border ring.
  Color bg{};
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> ring;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        if (y == 0 || x == 0 || y + 1 == h || x + 1 == w) ring.push_back(generated.at(y, x, c));
    auto mid = ring.begin() + static_cast<std::ptrdiff_t>(ring.size() / 2);
    std::nth_element(ring.begin(), mid, ring.end());
    bg[c] = *mid;
  }

  std::vector<char> fg(h * w, 0), seen(h * w, 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) fg[y * w + x] = distance(pixel(generated, y, x), bg) > 0.3;

  double best = 0.0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < h * w; ++start) {
    if (!fg[start] || seen[start]) continue;
    Color sum{};
    std::size_t area = 0;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t k = stack.back();
      stack.pop_back();
      const std::size_t y = k / w, x = k % w;
      const Color c = pixel(generated, y, x);
      for (std::size_t ch = 0; ch < 3; ++ch) sum[ch] += c[ch];
      ++area;
      const std::size_t nb[4] = {y > 0 ? k - w : k, y + 1 < h ? k + w : k, x > 0 ? k - 1 : k,
                                 x + 1 < w ? k + 1 : k};
      for (std::size_t q : nb)
        if (fg[q] && !seen[q]) {
          seen[q] = 1;
          stack.push_back(q);
        }
    }
    Color mean{};
    for (std::size_t ch = 0; ch < 3; ++ch) mean[ch] = sum[ch] / static_cast<double>(area);
    const double closeness = std::max(0.0, 1.0 - distance(mean, subject.color) / std::sqrt(3.0));
    const double ratio = static_cast<double>(std::min(area, subject.area)) /
                         static_cast<double>(std::max(area, subject.area));
    best = std::max(best, closeness * ratio);
  }
  return best;
}

std::string manifest_line(const PairMetadata& meta) {
  nlohmann::ordered_json md;
  md["background"] = meta.background;
  md["shape_colors"] = meta.shape_colors;
  if (meta.location) md["location"] = *meta.location;
  if (meta.subject) {
    const SubjectInfo& s = *meta.subject;
    md["subject"] = {{"kind", to_string(s.kind)}, {"color", s.color}, {"size", s.size},
                     {"area", s.area},            {"cy", s.cy},       {"cx", s.cx}};
  }
  nlohmann::ordered_json j;
  j["seed"] = meta.seed;
  j["index"] = meta.index;
  j["task"] = to_string(meta.task);
  j["metadata"] = md;
  return j.dump();
}

}  // namespace omini
