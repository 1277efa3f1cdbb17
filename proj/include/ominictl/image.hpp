#pragma once

#include <cstddef>
#include <iosfwd>
#include <vector>

namespace omini {

// H x W x C image, row-major interleaved channels, values nominally in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t ch) {
    return pixels[(y * width + x) * channels + ch];
  }
  double at(std::size_t y, std::size_t x, std::size_t ch) const {
    return pixels[(y * width + x) * channels + ch];
  }
  bool same_dims(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  friend bool operator==(const Image&, const Image&) = default;
};

// Clamp to [0, 1] in place.
void clamp_unit(Image& img);

// Plain-text portable pixmap (P3, maxval 255). Single-channel images are
// written as gray RGB.
void write_ppm(std::ostream& out, const Image& img);
Image read_ppm(std::istream& in);

}  // namespace omini
