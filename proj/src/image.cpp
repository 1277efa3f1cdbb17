#include "ominictl/image.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "ominictl/errors.hpp"

namespace omini {

void clamp_unit(Image& img) {
  for (double& v : img.pixels) v = std::clamp(v, 0.0, 1.0);
}

void write_ppm(std::ostream& out, const Image& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw DimensionError("ppm: 1 or 3 channels required");
  }
  std::ostringstream os;
  os << "P3\n" << img.width << ' ' << img.height << "\n255\n";
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = img.at(y, x, img.channels == 1 ? 0 : c);
        const long q = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
        os << q << (c == 2 ? (x + 1 == img.width ? "\n" : "  ") : " ");
      }
    }
  }
  out << os.str();
}

Image read_ppm(std::istream& in) {
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  if (!(in >> magic) || magic != "P3") throw FormatError("ppm: expected P3 header");
  if (!(in >> w >> h >> maxval) || maxval == 0) throw FormatError("ppm: bad header");
  Image img(h, w, 3);
  for (double& v : img.pixels) {
    long q = 0;
    if (!(in >> q)) throw FormatError("ppm: truncated pixel data");
    v = static_cast<double>(q) / static_cast<double>(maxval);
  }
  return img;
}

}  // namespace omini
