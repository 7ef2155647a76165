#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "stav/error.hpp"

namespace stav {

// Binary 8-bit PGM (P5). pixels are row-major in [0,1]; stored value is
// round(255 * v) clamped to [0,255].
inline void write_pgm(const std::string& path, int width, int height, const std::vector<double>& pixels) {
  if (static_cast<std::size_t>(width) * height != pixels.size()) throw usage_error("write_pgm: pixel count mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw usage_error("write_pgm: cannot open " + path);
  f << "P5\n" << width << " " << height << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(width));
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double v = pixels[static_cast<std::size_t>(y) * width + x];
      long q = std::lround(255.0 * v);
      row[static_cast<std::size_t>(x)] = static_cast<unsigned char>(q < 0 ? 0 : (q > 255 ? 255 : q));
    }
    f.write(reinterpret_cast<const char*>(row.data()), width);
  }
  if (!f) throw usage_error("write_pgm: write failed for " + path);
}

struct PgmImage {
  int width = 0, height = 0;
  std::vector<unsigned char> pixels;
};

inline PgmImage read_pgm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw usage_error("read_pgm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P5") throw usage_error("read_pgm: not a P5 file: " + path);
  PgmImage img;
  int maxval = 0;
  f >> img.width >> img.height >> maxval;
  if (maxval != 255) throw usage_error("read_pgm: expected maxval 255");
  f.get();  // single whitespace after header
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  f.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw usage_error("read_pgm: truncated file " + path);
  return img;
}

}  // namespace stav
