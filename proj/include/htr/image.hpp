#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "htr/util.hpp"

namespace htr {

// 8-bit grayscale raster, row-major, 0 = black ink, 255 = white paper.
struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w, std::uint8_t fill = 255)
      : height(h), width(w), data(h * w, fill) {
    if (h < 1 || w < 1) throw ValidationError("image dims must be >= 1");
  }

  std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }
  std::size_t size() const { return data.size(); }
};

// Bi-level raster; 1 = foreground (ink), 0 = background.
struct BinaryImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;

  BinaryImage() = default;
  BinaryImage(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), data(h * w, fill) {
    if (h < 1 || w < 1) throw ValidationError("image dims must be >= 1");
  }

  std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * width + x]; }

  std::size_t foreground_count() const {
    std::size_t n = 0;
    for (auto v : data) n += v;
    return n;
  }

  GrayImage to_gray() const {
    GrayImage g(height, width);
    for (std::size_t i = 0; i < data.size(); ++i) g.data[i] = data[i] ? 0 : 255;
    return g;
  }
};

inline BinaryImage binary_from_gray(const GrayImage& g, std::uint8_t threshold = 128) {
  BinaryImage b(g.height, g.width);
  for (std::size_t i = 0; i < g.data.size(); ++i) b.data[i] = g.data[i] < threshold ? 1 : 0;
  return b;
}

// PGM "P5" (binary, maxval <= 255). The one raster format the toolkit
// requires; it keeps fixtures hand-checkable.
inline GrayImage read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("cannot open PGM: " + path);

  auto next_token = [&in, &path]() {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
      if (c == '#') {
        while ((c = in.get()) != EOF && c != '\n') {}
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw RuntimeFailure("truncated PGM header: " + path);
    return tok;
  };

  if (next_token() != "P5") throw RuntimeFailure("not a P5 PGM: " + path);
  const long w = std::stol(next_token());
  const long h = std::stol(next_token());
  const long maxval = std::stol(next_token());
  if (w < 1 || h < 1) throw RuntimeFailure("bad PGM dims: " + path);
  if (maxval < 1 || maxval > 255)
    throw RuntimeFailure("unsupported PGM maxval (need <= 255): " + path);

  GrayImage img(static_cast<std::size_t>(h), static_cast<std::size_t>(w));
  in.read(reinterpret_cast<char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.data.size()))
    throw RuntimeFailure("truncated PGM pixel data: " + path);
  if (maxval != 255) {
    for (auto& v : img.data)
      v = static_cast<std::uint8_t>((v * 255 + maxval / 2) / maxval);
  }
  return img;
}

inline void write_pgm(const std::string& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write PGM: " + path);
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data.data()),
            static_cast<std::streamsize>(img.data.size()));
  if (!out) throw RuntimeFailure("PGM write failed: " + path);
}

inline void write_pgm(const std::string& path, const BinaryImage& img) {
  write_pgm(path, img.to_gray());
}

}  // namespace htr
