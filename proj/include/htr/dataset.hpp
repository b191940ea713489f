#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "htr/charset.hpp"
#include "htr/image.hpp"
#include "htr/preprocess.hpp"
#include "htr/threading.hpp"
#include "htr/util.hpp"

namespace htr {

struct Sample {
  std::string id;
  std::string image_path;
  std::string transcript;
};

struct Partition {
  std::vector<Sample> train, valid, test;
  CharSet charset;
  std::vector<std::string> diagnostics;  // per-sample problems, already excluded

  std::string size_report() const {
    std::ostringstream ss;
    ss << "train " << train.size() << "  valid " << valid.size() << "  test "
       << test.size() << "  charset " << charset.size();
    if (!diagnostics.empty()) ss << "  excluded " << diagnostics.size();
    return ss.str();
  }
};

// One line per sample: <id> TAB <transcript>. UTF-8, LF endings.
inline std::string format_manifest(const std::vector<Sample>& samples) {
  std::string out;
  for (const Sample& s : samples) {
    out += s.id;
    out += '\t';
    out += s.transcript;
    out += '\n';
  }
  return out;
}

namespace detail {

struct SplitLoad {
  std::vector<Sample> samples;
  std::vector<std::string> diagnostics;
  std::size_t line_count = 0;
};

inline SplitLoad load_manifest(const std::string& dir, const std::string& name) {
  namespace fs = std::filesystem;
  const std::string path = dir + "/" + name;
  SplitLoad out;
  for (const std::string& line : split_lines(read_text_file(path))) {
    if (line.empty()) continue;
    ++out.line_count;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos || tab == 0) {
      out.diagnostics.push_back(name + ": malformed line '" + line + "'");
      continue;
    }
    Sample s;
    s.id = line.substr(0, tab);
    s.transcript = line.substr(tab + 1);
    s.image_path = dir + "/images/" + s.id + ".pgm";
    if (!fs::exists(s.image_path)) {
      out.diagnostics.push_back(name + ": missing image for '" + s.id + "'");
      continue;
    }
    out.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

// Reads train.tsv / valid.tsv / test.tsv plus images/<id>.pgm. The charset
// is taken from charset.txt (and wordchars.txt) when present, otherwise
// computed as the codepoint-sorted union of all transcript characters, with
// word characters defaulting to everything except the space. Bad samples
// (malformed line, missing image, duplicate id, character outside a declared
// charset) are excluded with a diagnostic; more than 1% bad fails the load.
inline Partition load_partition(const std::string& dir, std::size_t threads = 1) {
  namespace fs = std::filesystem;
  const char* names[3] = {"train.tsv", "valid.tsv", "test.tsv"};
  detail::SplitLoad loads[3];
  parallel_for(3, threads,
               [&](std::size_t i) { loads[i] = detail::load_manifest(dir, names[i]); });

  Partition part;
  std::size_t total_lines = 0;
  for (const auto& l : loads) total_lines += l.line_count;
  if (total_lines == 0) throw ValidationError(dir + ": manifests are empty");

  // Declared charset wins; otherwise collect the union over good samples.
  std::u32string declared_chars, declared_words;
  const bool have_declared = fs::exists(dir + "/charset.txt");
  if (have_declared) {
    declared_chars = parse_charlist(read_text_file(dir + "/charset.txt"));
    if (fs::exists(dir + "/wordchars.txt"))
      declared_words = parse_charlist(read_text_file(dir + "/wordchars.txt"));
    else
      for (char32_t c : declared_chars)
        if (c != U' ') declared_words.push_back(c);
  }

  std::set<std::string> seen_ids;
  std::set<char32_t> found_chars;
  std::vector<Sample>* dests[3] = {&part.train, &part.valid, &part.test};
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::string& d : loads[i].diagnostics) part.diagnostics.push_back(std::move(d));
    for (Sample& s : loads[i].samples) {
      if (!seen_ids.insert(s.id).second) {
        part.diagnostics.push_back(std::string(names[i]) + ": duplicate id '" + s.id +
                                   "'");
        continue;
      }
      const std::u32string chars = utf8_decode(s.transcript);
      if (have_declared) {
        bool ok = true;
        for (char32_t c : chars)
          if (declared_chars.find(c) == std::u32string::npos) {
            part.diagnostics.push_back(std::string(names[i]) + ": '" + s.id +
                                       "' has a character outside the charset");
            ok = false;
            break;
          }
        if (!ok) continue;
      } else {
        for (char32_t c : chars) found_chars.insert(c);
      }
      dests[i]->push_back(std::move(s));
    }
  }

  if (part.diagnostics.size() * 100 > total_lines)
    throw ValidationError(dir + ": " + std::to_string(part.diagnostics.size()) +
                          " of " + std::to_string(total_lines) +
                          " samples are bad (over 1%)");

  if (have_declared) {
    part.charset = CharSet(declared_chars, declared_words);
  } else {
    std::u32string chars(found_chars.begin(), found_chars.end());
    if (chars.empty()) throw ValidationError(dir + ": no transcript characters found");
    std::u32string words;
    for (char32_t c : chars)
      if (c != U' ') words.push_back(c);
    part.charset = CharSet(chars, words);
  }
  return part;
}

// ---------------------------------------------------------------------------
// Training-time augmentation

struct AugmentParams {
  double rotate_deg = 0.0;  // counterclockwise, small
  double scale = 1.0;
  bool erode = false;   // thins ink strokes
  bool dilate = false;  // thickens ink strokes
  int dx = 0, dy = 0;   // whole-pixel displacement
};

// Magnitudes are deliberately small; the draw order below is part of the
// determinism contract, so keep it stable.
inline AugmentParams draw_augment_params(Rng& rng) {
  AugmentParams p;
  p.rotate_deg = rng.range(-2.0, 2.0);
  p.scale = rng.range(0.95, 1.05);
  p.erode = rng.coin(0.5);
  p.dilate = rng.coin(0.5);
  p.dx = static_cast<int>(rng.index(5)) - 2;
  p.dy = static_cast<int>(rng.index(5)) - 2;
  return p;
}

namespace detail {

inline double bilinear_sample(const GrayImage& img, double sy, double sx) {
  const auto px = [&](long y, long x) -> double {
    if (y < 0 || x < 0 || y >= static_cast<long>(img.height) ||
        x >= static_cast<long>(img.width))
      return 255.0;
    return img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  };
  const long y0 = static_cast<long>(std::floor(sy));
  const long x0 = static_cast<long>(std::floor(sx));
  const double fy = sy - static_cast<double>(y0);
  const double fx = sx - static_cast<double>(x0);
  const double top = (1.0 - fx) * px(y0, x0) + fx * px(y0, x0 + 1);
  const double bot = (1.0 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1);
  return (1.0 - fy) * top + fy * bot;
}

// Rotation + uniform scale about the image center on a fixed canvas,
// bilinear resampling against the inverse map. The identity parameters
// reproduce the input exactly: every source coordinate lands on an integer.
inline GrayImage rotate_scale(const GrayImage& img, double deg, double scale) {
  const double th = deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double cy = (static_cast<double>(img.height) - 1.0) / 2.0;
  const double cx = (static_cast<double>(img.width) - 1.0) / 2.0;
  GrayImage out(img.height, img.width, 255);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double ox = static_cast<double>(x) - cx;
      const double oy = static_cast<double>(y) - cy;
      const double sx = cx + (c * ox + s * oy) / scale;
      const double sy = cy + (-s * ox + c * oy) / scale;
      const double v = bilinear_sample(img, sy, sx);
      out.at(y, x) = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  return out;
}

inline GrayImage displace(const GrayImage& img, int dx, int dy) {
  GrayImage out(img.height, img.width, 255);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const long sy = static_cast<long>(y) - dy;
      const long sx = static_cast<long>(x) - dx;
      if (sy >= 0 && sx >= 0 && sy < static_cast<long>(img.height) &&
          sx < static_cast<long>(img.width))
        out.at(y, x) = img.at(static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
    }
  return out;
}

inline bool has_ink(const GrayImage& img) {
  for (std::uint8_t v : img.data)
    if (v < 128) return true;
  return false;
}

}  // namespace detail

// Geometry first (one resample), then morphology, then displacement. If the
// combination wipes out every ink pixel the input is returned unchanged, so
// augmentation never hands the trainer an all-background image.
inline GrayImage augment_with_params(const GrayImage& img, const AugmentParams& p) {
  GrayImage out = detail::rotate_scale(img, p.rotate_deg, p.scale);
  if (p.erode) out = detail::local_max(out, 3);
  if (p.dilate) out = detail::local_min(out, 3);
  if (p.dx != 0 || p.dy != 0) out = detail::displace(out, p.dx, p.dy);
  if (!detail::has_ink(out) && detail::has_ink(img)) return img;
  return out;
}

inline GrayImage augment(const GrayImage& img, std::uint64_t seed) {
  Rng rng(seed);
  const AugmentParams p = draw_augment_params(rng);
  return augment_with_params(img, p);
}

// ---------------------------------------------------------------------------
// Synthetic micro corpus: 280 rendered lines over {a, b, c, d, space}

constexpr std::size_t kMicroGlyphSize = 16;
constexpr std::size_t kMicroLineHeight = 24;

// Deterministic 16x16 bitmaps with very different shapes, so a plain
// template matcher can read rendered lines back.
inline GrayImage micro_glyph(char32_t ch) {
  GrayImage g(kMicroGlyphSize, kMicroGlyphSize, 255);
  const auto ink = [&](std::size_t y, std::size_t x) { g.at(y, x) = 0; };
  switch (ch) {
    case U'a':  // solid square
      for (std::size_t y = 2; y <= 13; ++y)
        for (std::size_t x = 2; x <= 13; ++x) ink(y, x);
      break;
    case U'b':  // three vertical bars
      for (std::size_t y = 2; y <= 13; ++y)
        for (std::size_t x = 2; x <= 13; ++x)
          if (((x - 2) / 2) % 2 == 0) ink(y, x);
      break;
    case U'c':  // three horizontal bars
      for (std::size_t y = 2; y <= 13; ++y)
        for (std::size_t x = 2; x <= 13; ++x)
          if (((y - 2) / 2) % 2 == 0) ink(y, x);
      break;
    case U'd':  // diagonal cross
      for (std::size_t y = 2; y <= 13; ++y)
        for (std::size_t x = 2; x <= 13; ++x) {
          const long a = static_cast<long>(x) - static_cast<long>(y);
          const long b = static_cast<long>(x) + static_cast<long>(y) - 15;
          if (a >= -1 && a <= 1) ink(y, x);
          if (b >= -1 && b <= 1) ink(y, x);
        }
      break;
    case U' ':
      break;
    default:
      throw ValidationError("micro_glyph: unsupported character");
  }
  return g;
}

// 24 distinct words over the 4-letter alphabet; every one appears in the
// training transcripts, so a lexicon built from the training corpus covers
// the validation and test splits too.
inline const std::vector<std::string>& micro_word_pool() {
  static const std::vector<std::string> pool = {
      "a",    "b",    "c",    "d",     //
      "ab",   "ba",   "cd",   "dc",   "ac",  "ca",  "bd",  "db",  //
      "abc",  "bcd",  "cda",  "dab",  "acb", "bdc", "cad", "dba",  //
      "abcd", "bcda", "cdab", "dabc",
  };
  return pool;
}

// Letters advance 16 px plus a 0..2 px gap; a space advances 16..20 px with
// no glyph, leaving a hole several times wider than any letter gap. Vertical
// jitter is +-2 px on a 24 px canvas.
inline GrayImage render_micro_line(const std::string& transcript, Rng& rng) {
  struct Placement {
    char32_t ch;
    std::size_t x, y;
  };
  std::vector<Placement> placed;
  std::size_t x = 4;
  for (char32_t ch : utf8_decode(transcript)) {
    if (ch == U' ') {
      x += kMicroGlyphSize + rng.index(5);
      continue;
    }
    const std::size_t y = 2 + rng.index(5);
    placed.push_back({ch, x, y});
    x += kMicroGlyphSize + rng.index(3);
  }
  if (placed.empty())
    throw ValidationError("render_micro_line: transcript has no letters");
  const std::size_t width = placed.back().x + kMicroGlyphSize + 4;
  GrayImage img(kMicroLineHeight, width, 255);
  for (const Placement& p : placed) {
    const GrayImage glyph = micro_glyph(p.ch);
    for (std::size_t gy = 0; gy < kMicroGlyphSize; ++gy)
      for (std::size_t gx = 0; gx < kMicroGlyphSize; ++gx)
        if (glyph.at(gy, gx) == 0) img.at(p.y + gy, p.x + gx) = 0;
  }
  return img;
}

// Writes a complete load_partition-shaped corpus: 200/40/40 samples,
// transcripts of 3..12 characters built from the word pool, plus charset
// and word-character files. Same seed, bit-identical corpus.
inline Partition gen_micro_dataset(const std::string& out_dir, std::uint64_t seed) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir + "/images");
  Rng rng(derive_seed(seed, 0x6d696372u));
  const std::vector<std::string>& pool = micro_word_pool();

  const auto make_transcript = [&]() {
    for (;;) {
      const std::size_t n_words = 1 + rng.index(4);
      std::string text;
      for (std::size_t i = 0; i < n_words; ++i) {
        if (i > 0) text += ' ';
        text += pool[rng.index(pool.size())];
      }
      if (text.size() >= 3 && text.size() <= 12) return text;
    }
  };

  const struct {
    const char* name;
    std::size_t count;
  } splits[3] = {{"train", 200}, {"valid", 40}, {"test", 40}};

  for (const auto& split : splits) {
    std::vector<Sample> samples;
    for (std::size_t i = 0; i < split.count; ++i) {
      std::string text;
      if (std::string(split.name) == "train" && i < pool.size()) {
        text = pool[i];
        while (text.size() < 3) {
          text += ' ';
          text += pool[rng.index(pool.size())];
        }
      } else {
        text = make_transcript();
      }
      std::ostringstream id;
      id << split.name << "_" << std::setw(4) << std::setfill('0') << i;
      const GrayImage img = render_micro_line(text, rng);
      write_pgm(out_dir + "/images/" + id.str() + ".pgm", img);
      samples.push_back(Sample{id.str(), "", std::move(text)});
    }
    write_text_file(out_dir + "/" + split.name + ".tsv", format_manifest(samples));
  }
  write_text_file(out_dir + "/charset.txt", format_charlist(U" abcd"));
  write_text_file(out_dir + "/wordchars.txt", format_charlist(U"abcd"));
  return load_partition(out_dir);
}

}  // namespace htr
