#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace htr {

// Contract violations (bad shapes, bad flags, malformed inputs).
struct ValidationError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Failures at run time (I/O, numeric blow-ups).
struct RuntimeFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write file: " + path);
  out << text;
  if (!out) throw RuntimeFailure("write failed: " + path);
}

// Splits on LF, dropping a trailing CR per line. A trailing newline does not
// produce an empty final line.
inline std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      if (!cur.empty() && cur.back() == '\r') cur.pop_back();
      lines.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) {
    if (cur.back() == '\r') cur.pop_back();
    lines.push_back(cur);
  }
  return lines;
}

inline std::vector<std::string> split_ws(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ' ' || c == '\t') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t')) --e;
  return s.substr(b, e - b);
}

// UTF-8 <-> code points. Comparisons and edit distances work on scalar
// values, not bytes. Malformed bytes decode to U+FFFD, one per byte.
inline std::u32string utf8_decode(const std::string& s) {
  std::u32string out;
  std::size_t i = 0;
  const auto bad = [&] { out.push_back(0xFFFD); ++i; };
  while (i < s.size()) {
    unsigned char b0 = s[i];
    if (b0 < 0x80) {
      out.push_back(b0);
      ++i;
    } else if ((b0 >> 5) == 0x6 && i + 1 < s.size() && (s[i + 1] & 0xC0) == 0x80) {
      out.push_back(((b0 & 0x1F) << 6) | (s[i + 1] & 0x3F));
      i += 2;
    } else if ((b0 >> 4) == 0xE && i + 2 < s.size() && (s[i + 1] & 0xC0) == 0x80 &&
               (s[i + 2] & 0xC0) == 0x80) {
      out.push_back(((b0 & 0x0F) << 12) | ((s[i + 1] & 0x3F) << 6) | (s[i + 2] & 0x3F));
      i += 3;
    } else if ((b0 >> 3) == 0x1E && i + 3 < s.size() && (s[i + 1] & 0xC0) == 0x80 &&
               (s[i + 2] & 0xC0) == 0x80 && (s[i + 3] & 0xC0) == 0x80) {
      out.push_back(((b0 & 0x07) << 18) | ((s[i + 1] & 0x3F) << 12) |
                    ((s[i + 2] & 0x3F) << 6) | (s[i + 3] & 0x3F));
      i += 4;
    } else {
      bad();
    }
  }
  return out;
}

inline std::string utf8_encode(char32_t c) {
  std::string out;
  if (c < 0x80) {
    out.push_back(static_cast<char>(c));
  } else if (c < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (c >> 6)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  } else if (c < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (c >> 12)));
    out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (c >> 18)));
    out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
  }
  return out;
}

inline std::string utf8_encode(const std::u32string& s) {
  std::string out;
  for (char32_t c : s) out += utf8_encode(c);
  return out;
}

// Log-domain arithmetic. kLogZero stands in for log(0); log_add is
// log(exp(a) + exp(b)) without leaving the log domain.
constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double log_add(double a, double b) {
  if (a == kLogZero) return b;
  if (b == kLogZero) return a;
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

// Deterministic stream splitting for seeded RNGs: mixes a base seed with
// stream indices (epoch, sample, ...) so draws are independent of thread
// schedule and iteration order. splitmix64 finalizer.
inline std::uint64_t mix_seed(std::uint64_t seed) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

template <typename... Ids>
std::uint64_t derive_seed(std::uint64_t base, Ids... ids) {
  std::uint64_t h = mix_seed(base);
  ((h = mix_seed(h ^ static_cast<std::uint64_t>(ids))), ...);
  return h;
}

// mt19937_64 with hand-built draw methods. The std distributions are
// implementation-defined, so going through fixed bit-level constructions
// keeps every draw reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // uniform in [0, 1), 53-bit resolution
  double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double range(double lo, double hi) { return lo + (hi - lo) * unit(); }

  bool coin(double p) { return unit() < p; }

  // uniform in [0, n), unbiased via rejection
  std::size_t index(std::size_t n) {
    if (n == 0) throw ValidationError("Rng::index on empty range");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t u;
    do {
      u = engine_();
    } while (u >= limit);
    return static_cast<std::size_t>(u % n);
  }

  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = unit();
    } while (u1 <= 0.0);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * unit();
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace htr
