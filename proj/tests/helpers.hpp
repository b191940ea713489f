#pragma once

// Shared brute-force oracles and finite-difference machinery for the test
// suites. Everything here recomputes results from first principles, without
// reusing the optimized code paths under test.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "htr/htr.hpp"

namespace oracle {

// ---------------------------------------------------------------------------
// Random test data

inline htr::Tensor random_tensor(const std::vector<std::size_t>& shape, htr::Rng& rng,
                                 double lo = -1.0, double hi = 1.0) {
  htr::Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t.raw()[i] = rng.range(lo, hi);
  return t;
}

// Rows are softmax draws, so they are strictly positive and sum to 1.
inline htr::Tensor random_prob_matrix(std::size_t T, std::size_t K, htr::Rng& rng,
                                      double spread = 4.0) {
  htr::Tensor logits({T, K});
  for (std::size_t i = 0; i < logits.size(); ++i) logits.raw()[i] = rng.range(-spread, spread);
  return htr::softmax_rows(logits);
}

// ---------------------------------------------------------------------------
// Finite differences. Central difference per parameter element, compared at
// |analytic - numeric| <= max(1e-6, 1e-4 * max(|analytic|, |numeric|)).

struct FdReport {
  double worst_ratio = 0.0;  // error over tolerance; <= 1 passes
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;

  bool pass() const { return worst_ratio <= 1.0; }
};

template <typename LossFn>
void fd_accumulate(htr::Tensor& param, const htr::Tensor& analytic, LossFn&& loss,
                   FdReport& rep, double eps = 1e-5, std::size_t stride = 1) {
  if (!param.same_shape(analytic)) throw htr::ValidationError("fd: shape mismatch");
  for (std::size_t i = 0; i < param.size(); i += stride) {
    const double keep = param.raw()[i];
    param.raw()[i] = keep + eps;
    const double lp = loss();
    param.raw()[i] = keep - eps;
    const double lm = loss();
    param.raw()[i] = keep;
    const double num = (lp - lm) / (2.0 * eps);
    const double ana = analytic.raw()[i];
    const double err = std::abs(num - ana);
    const double tol = std::max(1e-6, 1e-4 * std::max(std::abs(num), std::abs(ana)));
    rep.checked += 1;
    if (err / tol > rep.worst_ratio) {
      rep.worst_ratio = err / tol;
      rep.worst_index = i;
      rep.analytic = ana;
      rep.numeric = num;
    }
  }
}

template <typename LossFn>
FdReport fd_check(htr::Tensor& param, const htr::Tensor& analytic, LossFn&& loss,
                  double eps = 1e-5, std::size_t stride = 1) {
  FdReport rep;
  fd_accumulate(param, analytic, loss, rep, eps, stride);
  return rep;
}

// Scalar projection of a tensor against fixed coefficients; turns any output
// into a single differentiable loss whose output-side gradient is `coeff`.
inline double project(const htr::Tensor& out, const htr::Tensor& coeff) {
  if (!out.same_shape(coeff)) throw htr::ValidationError("project: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out.raw()[i] * coeff.raw()[i];
  return s;
}

// ---------------------------------------------------------------------------
// Direct convolution oracles: explicit loops over the unpadded input with
// zero contributions outside, top/left pad = total_pad / 2.

inline htr::Tensor naive_conv2d(const htr::ConvLayer& l, const htr::Tensor& x) {
  const htr::ConvGeometry& g = l.geom;
  const long pt = static_cast<long>(g.pad_h() / 2), pl = static_cast<long>(g.pad_w() / 2);
  htr::Tensor out({g.out_h(), g.out_w(), g.out_ch});
  for (std::size_t oy = 0; oy < g.out_h(); ++oy)
    for (std::size_t ox = 0; ox < g.out_w(); ++ox)
      for (std::size_t n = 0; n < g.out_ch; ++n) {
        double acc = l.bias.raw()[n];
        for (std::size_t ky = 0; ky < g.kh; ++ky)
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const long iy = static_cast<long>(oy * g.sh + ky) - pt;
            const long ix = static_cast<long>(ox * g.sw + kx) - pl;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.in_h) ||
                ix >= static_cast<long>(g.in_w))
              continue;
            for (std::size_t m = 0; m < g.in_ch; ++m)
              acc += x.at(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), m) *
                     l.weight.at(ky, kx, m, n);
          }
        out.at(oy, ox, n) = acc;
      }
  return out;
}

inline htr::Tensor naive_dwsep(const htr::DWSepConvLayer& l, const htr::Tensor& x) {
  const htr::ConvGeometry& g = l.geom;
  const long pt = static_cast<long>(g.pad_h() / 2), pl = static_cast<long>(g.pad_w() / 2);
  htr::Tensor mid({g.out_h(), g.out_w(), g.in_ch});
  for (std::size_t oy = 0; oy < g.out_h(); ++oy)
    for (std::size_t ox = 0; ox < g.out_w(); ++ox)
      for (std::size_t m = 0; m < g.in_ch; ++m) {
        double acc = l.depth_bias.raw()[m];
        for (std::size_t ky = 0; ky < g.kh; ++ky)
          for (std::size_t kx = 0; kx < g.kw; ++kx) {
            const long iy = static_cast<long>(oy * g.sh + ky) - pt;
            const long ix = static_cast<long>(ox * g.sw + kx) - pl;
            if (iy < 0 || ix < 0 || iy >= static_cast<long>(g.in_h) ||
                ix >= static_cast<long>(g.in_w))
              continue;
            acc += x.at(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), m) *
                   l.depth_weight.at(ky, kx, m);
          }
        mid.at(oy, ox, m) = acc;
      }
  htr::Tensor out({g.out_h(), g.out_w(), g.out_ch});
  for (std::size_t oy = 0; oy < g.out_h(); ++oy)
    for (std::size_t ox = 0; ox < g.out_w(); ++ox)
      for (std::size_t n = 0; n < g.out_ch; ++n) {
        double acc = l.point_bias.raw()[n];
        for (std::size_t m = 0; m < g.in_ch; ++m)
          acc += mid.at(oy, ox, m) * l.point_weight.at(m, n);
        out.at(oy, ox, n) = acc;
      }
  return out;
}

inline htr::Tensor naive_gated(const htr::GatedConvLayer& l, const htr::Tensor& x) {
  const htr::Tensor f = naive_conv2d(l.feature, x);
  const htr::Tensor g = naive_conv2d(l.gate, x);
  htr::Tensor out(f.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out.raw()[i] = f.raw()[i] * (1.0 / (1.0 + std::exp(-g.raw()[i])));
  return out;
}

inline htr::ConvLayer make_conv(const htr::ConvGeometry& g, htr::Rng& rng) {
  htr::ConvLayer l;
  l.geom = g;
  l.weight = random_tensor({g.kh, g.kw, g.in_ch, g.out_ch}, rng);
  l.bias = random_tensor({g.out_ch}, rng);
  return l;
}

inline htr::DWSepConvLayer make_dwsep(const htr::ConvGeometry& g, htr::Rng& rng) {
  htr::DWSepConvLayer l;
  l.geom = g;
  l.depth_weight = random_tensor({g.kh, g.kw, g.in_ch}, rng);
  l.depth_bias = random_tensor({g.in_ch}, rng);
  l.point_weight = random_tensor({g.in_ch, g.out_ch}, rng);
  l.point_bias = random_tensor({g.out_ch}, rng);
  return l;
}

inline htr::GatedConvLayer make_gated(const htr::ConvGeometry& g, htr::Rng& rng) {
  htr::ConvGeometry g1 = g;
  g1.sh = 1;
  g1.sw = 1;
  return htr::GatedConvLayer{make_conv(g1, rng), make_conv(g1, rng)};
}

// ---------------------------------------------------------------------------
// CTC by path enumeration: walk every length-T path through the K symbols,
// collapse repeats, drop blanks, and sum the probability of paths matching
// the label. Usable only at desk scale (K^T paths).

inline std::vector<std::size_t> collapse_path(const std::vector<std::size_t>& path,
                                              std::size_t blank) {
  std::vector<std::size_t> out;
  std::size_t prev = static_cast<std::size_t>(-1);
  for (std::size_t s : path) {
    if (s != prev && s != blank) out.push_back(s);
    prev = s;
  }
  return out;
}

inline double ctc_enumerate_loss(const htr::Tensor& probs,
                                 const std::vector<std::size_t>& label) {
  const std::size_t T = probs.dim(0), K = probs.dim(1), blank = K - 1;
  if (T == 0) return label.empty() ? 0.0 : std::numeric_limits<double>::infinity();
  std::vector<std::size_t> path(T, 0);
  double total = 0.0;
  while (true) {
    double p = 1.0;
    for (std::size_t t = 0; t < T; ++t)
      p *= std::max(probs.at(t, path[t]), htr::kProbFloor);
    if (collapse_path(path, blank) == label) total += p;
    std::size_t pos = 0;
    while (pos < T && ++path[pos] == K) {
      path[pos] = 0;
      ++pos;
    }
    if (pos == T) break;
  }
  if (total <= 0.0) return std::numeric_limits<double>::infinity();
  return -std::log(total);
}

// ---------------------------------------------------------------------------
// Exhaustive lexicon-constrained decoding. Enumerates every string of length
// <= T whose maximal wordchar runs follow the prefix tree and whose nonword
// characters appear only between words, computes each string's exact path
// mass with the forward algorithm, applies the same end-of-input completion
// contract as the decoder, merges masses by final text, and ranks by
// mass + LM / max(1, words) with lexicographic tie-breaks.

struct WbsOracleOutcome {
  std::string text;
  double score = htr::kLogZero;
};

namespace detail {

inline void enumerate_constrained(const htr::CharSet& charset, const htr::PrefixTree& tree,
                                  std::size_t max_len, std::u32string& cur,
                                  std::size_t node,
                                  std::vector<std::pair<std::u32string, std::size_t>>& out) {
  out.emplace_back(cur, node);
  if (cur.size() == max_len) return;
  for (std::size_t k = 0; k < charset.size(); ++k) {
    const char32_t c = charset.at(k);
    if (charset.is_wordchar(c)) {
      const std::size_t from = node == htr::PrefixTree::npos ? tree.root() : node;
      const std::size_t ch = tree.child(from, c);
      if (ch == htr::PrefixTree::npos) continue;
      cur.push_back(c);
      enumerate_constrained(charset, tree, max_len, cur, ch, out);
      cur.pop_back();
    } else {
      if (node != htr::PrefixTree::npos && !tree.word_end(node)) continue;
      cur.push_back(c);
      enumerate_constrained(charset, tree, max_len, cur, htr::PrefixTree::npos, out);
      cur.pop_back();
    }
  }
}

inline std::u32string trailing_word(const std::u32string& text, const htr::CharSet& charset) {
  std::size_t i = text.size();
  while (i > 0 && charset.is_wordchar(text[i - 1])) --i;
  return text.substr(i);
}

}  // namespace detail

inline double lm_chain_score(const std::u32string& text, const htr::CharSet& charset,
                             const htr::WordLM& lm, htr::WbsMode mode, std::size_t& words_out) {
  const auto words = htr::tokenize_words(text, charset);
  words_out = words.size();
  if (mode == htr::WbsMode::Words) return 0.0;
  double total = 0.0;
  std::u32string prev = htr::WordLM::start_token();
  for (const std::u32string& w : words) {
    total += lm.log_bigram(prev, w);
    prev = w;
  }
  return total;
}

inline WbsOracleOutcome wbs_exhaustive(const htr::Tensor& probs, const htr::PrefixTree& tree,
                                       const htr::WordLM& lm, const htr::CharSet& charset,
                                       htr::WbsMode mode) {
  const std::size_t T = probs.dim(0);
  std::vector<std::pair<std::u32string, std::size_t>> states;
  std::u32string cur;
  detail::enumerate_constrained(charset, tree, T, cur, htr::PrefixTree::npos, states);

  std::map<std::u32string, double> final_mass;
  for (const auto& [text, node] : states) {
    std::vector<std::size_t> label;
    label.reserve(text.size());
    for (char32_t c : text) label.push_back(charset.index_of(c));
    const htr::CtcLoss res = htr::ctc_loss(probs, label);
    if (!res.feasible) continue;
    const double mass = std::exp(-res.value);

    std::u32string final_text = text;
    if (node != htr::PrefixTree::npos && !tree.word_end(node)) {
      const std::u32string partial = detail::trailing_word(text, charset);
      const auto suffixes = tree.suffixes_below(node);
      std::u32string best;
      double best_score = htr::kLogZero;
      bool first = true;
      for (const std::u32string& suf : suffixes) {
        const double s = lm.log_unigram(partial + suf);
        if (first || s > best_score) {
          best = suf;
          best_score = s;
          first = false;
        }
      }
      final_text += best;
    }
    final_mass[final_text] += mass;
  }

  WbsOracleOutcome best;
  bool have = false;
  for (const auto& [text, mass] : final_mass) {
    if (mass <= 0.0) continue;
    std::size_t words = 0;
    const double lm_total = lm_chain_score(text, charset, lm, mode, words);
    const double score =
        std::log(mass) + lm_total / static_cast<double>(std::max<std::size_t>(1, words));
    const std::string utf8 = htr::utf8_encode(text);
    if (!have || score > best.score || (score == best.score && utf8 < best.text)) {
      best.text = utf8;
      best.score = score;
      have = true;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Plain Levenshtein distance, no traceback: independent check of the edit
// operation totals.

template <typename Seq>
std::size_t levenshtein(const Seq& a, const Seq& b) {
  const std::size_t n = a.size(), m = b.size();
  std::vector<std::size_t> prev(m + 1), curr(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
  for (std::size_t i = 1; i <= n; ++i) {
    curr[0] = i;
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      curr[j] = std::min({sub, prev[j] + 1, curr[j - 1] + 1});
    }
    std::swap(prev, curr);
  }
  return prev[m];
}

// ---------------------------------------------------------------------------
// Regularized incomplete beta by adaptive Simpson quadrature on the defining
// integral. Valid for a >= 1 (no singularity at 0) and x < 1.

namespace detail {

inline double simpson_rec(const std::function<double(double)>& f, double lo, double hi,
                          double flo, double fmid, double fhi, double whole, double tol,
                          int depth) {
  const double mid = 0.5 * (lo + hi);
  const double lmid = 0.5 * (lo + mid), rmid = 0.5 * (mid + hi);
  const double fl = f(lmid), fr = f(rmid);
  const double left = (mid - lo) / 6.0 * (flo + 4.0 * fl + fmid);
  const double right = (hi - mid) / 6.0 * (fmid + 4.0 * fr + fhi);
  if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * tol)
    return left + right + (left + right - whole) / 15.0;
  return simpson_rec(f, lo, mid, flo, fl, fmid, left, tol / 2.0, depth - 1) +
         simpson_rec(f, mid, hi, fmid, fr, fhi, right, tol / 2.0, depth - 1);
}

}  // namespace detail

inline double betainc_quadrature(double a, double b, double x) {
  if (a < 1.0) throw htr::ValidationError("quadrature oracle needs a >= 1");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const std::function<double(double)> f = [a, b](double t) {
    return std::pow(t, a - 1.0) * std::pow(1.0 - t, b - 1.0);
  };
  const double mid = 0.5 * x;
  const double flo = f(0.0), fmid = f(mid), fhi = f(x);
  const double whole = x / 6.0 * (flo + 4.0 * fmid + fhi);
  const double integral =
      detail::simpson_rec(f, 0.0, x, flo, fmid, fhi, whole, 1e-14, 60);
  const double log_beta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  return integral / std::exp(log_beta);
}

// One-way F statistic straight from the textbook sums-of-squares identities,
// using group totals rather than means.
inline double anova_f_direct(const std::vector<std::vector<double>>& groups) {
  double grand = 0.0, sq = 0.0;
  std::size_t n = 0;
  double between = 0.0;
  for (const auto& g : groups) {
    double t = 0.0;
    for (double v : g) {
      t += v;
      sq += v * v;
    }
    grand += t;
    n += g.size();
    between += t * t / static_cast<double>(g.size());
  }
  const double correction = grand * grand / static_cast<double>(n);
  const double ssb = between - correction;
  const double ssw = sq - between;
  const double df_b = static_cast<double>(groups.size() - 1);
  const double df_w = static_cast<double>(n - groups.size());
  return (ssb / df_b) / (ssw / df_w);
}

// ---------------------------------------------------------------------------
// Reference learning-rate plateau trace: replays the observation sequence
// with explicit counters and records which epochs reduce and when it stops.

struct PlateauTrace {
  std::vector<std::size_t> reduce_at;  // 0-based observation indices
  std::size_t stop_at = static_cast<std::size_t>(-1);
  std::vector<bool> improved;
};

inline PlateauTrace simulate_plateau(const std::vector<double>& losses,
                                     std::size_t reduce_tol, std::size_t stop_tol) {
  PlateauTrace trace;
  double best = std::numeric_limits<double>::infinity();
  std::size_t lr_wait = 0, stop_wait = 0;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    if (losses[i] <= best - 1e-6) {
      best = losses[i];
      lr_wait = 0;
      stop_wait = 0;
      trace.improved.push_back(true);
      continue;
    }
    trace.improved.push_back(false);
    ++lr_wait;
    ++stop_wait;
    if (lr_wait >= reduce_tol) {
      trace.reduce_at.push_back(i);
      lr_wait = 0;
    }
    if (stop_wait >= stop_tol) {
      trace.stop_at = i;
      return trace;
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Template-match reading of generated line images. Letters are located by
// segmenting ink columns (gaps of 4 or fewer columns are glyph-internal),
// word boundaries are gaps of 14 or more columns, and each letter box is
// matched pixel for pixel against the glyph set.

inline std::string decode_micro_image(const htr::GrayImage& img) {
  const std::size_t G = htr::kMicroGlyphSize;
  std::vector<bool> has_ink_col(img.width, false);
  for (std::size_t x = 0; x < img.width; ++x)
    for (std::size_t y = 0; y < img.height; ++y)
      if (img.at(y, x) < 128) {
        has_ink_col[x] = true;
        break;
      }

  struct Run {
    std::size_t lo, hi;  // inclusive column span
  };
  std::vector<Run> runs;
  for (std::size_t x = 0; x < img.width; ++x) {
    if (!has_ink_col[x]) continue;
    if (!runs.empty() && x <= runs.back().hi + 4) {
      runs.back().hi = x;
    } else {
      runs.push_back({x, x});
    }
  }

  static const std::u32string letters = U"abcd";
  std::string out;
  for (std::size_t r = 0; r < runs.size(); ++r) {
    if (r > 0 && runs[r].lo - runs[r - 1].hi - 1 >= 14) out.push_back(' ');
    const std::size_t x0 = runs[r].lo >= 2 ? runs[r].lo - 2 : 0;
    std::size_t y_first = img.height;
    for (std::size_t y = 0; y < img.height && y_first == img.height; ++y)
      for (std::size_t x = runs[r].lo; x <= runs[r].hi; ++x)
        if (img.at(y, x) < 128) {
          y_first = y;
          break;
        }
    const std::size_t y0 = y_first >= 2 ? y_first - 2 : 0;

    char matched = '?';
    for (char32_t c : letters) {
      const htr::GrayImage glyph = htr::micro_glyph(c);
      bool same = true;
      for (std::size_t y = 0; y < G && same; ++y)
        for (std::size_t x = 0; x < G && same; ++x) {
          const bool want = glyph.at(y, x) < 128;
          const bool got = y0 + y < img.height && x0 + x < img.width &&
                           img.at(y0 + y, x0 + x) < 128;
          if (want != got) same = false;
        }
      if (same) {
        matched = static_cast<char>(c);
        break;
      }
    }
    out.push_back(matched);
  }
  return out;
}

}  // namespace oracle
