#pragma once

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "htr/util.hpp"

namespace htr {

// Counts from one optimal alignment of a hypothesis against the ground
// truth: substitutions, deletions (extra hypothesis items), insertions
// (missing ground-truth items), and the ground-truth length.
struct EditOps {
  std::size_t subs = 0;
  std::size_t dels = 0;
  std::size_t ins = 0;
  std::size_t gt_len = 0;

  std::size_t total() const { return subs + dels + ins; }
};

// Levenshtein alignment of hyp against gt with unit costs. The op split
// comes from a single traceback; when several moves are optimal the order
// of preference is substitution, then deletion, then insertion.
template <typename Seq>
EditOps edit_distance(const Seq& hyp, const Seq& gt) {
  const std::size_t n = hyp.size(), m = gt.size();
  std::vector<std::size_t> dp((n + 1) * (m + 1));
  const auto idx = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };
  for (std::size_t i = 0; i <= n; ++i) dp[idx(i, 0)] = i;
  for (std::size_t j = 0; j <= m; ++j) dp[idx(0, j)] = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = dp[idx(i - 1, j - 1)] + (hyp[i - 1] == gt[j - 1] ? 0 : 1);
      const std::size_t del = dp[idx(i - 1, j)] + 1;
      const std::size_t ins = dp[idx(i, j - 1)] + 1;
      dp[idx(i, j)] = std::min(sub, std::min(del, ins));
    }

  EditOps ops;
  ops.gt_len = m;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 &&
        dp[idx(i, j)] == dp[idx(i - 1, j - 1)] + (hyp[i - 1] == gt[j - 1] ? 0 : 1)) {
      if (hyp[i - 1] != gt[j - 1]) ++ops.subs;
      --i;
      --j;
    } else if (i > 0 && dp[idx(i, j)] == dp[idx(i - 1, j)] + 1) {
      ++ops.dels;
      --i;
    } else {
      ++ops.ins;
      --j;
    }
  }
  return ops;
}

inline EditOps char_ops(const std::string& gt, const std::string& hyp) {
  return edit_distance(utf8_decode(hyp), utf8_decode(gt));
}

inline EditOps word_ops(const std::string& gt, const std::string& hyp) {
  return edit_distance(split_ws(hyp), split_ws(gt));
}

// Character error rate relative to the ground-truth length; may exceed 1.
inline double cer(const std::string& gt, const std::string& hyp) {
  const EditOps ops = char_ops(gt, hyp);
  if (ops.gt_len == 0) throw ValidationError("cer: empty ground truth");
  return static_cast<double>(ops.total()) / static_cast<double>(ops.gt_len);
}

inline double wer(const std::string& gt, const std::string& hyp) {
  const EditOps ops = word_ops(gt, hyp);
  if (ops.gt_len == 0) throw ValidationError("wer: ground truth has no words");
  return static_cast<double>(ops.total()) / static_cast<double>(ops.gt_len);
}

struct SampleEval {
  std::string id;
  std::string gt;
  std::string hyp;
  bool valid = true;  // false when the ground truth is empty
  EditOps chars;
  EditOps words;

  double cer() const {
    return static_cast<double>(chars.total()) / static_cast<double>(chars.gt_len);
  }
  double wer() const {
    return static_cast<double>(words.total()) / static_cast<double>(words.gt_len);
  }
};

inline SampleEval evaluate_sample(std::string id, std::string gt, std::string hyp) {
  SampleEval s;
  s.id = std::move(id);
  s.gt = std::move(gt);
  s.hyp = std::move(hyp);
  s.chars = char_ops(s.gt, s.hyp);
  s.words = word_ops(s.gt, s.hyp);
  s.valid = s.chars.gt_len > 0 && s.words.gt_len > 0;
  return s;
}

struct EvalReport {
  std::vector<SampleEval> samples;
  std::size_t valid_count = 0;
  std::size_t excluded_count = 0;
  std::uint64_t char_errors = 0, char_total = 0;
  std::uint64_t word_errors = 0, word_total = 0;

  // Micro-averages: total ops over total ground-truth length.
  double cer() const {
    return static_cast<double>(char_errors) / static_cast<double>(char_total);
  }
  double wer() const {
    return static_cast<double>(word_errors) / static_cast<double>(word_total);
  }
};

inline EvalReport aggregate(std::vector<SampleEval> samples) {
  EvalReport r;
  r.samples = std::move(samples);
  for (const SampleEval& s : r.samples) {
    if (!s.valid) {
      ++r.excluded_count;
      continue;
    }
    ++r.valid_count;
    r.char_errors += s.chars.total();
    r.char_total += s.chars.gt_len;
    r.word_errors += s.words.total();
    r.word_total += s.words.gt_len;
  }
  if (r.valid_count == 0)
    throw ValidationError("aggregate: no valid samples (all ground truths empty)");
  return r;
}

inline std::string format_eval_report(const EvalReport& r) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(4);
  ss << "samples " << r.valid_count;
  if (r.excluded_count > 0) ss << " (excluded " << r.excluded_count << ")";
  ss << "\n";
  ss << "CER " << 100.0 * r.cer() << "%  (" << r.char_errors << "/" << r.char_total
     << ")\n";
  ss << "WER " << 100.0 * r.wer() << "%  (" << r.word_errors << "/" << r.word_total
     << ")\n";
  return ss.str();
}

// One line per sample: id, gt, hyp, char ops as S:D:I, then CER and WER.
inline std::string format_sample_lines(const EvalReport& r) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(4);
  for (const SampleEval& s : r.samples) {
    if (!s.valid) {
      ss << s.id << "\t" << s.gt << "\t" << s.hyp << "\tERROR empty ground truth\n";
      continue;
    }
    ss << s.id << "\t" << s.gt << "\t" << s.hyp << "\t" << s.chars.subs << ":"
       << s.chars.dels << ":" << s.chars.ins << "\t" << s.cer() << "\t" << s.wer()
       << "\n";
  }
  return ss.str();
}

// ---------------------------------------------------------------------------
// One-way ANOVA over k independent groups

// Regularized incomplete beta function I_x(a, b), evaluated with the
// continued-fraction expansion (modified Lentz iteration).
namespace detail {

inline double beta_continued_fraction(double a, double b, double x) {
  constexpr double eps = 3e-14, fpmin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) return h;
  }
  throw RuntimeFailure("incomplete beta: continued fraction did not converge");
}

}  // namespace detail

inline double reg_inc_beta(double a, double b, double x) {
  if (!(a > 0) || !(b > 0)) throw ValidationError("reg_inc_beta: a, b must be > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw ValidationError("reg_inc_beta: x outside [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double bt = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                             a * std::log(x) + b * std::log1p(-x));
  if (x < (a + 1.0) / (a + b + 2.0))
    return bt * detail::beta_continued_fraction(a, b, x) / a;
  return 1.0 - bt * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

// Upper tail of the F distribution: P(F_{d1,d2} > f).
inline double f_upper_tail(double f, double d1, double d2) {
  if (!(f >= 0)) throw ValidationError("f_upper_tail: F must be >= 0");
  return reg_inc_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f));
}

struct AnovaResult {
  double f = 0.0;
  double p = 1.0;
  std::size_t df_between = 0;
  std::size_t df_within = 0;
  std::vector<double> group_means;
  bool degenerate = false;  // within-group variance was exactly zero
};

inline AnovaResult anova_one_way(const std::vector<std::vector<double>>& groups) {
  if (groups.size() < 2) throw ValidationError("anova: needs at least 2 groups");
  std::size_t n = 0;
  double grand_sum = 0.0;
  for (const auto& g : groups) {
    if (g.size() < 2)
      throw ValidationError("anova: every group needs at least 2 measurements");
    n += g.size();
    for (double v : g) grand_sum += v;
  }
  const double grand_mean = grand_sum / static_cast<double>(n);

  AnovaResult r;
  r.df_between = groups.size() - 1;
  r.df_within = n - groups.size();
  double ssb = 0.0, ssw = 0.0;
  for (const auto& g : groups) {
    double mean = 0.0;
    for (double v : g) mean += v;
    mean /= static_cast<double>(g.size());
    r.group_means.push_back(mean);
    ssb += static_cast<double>(g.size()) * (mean - grand_mean) * (mean - grand_mean);
    for (double v : g) ssw += (v - mean) * (v - mean);
  }
  if (ssw == 0.0) {
    r.degenerate = true;
    r.f = std::numeric_limits<double>::infinity();
    r.p = 0.0;
    return r;
  }
  const double msb = ssb / static_cast<double>(r.df_between);
  const double msw = ssw / static_cast<double>(r.df_within);
  r.f = msb / msw;
  r.p = f_upper_tail(r.f, static_cast<double>(r.df_between),
                     static_cast<double>(r.df_within));
  return r;
}

inline std::string format_anova(const AnovaResult& r) {
  std::ostringstream ss;
  ss << std::setprecision(6);
  if (r.degenerate) {
    ss << "ANOVA degenerate: zero within-group variance\n";
    return ss.str();
  }
  ss << "F(" << r.df_between << ", " << r.df_within << ") = " << r.f
     << "  p = " << r.p << "\n";
  ss << "group means:";
  for (double m : r.group_means) ss << " " << m;
  ss << "\n";
  ss << "H0 (all group means equal) " << (r.p < 0.05 ? "rejected" : "not rejected")
     << " at the 5% level\n";
  return ss.str();
}

}  // namespace htr
