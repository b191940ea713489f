#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "htr/charset.hpp"
#include "htr/tensor.hpp"
#include "htr/util.hpp"

namespace htr {

// Probabilities below this are floored before entering the log domain, so
// the recursions stay NaN-free even on degenerate inputs.
constexpr double kProbFloor = 1e-300;

// A (T, C+1) matrix of per-timestep character probabilities, blank last.
inline void validate_prob_matrix(const Tensor& probs) {
  if (probs.rank() != 2) throw ValidationError("ProbMatrix must be rank 2");
  if (probs.dim(1) < 2) throw ValidationError("ProbMatrix needs at least one character");
  const std::size_t T = probs.dim(0), K = probs.dim(1);
  for (std::size_t t = 0; t < T; ++t) {
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double v = probs.at(t, k);
      if (!(v >= 0.0) || v > 1.0)
        throw ValidationError("ProbMatrix entry out of [0,1] at row " + std::to_string(t));
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw ValidationError("ProbMatrix row " + std::to_string(t) +
                            " does not sum to 1 (got " + std::to_string(sum) + ")");
  }
}

// Shortest path that collapses to the label: one frame per character plus a
// separating blank between equal neighbours. The label is feasible within T
// frames iff this fits.
inline std::size_t ctc_min_frames(const std::vector<std::size_t>& label) {
  std::size_t need = label.size();
  for (std::size_t i = 0; i + 1 < label.size(); ++i)
    if (label[i] == label[i + 1]) ++need;
  return need;
}

struct CtcLoss {
  double value = 0.0;  // -ln P(label | probs)
  bool feasible = true;
  Tensor grad;         // (T, C+1), w.r.t. the pre-softmax logits; zero if infeasible
};

// Forward-backward over the blank-augmented label in log space. The gradient
// uses the softmax+CTC fusion: d/du[t,k] = y[t,k] - G[t,k] / (P * y[t,k])
// with G[t,k] the alpha*beta mass of label positions emitting k at t.
inline CtcLoss ctc_loss(const Tensor& probs, const std::vector<std::size_t>& label) {
  validate_prob_matrix(probs);
  const std::size_t T = probs.dim(0), K = probs.dim(1);
  const std::size_t blank = K - 1;
  for (std::size_t idx : label)
    if (idx >= blank)
      throw ValidationError("label index " + std::to_string(idx) + " out of range");

  CtcLoss out;
  out.grad = Tensor({T, K});
  if (ctc_min_frames(label) > T) {
    out.feasible = false;
    out.value = std::numeric_limits<double>::infinity();
    return out;
  }
  if (T == 0) return out;  // empty label, empty input: probability 1

  const std::size_t L = label.size(), S = 2 * L + 1;
  const auto aug = [&](std::size_t s) { return s % 2 ? label[s / 2] : blank; };

  Tensor lp({T, K});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < K; ++k)
      lp.at(t, k) = std::log(std::max(probs.at(t, k), kProbFloor));

  // skip from s-2 to s is legal only between distinct non-blank characters
  const auto can_skip = [&](std::size_t s) {
    return s % 2 == 1 && s >= 2 && aug(s) != aug(s - 2);
  };

  Tensor alpha({T, S}), beta({T, S});
  alpha.fill(kLogZero);
  beta.fill(kLogZero);

  alpha.at(0, 0) = lp.at(0, blank);
  if (S > 1) alpha.at(0, 1) = lp.at(0, aug(1));
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      double acc = alpha.at(t - 1, s);
      if (s >= 1) acc = log_add(acc, alpha.at(t - 1, s - 1));
      if (can_skip(s)) acc = log_add(acc, alpha.at(t - 1, s - 2));
      alpha.at(t, s) = acc == kLogZero ? kLogZero : acc + lp.at(t, aug(s));
    }

  double log_p = alpha.at(T - 1, S - 1);
  if (S > 1) log_p = log_add(log_p, alpha.at(T - 1, S - 2));
  if (log_p == kLogZero) {
    // unreachable for floored probabilities once the frame check passed,
    // kept as a safety net
    out.feasible = false;
    out.value = std::numeric_limits<double>::infinity();
    return out;
  }
  out.value = -log_p;

  beta.at(T - 1, S - 1) = lp.at(T - 1, blank);
  if (S > 1) beta.at(T - 1, S - 2) = lp.at(T - 1, aug(S - 2));
  for (std::size_t t = T - 1; t-- > 0;)
    for (std::size_t s = 0; s < S; ++s) {
      double acc = beta.at(t + 1, s);
      if (s + 1 < S) acc = log_add(acc, beta.at(t + 1, s + 1));
      if (s + 2 < S && can_skip(s + 2)) acc = log_add(acc, beta.at(t + 1, s + 2));
      beta.at(t, s) = acc == kLogZero ? kLogZero : acc + lp.at(t, aug(s));
    }

  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> log_g(K, kLogZero);
    for (std::size_t s = 0; s < S; ++s) {
      const double ab = alpha.at(t, s) + beta.at(t, s);
      if (ab != kLogZero && !std::isnan(ab)) log_g[aug(s)] = log_add(log_g[aug(s)], ab);
    }
    for (std::size_t k = 0; k < K; ++k) {
      const double y = probs.at(t, k);
      double sub = 0.0;
      if (log_g[k] != kLogZero) sub = std::exp(log_g[k] - log_p - lp.at(t, k));
      out.grad.at(t, k) = y - sub;
    }
  }
  out.grad.check_finite("ctc gradient");
  return out;
}

// Greedy decoding: per-row argmax (first max wins), collapse repeats, then
// drop blanks. Collapsing before dropping is what makes "aa-b" read "ab".
inline std::vector<std::size_t> best_path_indices(const Tensor& probs) {
  validate_prob_matrix(probs);
  const std::size_t T = probs.dim(0), K = probs.dim(1), blank = K - 1;
  std::vector<std::size_t> out;
  std::size_t prev = K;  // sentinel: nothing collapses with the first frame
  for (std::size_t t = 0; t < T; ++t) {
    std::size_t arg = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (probs.at(t, k) > probs.at(t, arg)) arg = k;
    if (arg != prev && arg != blank) out.push_back(arg);
    prev = arg;
  }
  return out;
}

inline std::string best_path_decode(const Tensor& probs, const CharSet& charset) {
  if (probs.dim(1) != charset.size() + 1)
    throw ValidationError("ProbMatrix width does not match charset size + blank");
  return charset.decode(best_path_indices(probs));
}

}  // namespace htr
