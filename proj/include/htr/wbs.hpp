#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "htr/charset.hpp"
#include "htr/ctc.hpp"
#include "htr/tensor.hpp"
#include "htr/util.hpp"

namespace htr {

// Trie over wordchars. Nodes live in a flat arena and are addressed by
// index, so copies are cheap and beams can hold positions as plain integers.
class PrefixTree {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  PrefixTree() : nodes_(1) {}

  void insert(const std::u32string& word) {
    if (word.empty()) throw ValidationError("lexicon word must be nonempty");
    std::size_t cur = 0;
    for (char32_t c : word) {
      const auto it = nodes_[cur].children.find(c);
      if (it == nodes_[cur].children.end()) {
        nodes_.emplace_back();
        nodes_[cur].children.emplace(c, nodes_.size() - 1);
        cur = nodes_.size() - 1;
      } else {
        cur = it->second;
      }
    }
    nodes_[cur].word_end = true;
  }

  std::size_t root() const { return 0; }
  bool empty() const { return nodes_.size() == 1 && !nodes_[0].word_end; }

  std::size_t child(std::size_t node, char32_t c) const {
    const auto it = nodes_[node].children.find(c);
    return it == nodes_[node].children.end() ? npos : it->second;
  }

  bool word_end(std::size_t node) const { return nodes_[node].word_end; }

  bool contains(const std::u32string& word) const {
    std::size_t cur = 0;
    for (char32_t c : word) {
      cur = child(cur, c);
      if (cur == npos) return false;
    }
    return word_end(cur);
  }

  // Suffixes completing a word at or below `node`, in lexicographic order.
  // Includes the empty suffix when the node itself ends a word.
  std::vector<std::u32string> suffixes_below(std::size_t node) const {
    std::vector<std::u32string> out;
    std::u32string path;
    collect(node, path, out);
    return out;
  }

  std::vector<std::u32string> words() const { return suffixes_below(0); }

 private:
  struct Node {
    std::map<char32_t, std::size_t> children;
    bool word_end = false;
  };

  void collect(std::size_t node, std::u32string& path,
               std::vector<std::u32string>& out) const {
    if (nodes_[node].word_end) out.push_back(path);
    for (const auto& [c, idx] : nodes_[node].children) {
      path.push_back(c);
      collect(idx, path, out);
      path.pop_back();
    }
  }

  std::vector<Node> nodes_;
};

// Maximal wordchar runs; everything else separates words.
inline std::vector<std::u32string> tokenize_words(const std::u32string& line,
                                                  const CharSet& charset) {
  std::vector<std::u32string> words;
  std::u32string cur;
  for (char32_t c : line) {
    if (charset.is_wordchar(c)) {
      cur.push_back(c);
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

inline PrefixTree build_prefix_tree(const std::vector<std::u32string>& words,
                                    const CharSet& charset) {
  PrefixTree tree;
  for (const std::u32string& w : words) {
    for (char32_t c : w)
      if (!charset.is_wordchar(c))
        throw ValidationError("lexicon word '" + utf8_encode(w) +
                              "' contains non-word character '" + utf8_encode(c) + "'");
    tree.insert(w);
  }
  return tree;
}

inline PrefixTree lexicon_from_corpus(const std::string& corpus_utf8,
                                      const CharSet& charset) {
  PrefixTree tree;
  for (const std::string& line : split_lines(corpus_utf8))
    for (const std::u32string& w : tokenize_words(utf8_decode(line), charset))
      tree.insert(w);
  return tree;
}

// Word bigram model with additive smoothing:
//   P(w2|w1) = (count(w1,w2) + k) / (count(w1,*) + k*|V|)
// Each corpus line opens with a sentence-start context. An empty (untrained)
// model scores uniformly, which the Words mode uses as a neutral stand-in.
class WordLM {
 public:
  WordLM() = default;

  // Words are nonempty, so the empty string is a collision-free stand-in
  // for the sentence-start context.
  static const std::u32string& start_token() {
    static const std::u32string tok;
    return tok;
  }

  static WordLM train(const std::string& corpus_utf8, const CharSet& charset,
                      double smooth) {
    if (smooth < 0) throw ValidationError("lm smoothing constant must be >= 0");
    WordLM lm;
    lm.smooth_ = smooth;
    for (const std::string& line : split_lines(corpus_utf8)) {
      const auto words = tokenize_words(utf8_decode(line), charset);
      std::u32string prev = start_token();
      for (const std::u32string& w : words) {
        ++lm.unigram_[w];
        ++lm.total_words_;
        ++lm.bigram_[prev][w];
        ++lm.left_total_[prev];
        prev = w;
      }
    }
    if (lm.total_words_ == 0)
      throw ValidationError("language model corpus contains no words");
    for (const auto& [w, n] : lm.unigram_) lm.vocab_.push_back(w);
    return lm;
  }

  bool empty() const { return vocab_.empty(); }
  double smooth() const { return smooth_; }
  const std::vector<std::u32string>& vocab() const { return vocab_; }

  double bigram(const std::u32string& prev, const std::u32string& w) const {
    const double v = static_cast<double>(vocab_.size());
    double num = smooth_, den = smooth_ * v;
    if (const auto lt = left_total_.find(prev); lt != left_total_.end()) {
      den += static_cast<double>(lt->second);
      const auto& row = bigram_.at(prev);
      if (const auto it = row.find(w); it != row.end())
        num += static_cast<double>(it->second);
    }
    return den > 0 ? num / den : 0.0;
  }

  double log_bigram(const std::u32string& prev, const std::u32string& w) const {
    const double p = bigram(prev, w);
    return p > 0 ? std::log(p) : kLogZero;
  }

  // Smoothed unigram, used to pick completions for open partial words.
  // Uniform (constant zero) on an untrained model.
  double log_unigram(const std::u32string& w) const {
    if (empty()) return 0.0;
    const double v = static_cast<double>(vocab_.size());
    double num = smooth_;
    if (const auto it = unigram_.find(w); it != unigram_.end())
      num += static_cast<double>(it->second);
    const double den = static_cast<double>(total_words_) + smooth_ * v;
    return num > 0 && den > 0 ? std::log(num / den) : kLogZero;
  }

 private:
  std::map<std::u32string, std::map<std::u32string, std::uint64_t>> bigram_;
  std::map<std::u32string, std::uint64_t> left_total_;
  std::map<std::u32string, std::uint64_t> unigram_;
  std::uint64_t total_words_ = 0;
  std::vector<std::u32string> vocab_;
  double smooth_ = 0.01;
};

enum class WbsMode { Words, NGrams };

inline WbsMode parse_wbs_mode(const std::string& s) {
  if (s == "Words") return WbsMode::Words;
  if (s == "NGrams") return WbsMode::NGrams;
  throw ValidationError("unknown decoder mode '" + s + "' (Words or NGrams)");
}

struct DecoderConfig {
  std::size_t beam_width = 50;
  WbsMode mode = WbsMode::NGrams;
  double smooth = 0.01;

  void validate() const {
    if (beam_width < 1) throw ValidationError("beam width must be >= 1");
    if (smooth < 0) throw ValidationError("smoothing constant must be >= 0");
  }
};

namespace detail {

// One decoding hypothesis. Everything except the path masses is a pure
// function of `text`, which is why merging by text is sound.
struct Beam {
  std::u32string text;
  double p_b = kLogZero;   // log mass of paths ending in blank
  double p_nb = kLogZero;  // log mass of paths ending in text's last char
  double lm = 0.0;         // accumulated log LM score of completed words
  std::size_t words = 0;   // completed word count
  std::u32string last_word;
  std::u32string partial;                 // trailing word under construction
  std::size_t node = PrefixTree::npos;    // tree position; npos = between words

  double mass() const { return log_add(p_b, p_nb); }
  double score() const {
    return mass() + lm / static_cast<double>(std::max<std::size_t>(1, words));
  }
};

inline const std::u32string& lm_context(const Beam& b) {
  return b.words == 0 ? WordLM::start_token() : b.last_word;
}

// Close the trailing word: bump the count and, in NGrams mode, multiply in
// the bigram against the previous word.
inline void complete_word(Beam& b, const std::u32string& w, const WordLM& lm,
                          WbsMode mode) {
  if (mode == WbsMode::NGrams) b.lm += lm.log_bigram(lm_context(b), w);
  b.last_word = w;
  b.words += 1;
  b.partial.clear();
  b.node = PrefixTree::npos;
}

inline bool beam_order(const Beam& a, const Beam& b) {
  const double sa = a.score(), sb = b.score();
  if (sa != sb) return sa > sb;
  return a.text < b.text;
}

}  // namespace detail

struct WbsDecodeResult {
  std::string text;
  double score = kLogZero;  // winning beam: path mass + normalized LM score
};

// Lexicon-constrained CTC beam decoding. Word characters must follow the
// prefix tree; nonword characters may appear only between words or right
// after a completed word, so every maximal wordchar run in the output is a
// lexicon word. Beams are merged by emitted text, scored by path mass plus
// the word-count-normalized LM score, ties broken lexicographically. Open
// partial words at end of input are forced to their best tree completion.
inline WbsDecodeResult wbs_decode_scored(const Tensor& probs, const PrefixTree& tree,
                                         const WordLM& lm, const CharSet& charset,
                                         const DecoderConfig& cfg) {
  validate_prob_matrix(probs);
  cfg.validate();
  if (probs.dim(1) != charset.size() + 1)
    throw ValidationError("ProbMatrix width does not match charset size + blank");
  if (cfg.mode == WbsMode::NGrams && lm.empty())
    throw ValidationError("NGrams mode requires a trained language model");

  const std::size_t T = probs.dim(0), K = probs.dim(1), blank = K - 1;

  Tensor lp({std::max<std::size_t>(T, 1), K});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < K; ++k)
      lp.at(t, k) = std::log(std::max(probs.at(t, k), kProbFloor));

  std::vector<detail::Beam> beams(1);
  beams[0].p_b = 0.0;  // empty prefix, probability 1

  for (std::size_t t = 0; t < T; ++t) {
    std::map<std::u32string, detail::Beam> next;
    const auto slot = [&next](const detail::Beam& proto) -> detail::Beam& {
      auto it = next.find(proto.text);
      if (it == next.end()) {
        detail::Beam fresh = proto;
        fresh.p_b = kLogZero;
        fresh.p_nb = kLogZero;
        it = next.emplace(fresh.text, std::move(fresh)).first;
      }
      return it->second;
    };

    for (const detail::Beam& b : beams) {
      const double total = b.mass();

      // blank: text unchanged
      detail::Beam& stay = slot(b);
      stay.p_b = log_add(stay.p_b, total + lp.at(t, blank));

      // repeated last char without an intervening blank: text unchanged
      if (!b.text.empty() && b.p_nb != kLogZero)
        stay.p_nb = log_add(stay.p_nb, b.p_nb + lp.at(t, charset.index_of(b.text.back())));

      // extensions by one character
      for (std::size_t k = 0; k < blank; ++k) {
        const char32_t c = charset.at(k);
        const double src =
            (!b.text.empty() && b.text.back() == c) ? b.p_b : total;
        if (src == kLogZero) continue;

        if (charset.is_wordchar(c)) {
          const std::size_t from = b.node == PrefixTree::npos ? tree.root() : b.node;
          const std::size_t ch = tree.child(from, c);
          if (ch == PrefixTree::npos) continue;  // would leave the lexicon
          detail::Beam proto = b;
          proto.text.push_back(c);
          proto.partial.push_back(c);
          proto.node = ch;
          detail::Beam& nb = slot(proto);
          nb.p_nb = log_add(nb.p_nb, src + lp.at(t, k));
        } else {
          // nonword chars: only between words or right after a full word
          if (b.node != PrefixTree::npos && !tree.word_end(b.node)) continue;
          detail::Beam proto = b;
          if (proto.node != PrefixTree::npos)
            detail::complete_word(proto, proto.partial, lm, cfg.mode);
          proto.text.push_back(c);
          detail::Beam& nb = slot(proto);
          nb.p_nb = log_add(nb.p_nb, src + lp.at(t, k));
        }
      }
    }

    beams.clear();
    beams.reserve(next.size());
    for (auto& [text, b] : next) beams.push_back(std::move(b));
    std::sort(beams.begin(), beams.end(), detail::beam_order);
    if (beams.size() > cfg.beam_width) beams.resize(cfg.beam_width);
  }

  // end of input: force open partial words to lexicon words
  std::map<std::u32string, detail::Beam> finals;
  for (detail::Beam b : beams) {
    if (b.node != PrefixTree::npos) {
      if (!tree.word_end(b.node)) {
        const auto suffixes = tree.suffixes_below(b.node);
        std::u32string best;
        double best_score = kLogZero;
        bool first = true;
        for (const std::u32string& suf : suffixes) {
          const double s = lm.log_unigram(b.partial + suf);
          if (first || s > best_score) {
            best = suf;
            best_score = s;
            first = false;
          }
        }
        b.text += best;
        b.partial += best;
      }
      detail::complete_word(b, b.partial, lm, cfg.mode);
    }
    const auto it = finals.find(b.text);
    if (it == finals.end()) {
      finals.emplace(b.text, std::move(b));
    } else {
      it->second.p_b = log_add(it->second.p_b, b.p_b);
      it->second.p_nb = log_add(it->second.p_nb, b.p_nb);
    }
  }

  const detail::Beam* best = nullptr;
  for (const auto& [text, b] : finals)
    if (!best || detail::beam_order(b, *best)) best = &b;
  if (!best) return WbsDecodeResult{};
  return WbsDecodeResult{utf8_encode(best->text), best->score()};
}

inline std::string wbs_decode(const Tensor& probs, const PrefixTree& tree,
                              const WordLM& lm, const CharSet& charset,
                              const DecoderConfig& cfg) {
  return wbs_decode_scored(probs, tree, lm, charset, cfg).text;
}

// Model output arrives as one (batch, T, C+1) block; the decoder wants one
// (T, C+1) matrix per sample.
inline std::vector<Tensor> swap_axes_for_decoder(const Tensor& raw) {
  if (raw.rank() != 3) throw ValidationError("swap_axes_for_decoder wants rank 3");
  std::vector<Tensor> out;
  out.reserve(raw.dim(0));
  for (std::size_t i = 0; i < raw.dim(0); ++i) {
    Tensor m({raw.dim(1), raw.dim(2)});
    for (std::size_t t = 0; t < raw.dim(1); ++t)
      for (std::size_t k = 0; k < raw.dim(2); ++k) m.at(t, k) = raw.at(i, t, k);
    out.push_back(std::move(m));
  }
  return out;
}

inline Tensor unswap_axes(const std::vector<Tensor>& mats) {
  if (mats.empty()) throw ValidationError("unswap_axes: empty batch");
  const std::size_t T = mats[0].dim(0), K = mats[0].dim(1);
  Tensor raw({mats.size(), T, K});
  for (std::size_t i = 0; i < mats.size(); ++i) {
    if (mats[i].rank() != 2 || mats[i].dim(0) != T || mats[i].dim(1) != K)
      throw ValidationError("unswap_axes: inconsistent matrix shapes");
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t k = 0; k < K; ++k) raw.at(i, t, k) = mats[i].at(t, k);
  }
  return raw;
}

}  // namespace htr
