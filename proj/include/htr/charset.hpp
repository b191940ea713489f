#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "htr/util.hpp"

namespace htr {

// Character list file format: one character per line, space written as the
// escape \s (a bare space would be invisible and trip up editors). Backslash
// itself is \\.
inline std::u32string parse_charlist(const std::string& text) {
  std::u32string out;
  for (const std::string& line : split_lines(text)) {
    if (line.empty()) throw ValidationError("charset file: empty line");
    std::u32string cps = utf8_decode(line);
    if (cps == U"\\s") {
      out.push_back(U' ');
    } else if (cps == U"\\\\") {
      out.push_back(U'\\');
    } else if (cps.size() == 1) {
      out.push_back(cps[0]);
    } else {
      throw ValidationError("charset file: line is not a single character: '" + line + "'");
    }
  }
  return out;
}

inline std::string format_charlist(const std::u32string& chars) {
  std::string out;
  for (char32_t c : chars) {
    if (c == U' ')
      out += "\\s\n";
    else if (c == U'\\')
      out += "\\\\\n";
    else
      out += utf8_encode(c) + "\n";
  }
  return out;
}

// The alphabet the model emits: an ordered list of C characters plus the
// implicit blank at column index C. wordchars is the subset that can appear
// inside lexicon words; everything else separates words.
class CharSet {
 public:
  CharSet() = default;

  CharSet(std::u32string chars, std::u32string wordchars)
      : chars_(std::move(chars)), wordchars_(std::move(wordchars)) {
    for (std::size_t i = 0; i < chars_.size(); ++i)
      for (std::size_t j = i + 1; j < chars_.size(); ++j)
        if (chars_[i] == chars_[j])
          throw ValidationError("charset: duplicate character at positions " +
                                std::to_string(i) + " and " + std::to_string(j));
    for (char32_t w : wordchars_)
      if (chars_.find(w) == std::u32string::npos)
        throw ValidationError("charset: wordchar '" + utf8_encode(w) +
                              "' is not in the character list");
  }

  static CharSet from_strings(const std::string& chars_text,
                              const std::string& wordchars_text) {
    return CharSet(parse_charlist(chars_text), parse_charlist(wordchars_text));
  }

  std::size_t size() const { return chars_.size(); }
  std::size_t blank_index() const { return chars_.size(); }
  const std::u32string& chars() const { return chars_; }
  const std::u32string& wordchars() const { return wordchars_; }

  bool contains(char32_t c) const { return chars_.find(c) != std::u32string::npos; }
  bool is_wordchar(char32_t c) const {
    return wordchars_.find(c) != std::u32string::npos;
  }

  char32_t at(std::size_t index) const {
    if (index >= chars_.size()) throw ValidationError("charset index out of range");
    return chars_[index];
  }

  std::size_t index_of(char32_t c) const {
    const auto pos = chars_.find(c);
    if (pos == std::u32string::npos)
      throw ValidationError("character '" + utf8_encode(c) + "' not in charset");
    return pos;
  }

  std::vector<std::size_t> encode(const std::string& utf8_text) const {
    std::vector<std::size_t> out;
    for (char32_t c : utf8_decode(utf8_text)) out.push_back(index_of(c));
    return out;
  }

  std::string decode(const std::vector<std::size_t>& indices) const {
    std::u32string s;
    for (std::size_t i : indices) {
      if (i >= chars_.size()) throw ValidationError("label index out of charset range");
      s.push_back(chars_[i]);
    }
    return utf8_encode(s);
  }

 private:
  std::u32string chars_;
  std::u32string wordchars_;
};

}  // namespace htr
