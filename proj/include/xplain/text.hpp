#pragma once

#include <algorithm>
#include <cctype>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "xplain/data.hpp"
#include "xplain/numfmt.hpp"

namespace xplain::text {

enum class TokenKind { Word, Number, Symbol };

struct Token {
  TokenKind kind;
  std::string text;  // lower-cased
  double number = 0.0;
};

// Words are runs of letters, numbers are digit runs with an optional
// decimal part, and the comparison symbols < <= > >= = survive as symbols.
// Everything else (hyphens, punctuation, possessive 's) separates tokens.
inline std::vector<Token> tokenize(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  auto is_digit = [&](std::size_t k) { return k < s.size() && std::isdigit(static_cast<unsigned char>(s[k])); };
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    if (std::isalpha(c)) {
      std::string w;
      while (i < s.size() && std::isalpha(static_cast<unsigned char>(s[i])))
        w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(s[i++]))));
      if (i + 1 < s.size() && s[i] == '\'' && (s[i + 1] == 's' || s[i + 1] == 'S') &&
          !(i + 2 < s.size() && std::isalpha(static_cast<unsigned char>(s[i + 2]))))
        i += 2;
      out.push_back({TokenKind::Word, std::move(w)});
    } else if (std::isdigit(c) || (c == '.' && is_digit(i + 1))) {
      std::string n;
      while (is_digit(i)) n.push_back(s[i++]);
      if (i < s.size() && s[i] == '.' && is_digit(i + 1)) {
        n.push_back(s[i++]);
        while (is_digit(i)) n.push_back(s[i++]);
      }
      if (n.front() == '.') n.insert(n.begin(), '0');
      out.push_back({TokenKind::Number, n, *parse_double(n)});
    } else if (c == '<' || c == '>' || c == '=') {
      std::string sym(1, static_cast<char>(c));
      ++i;
      if (c != '=' && i < s.size() && s[i] == '=') sym.push_back(s[i++]);
      out.push_back({TokenKind::Symbol, sym});
    } else {
      ++i;
    }
  }
  return out;
}

inline std::vector<std::string> words(std::string_view s) {
  std::vector<std::string> out;
  for (auto& t : tokenize(s)) out.push_back(std::move(t.text));
  return out;
}

// Lower-case and collapse whitespace; used for exact-match field scoring.
inline std::string normalize_field(std::string_view s) {
  std::string out;
  bool space = false;
  for (char ch : s) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      space = !out.empty();
      continue;
    }
    if (space) out.push_back(' ');
    space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  return out;
}

inline std::size_t levenshtein(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// 1 - distance / max(length); two empty strings are identical.
inline double levenshtein_similarity(std::string_view a, std::string_view b) {
  const std::size_t len = std::max(a.size(), b.size());
  if (len == 0) return 1.0;
  return 1.0 - static_cast<double>(levenshtein(a, b)) / static_cast<double>(len);
}

inline const std::set<std::string>& stop_words() {
  static const std::set<std::string> words = {
      "a",     "about", "above",  "after", "again", "all",   "am",    "an",     "and",   "any",   "are",
      "as",    "at",    "be",     "been",  "being", "both",  "but",   "by",     "can",   "could", "did",
      "do",    "does",  "doing",  "for",   "from",  "had",   "has",   "have",   "having", "he",   "her",
      "here",  "hers",  "him",    "his",   "how",   "i",     "if",    "in",     "into",  "is",    "it",
      "its",   "just",  "me",     "my",    "of",    "on",    "or",    "our",    "she",   "should", "so",
      "some",  "such",  "than",   "that",  "the",   "their", "them",  "then",   "there", "these", "they",
      "this",  "those", "to",     "too",   "very",  "was",   "we",    "were",   "what",  "when",  "where",
      "which", "while", "who",    "whom",  "why",   "will",  "with",  "would",  "you",   "your",  "s",
      "t",     "model", "tell",   "show",  "give",  "me",    "please", "us",    "same",  "other", "more",
      "most",  "less",  "least",  "not",   "no",    "yes",   "one",   "get",    "got",   "also"};
  return words;
}

// Light suffix stripping; enough to align "predicting"/"predicted"/"predicts".
inline std::string stem(std::string w) {
  auto strip = [&](std::string_view suffix, std::size_t min_left) {
    if (w.size() >= suffix.size() + min_left && w.ends_with(suffix)) {
      w.resize(w.size() - suffix.size());
      return true;
    }
    return false;
  };
  if (strip("ies", 2)) {
    w += "y";
    return w;
  }
  strip("ing", 3) || strip("ed", 3) || strip("ly", 3) || strip("es", 3) || strip("s", 3);
  return w;
}

inline std::set<std::string> content_stems(std::string_view s) {
  std::set<std::string> out;
  for (const auto& t : tokenize(s)) {
    if (t.kind != TokenKind::Word) continue;
    if (stop_words().count(t.text)) continue;
    out.insert(stem(t.text));
  }
  return out;
}

}  // namespace xplain::text
