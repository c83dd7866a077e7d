#pragma once

#include <algorithm>
#include <cctype>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xplain/data.hpp"
#include "xplain/error.hpp"
#include "xplain/numfmt.hpp"
#include "xplain/text.hpp"
#include "xplain/types.hpp"

namespace xplain {

// ---------------------------------------------------------------------------
// Reframed question

enum class Likelihood { High, Low, Unspecified };

inline std::string_view to_string(Likelihood l) {
  switch (l) {
    case Likelihood::High: return "High";
    case Likelihood::Low: return "Low";
    case Likelihood::Unspecified: return "Unspecified";
  }
  return "Unspecified";
}

inline Likelihood likelihood_from_string(std::string_view s) {
  for (auto l : {Likelihood::High, Likelihood::Low, Likelihood::Unspecified})
    if (to_lower(to_string(l)) == to_lower(s)) return l;
  throw Error(ErrorCode::InvalidArgument, "likelihood '" + std::string(s) + "'");
}

enum class ActionVerb { Predict, Explain, Describe, Compare };

inline std::string_view to_string(ActionVerb v) {
  switch (v) {
    case ActionVerb::Predict: return "Predict";
    case ActionVerb::Explain: return "Explain";
    case ActionVerb::Describe: return "Describe";
    case ActionVerb::Compare: return "Compare";
  }
  return "Predict";
}

struct Action {
  ActionVerb verb = ActionVerb::Predict;
  // Keywords copied verbatim from the question, in order of appearance.
  std::vector<std::string> modifiers;

  // "Describe" or "Describe(accuracy, preprocessing)"
  std::string str() const {
    std::string s(to_string(verb));
    if (!modifiers.empty()) {
      s += "(";
      for (std::size_t i = 0; i < modifiers.size(); ++i) s += (i ? ", " : "") + modifiers[i];
      s += ")";
    }
    return s;
  }

  static Action parse(std::string_view s) {
    Action a;
    const std::string text = trim(s);
    const auto open = text.find('(');
    const std::string verb = trim(text.substr(0, open));
    bool found = false;
    for (auto v : {ActionVerb::Predict, ActionVerb::Explain, ActionVerb::Describe, ActionVerb::Compare})
      if (to_string(v) == verb) {
        a.verb = v;
        found = true;
      }
    if (!found) throw Error(ErrorCode::InvalidArgument, "action '" + text + "'");
    if (open != std::string::npos) {
      const auto close = text.rfind(')');
      std::string inner = text.substr(open + 1, close == std::string::npos ? std::string::npos : close - open - 1);
      std::size_t start = 0;
      while (start <= inner.size()) {
        auto comma = inner.find(',', start);
        auto item = trim(inner.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
        if (!item.empty()) a.modifiers.push_back(item);
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
    }
    return a;
  }

  bool operator==(const Action&) const = default;
};

struct ProposedChange {
  std::string feature;
  double value = 0.0;
  bool operator==(const ProposedChange&) const = default;
};

struct MachineInterpretation {
  std::string name = "Predict";
  std::string target;
  // In order of mention.
  std::vector<FeatureConstraint> constraints;
  std::vector<ProposedChange> proposed_changes;

  // Predict(Diabetes, Age = 55, BMI > 30, Insulin in [50, 100], Glucose := 120)
  std::string serialize() const {
    std::string s = name + "(" + target;
    for (const auto& c : constraints) {
      s += ", " + c.feature;
      switch (c.op) {
        case ConstraintOp::EQ: s += " = "; break;
        case ConstraintOp::LT: s += " < "; break;
        case ConstraintOp::LE: s += " <= "; break;
        case ConstraintOp::GT: s += " > "; break;
        case ConstraintOp::GE: s += " >= "; break;
        case ConstraintOp::RANGE:
          s += " in [" + format_shortest(c.value) + ", " + format_shortest(c.high) + "]";
          continue;
      }
      s += format_shortest(c.value);
    }
    for (const auto& p : proposed_changes) s += ", " + p.feature + " := " + format_shortest(p.value);
    return s + ")";
  }

  bool operator==(const MachineInterpretation&) const = default;
};

struct UnrecognizedTerm {
  std::string term;   // surface form, lower-cased
  std::string value;  // empty when the question gives no value
  bool operator==(const UnrecognizedTerm&) const = default;
};

struct ReframedQuestion {
  std::string question;
  ExplanationType explanation_type = ExplanationType::Unknown;
  std::string matched_cue;
  MachineInterpretation machine_interpretation;
  Action action;
  Likelihood likelihood = Likelihood::Unspecified;
  std::vector<UnrecognizedTerm> unrecognized_terms;

  bool operator==(const ReframedQuestion&) const = default;
};

// ---------------------------------------------------------------------------
// Predicate grammar
//
//   mi     := NAME '(' target { ',' clause } ')'
//   clause := feature OP number | feature 'in' '[' number ',' number ']'
//           | feature ':=' number
//   OP     := '=' | '<' | '<=' | '>' | '>='
//
// Feature names may span several words and resolve through schema aliases.

class GrammarError : public Error {
 public:
  GrammarError(std::size_t position, const std::string& what)
      : Error(ErrorCode::GrammarError, "at " + std::to_string(position) + ": " + what), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

namespace detail {

struct PredicateLexer {
  enum class Kind { Ident, Number, Symbol, End };
  struct Lexeme {
    Kind kind;
    std::string text;
    std::size_t pos;
  };

  explicit PredicateLexer(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size()) {
      const auto c = static_cast<unsigned char>(s[i]);
      if (std::isspace(c)) {
        ++i;
      } else if (std::isalpha(c) || c == '_') {
        std::size_t b = i;
        while (i < s.size() && (std::isalnum(static_cast<unsigned char>(s[i])) || s[i] == '_')) ++i;
        out.push_back({Kind::Ident, std::string(s.substr(b, i - b)), b});
      } else if (std::isdigit(c) || ((c == '-' || c == '+' || c == '.') && i + 1 < s.size() &&
                                     (std::isdigit(static_cast<unsigned char>(s[i + 1])) || s[i + 1] == '.'))) {
        std::size_t b = i;
        if (s[i] == '-' || s[i] == '+') ++i;
        while (i < s.size() && (std::isdigit(static_cast<unsigned char>(s[i])) || s[i] == '.')) ++i;
        if (i < s.size() && (s[i] == 'e' || s[i] == 'E')) {
          ++i;
          if (i < s.size() && (s[i] == '-' || s[i] == '+')) ++i;
          while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
        }
        out.push_back({Kind::Number, std::string(s.substr(b, i - b)), b});
      } else if (s.substr(i, 2) == "<=" || s.substr(i, 2) == ">=" || s.substr(i, 2) == ":=") {
        out.push_back({Kind::Symbol, std::string(s.substr(i, 2)), i});
        i += 2;
      } else if (std::string_view("(),[]=<>").find(static_cast<char>(c)) != std::string_view::npos) {
        out.push_back({Kind::Symbol, std::string(1, static_cast<char>(c)), i});
        ++i;
      } else {
        throw GrammarError(i, std::string("unexpected character '") + static_cast<char>(c) + "'");
      }
    }
    out.push_back({Kind::End, "", s.size()});
  }

  std::vector<Lexeme> out;
};

}  // namespace detail

inline MachineInterpretation parse_machine_interpretation(std::string_view serialized, const DatasetSchema& schema) {
  using Kind = detail::PredicateLexer::Kind;
  const auto lex = detail::PredicateLexer(serialized).out;
  std::size_t k = 0;
  auto peek = [&]() -> const auto& { return lex[k]; };
  auto expect_symbol = [&](std::string_view sym) {
    if (peek().kind != Kind::Symbol || peek().text != sym)
      throw GrammarError(peek().pos, "expected '" + std::string(sym) + "'");
    ++k;
  };
  auto number = [&]() {
    if (peek().kind != Kind::Number) throw GrammarError(peek().pos, "expected a number");
    auto v = parse_double(peek().text);
    if (!v) throw GrammarError(peek().pos, "bad number '" + peek().text + "'");
    ++k;
    return *v;
  };
  auto words_until_symbol = [&](bool stop_at_in) {
    std::string w;
    while (peek().kind == Kind::Ident && !(stop_at_in && peek().text == "in" && !w.empty())) {
      w += (w.empty() ? "" : " ") + peek().text;
      ++k;
    }
    return w;
  };

  MachineInterpretation mi;
  if (peek().kind != Kind::Ident) throw GrammarError(peek().pos, "expected predicate name");
  mi.name = peek().text;
  ++k;
  expect_symbol("(");
  const std::size_t target_pos = peek().pos;
  mi.target = words_until_symbol(false);
  if (mi.target.empty()) throw GrammarError(target_pos, "expected target label");
  if (schema.is_target(mi.target)) mi.target = schema.target_name;

  while (peek().kind == Kind::Symbol && peek().text == ",") {
    ++k;
    const std::size_t fpos = peek().pos;
    const std::string surface = words_until_symbol(true);
    if (surface.empty()) throw GrammarError(fpos, "expected feature name");
    auto f = schema.resolve(surface);
    if (!f) throw Error(ErrorCode::UnknownFeature, surface);
    const std::string& feature = schema.feature_names[*f];

    if (peek().kind == Kind::Ident && peek().text == "in") {
      ++k;
      expect_symbol("[");
      const double lo = number();
      expect_symbol(",");
      const double hi = number();
      expect_symbol("]");
      if (lo > hi) throw GrammarError(fpos, "range low exceeds high");
      mi.constraints.push_back({feature, ConstraintOp::RANGE, lo, hi, 0.0});
      continue;
    }
    if (peek().kind != Kind::Symbol) throw GrammarError(peek().pos, "expected operator");
    const std::string op = peek().text;
    ++k;
    const double v = number();
    if (op == ":=") {
      mi.proposed_changes.push_back({feature, v});
      continue;
    }
    ConstraintOp cop;
    if (op == "=")
      cop = ConstraintOp::EQ;
    else if (op == "<")
      cop = ConstraintOp::LT;
    else if (op == "<=")
      cop = ConstraintOp::LE;
    else if (op == ">")
      cop = ConstraintOp::GT;
    else if (op == ">=")
      cop = ConstraintOp::GE;
    else
      throw GrammarError(lex[k - 2].pos, "unknown operator '" + op + "'");
    mi.constraints.push_back({feature, cop, v, 0.0, cop == ConstraintOp::EQ ? schema.eq_tolerance[*f] : 0.0});
  }
  expect_symbol(")");
  if (peek().kind != Kind::End) throw GrammarError(peek().pos, "trailing input");
  return mi;
}

// ---------------------------------------------------------------------------
// Explanation-type classification

// Ordered (type, cues) pairs; earlier types win. A cue may contain "..." to
// require its parts in order with anything between.
struct CueTable {
  std::vector<std::pair<ExplanationType, std::vector<std::string>>> ordered;
};

struct Classification {
  ExplanationType type = ExplanationType::Unknown;
  std::string matched_cue;
};

namespace detail {

inline bool match_words_at(const std::vector<std::string>& hay, std::size_t at, const std::vector<std::string>& needle) {
  if (needle.empty() || at + needle.size() > hay.size()) return false;
  for (std::size_t i = 0; i < needle.size(); ++i)
    if (hay[at + i] != needle[i]) return false;
  return true;
}

inline std::optional<std::size_t> find_words(const std::vector<std::string>& hay, const std::vector<std::string>& needle,
                                             std::size_t from) {
  for (std::size_t i = from; i + needle.size() <= hay.size(); ++i)
    if (match_words_at(hay, i, needle)) return i;
  return std::nullopt;
}

inline bool cue_matches(const std::vector<std::string>& hay, std::string_view cue) {
  std::size_t from = 0;
  std::size_t start = 0;
  while (true) {
    const auto dots = cue.find("...", start);
    const auto part = text::words(cue.substr(start, dots == std::string_view::npos ? std::string_view::npos : dots - start));
    if (!part.empty()) {
      auto at = find_words(hay, part, from);
      if (!at) return false;
      from = *at + part.size();
    }
    if (dots == std::string_view::npos) return true;
    start = dots + 3;
  }
}

}  // namespace detail

inline Classification classify_explanation_type(std::string_view question, const CueTable& cues) {
  const auto hay = text::words(question);
  for (const auto& [type, list] : cues.ordered)
    for (const auto& cue : list)
      if (detail::cue_matches(hay, cue)) return {type, cue};
  return {};
}

// ---------------------------------------------------------------------------
// Filter extraction

struct ExtractedFilters {
  std::vector<FeatureConstraint> constraints;
  std::vector<ProposedChange> proposed_changes;
  std::vector<UnrecognizedTerm> unrecognized_terms;
  Likelihood likelihood = Likelihood::Unspecified;
};

namespace detail {

using text::Token;
using text::TokenKind;

struct Phrase {
  std::vector<std::string> words;
  ConstraintOp op;
};

inline std::vector<Phrase> make_phrases(std::initializer_list<std::pair<const char*, ConstraintOp>> items) {
  std::vector<Phrase> out;
  for (const auto& [p, op] : items) out.push_back({text::words(p), op});
  // Symbols are dropped by text::words; keep them as literal tokens.
  for (auto& ph : out)
    if (ph.words.empty()) ph.words = {};
  std::stable_sort(out.begin(), out.end(), [](const Phrase& a, const Phrase& b) { return a.words.size() > b.words.size(); });
  return out;
}

inline const std::vector<Phrase>& comparator_phrases() {
  static const auto table = make_phrases({{"greater than or equal to", ConstraintOp::GE},
                                          {"less than or equal to", ConstraintOp::LE},
                                          {"no more than", ConstraintOp::LE},
                                          {"no less than", ConstraintOp::GE},
                                          {"at least", ConstraintOp::GE},
                                          {"at most", ConstraintOp::LE},
                                          {"greater than", ConstraintOp::GT},
                                          {"more than", ConstraintOp::GT},
                                          {"higher than", ConstraintOp::GT},
                                          {"larger than", ConstraintOp::GT},
                                          {"older than", ConstraintOp::GT},
                                          {"less than", ConstraintOp::LT},
                                          {"lower than", ConstraintOp::LT},
                                          {"smaller than", ConstraintOp::LT},
                                          {"younger than", ConstraintOp::LT},
                                          {"exceeding", ConstraintOp::GT},
                                          {"exceeds", ConstraintOp::GT},
                                          {"over", ConstraintOp::GT},
                                          {"above", ConstraintOp::GT},
                                          {"under", ConstraintOp::LT},
                                          {"below", ConstraintOp::LT}});
  return table;
}

inline const std::vector<std::vector<std::string>>& change_phrases() {
  static const std::vector<std::vector<std::string>> table = [] {
    std::vector<std::vector<std::string>> t;
    for (const char* p : {"were changed to", "was changed to", "is changed to", "were reduced to", "were increased to",
                          "were lowered to", "were raised to", "went up to", "went down to", "had been", "changed to",
                          "increased to", "decreased to", "reduced to", "lowered to", "raised to", "dropped to",
                          "rose to", "became", "were"})
      t.push_back(text::words(p));
    std::stable_sort(t.begin(), t.end(), [](const auto& a, const auto& b) { return a.size() > b.size(); });
    return t;
  }();
  return table;
}

inline bool is_filler(const Token& t) {
  static const std::set<std::string> fillers = {"of",    "is",    "was",   "at",  "level", "levels", "value",
                                                "reading", "score", "equal", "to",  "equals", "around", "exactly",
                                                "that",  "which", "a",     "an",  "the",   "being",  "measured",
                                                "count", "reading", "index"};
  return (t.kind == TokenKind::Word && fillers.count(t.text)) || (t.kind == TokenKind::Symbol && t.text == "=");
}

struct Mention {
  enum class Kind { Feature, Target, OutOfSchema, Demographic } kind;
  std::size_t feature = 0;
  std::size_t start = 0, end = 0;  // token range [start, end)
  std::string surface;
};

inline const std::vector<std::string>& out_of_schema_terms() {
  static const std::vector<std::string> terms = {"cholesterol", "heart rate", "weight",     "height",
                                                 "sex",         "gender",     "smoking",    "smoker",
                                                 "income",      "ethnicity",  "race",       "waist circumference"};
  return terms;
}

inline const std::set<std::string>& demographic_words() {
  static const std::set<std::string> words = {"woman", "women", "man",  "men",  "male",   "female",
                                              "males", "females", "lady", "girl", "boy", "gentleman"};
  return words;
}

inline std::vector<Mention> find_mentions(const std::vector<Token>& toks, const DatasetSchema& schema) {
  struct Surface {
    std::vector<std::string> words;
    Mention::Kind kind;
    std::size_t feature;
    std::string text;
  };
  std::vector<Surface> surfaces;
  for (std::size_t f = 0; f < schema.feature_count(); ++f)
    surfaces.push_back({text::words(schema.feature_names[f]), Mention::Kind::Feature, f, to_lower(schema.feature_names[f])});
  for (const auto& [alias, canonical] : schema.feature_aliases)
    surfaces.push_back({text::words(alias), Mention::Kind::Feature, *schema.index_of(canonical), alias});
  surfaces.push_back({text::words(schema.target_name), Mention::Kind::Target, 0, to_lower(schema.target_name)});
  for (const auto& a : schema.target_aliases) surfaces.push_back({text::words(a), Mention::Kind::Target, 0, to_lower(a)});
  for (const auto& t : out_of_schema_terms()) surfaces.push_back({text::words(t), Mention::Kind::OutOfSchema, 0, t});
  std::stable_sort(surfaces.begin(), surfaces.end(),
                   [](const Surface& a, const Surface& b) { return a.words.size() > b.words.size(); });

  std::vector<std::string> words;
  for (const auto& t : toks) words.push_back(t.text);
  std::vector<Mention> out;
  for (std::size_t i = 0; i < toks.size();) {
    if (toks[i].kind != TokenKind::Word) {
      ++i;
      continue;
    }
    bool matched = false;
    for (const auto& s : surfaces) {
      if (match_words_at(words, i, s.words)) {
        out.push_back({s.kind, s.feature, i, i + s.words.size(), s.text});
        i += s.words.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;
    if (demographic_words().count(toks[i].text)) out.push_back({Mention::Kind::Demographic, 0, i, i + 1, toks[i].text});
    ++i;
  }
  return out;
}

class FilterScanner {
 public:
  FilterScanner(const std::vector<Token>& toks, const DatasetSchema& schema)
      : toks_(toks), schema_(schema), used_(toks.size(), false) {
    for (const auto& t : toks_) words_.push_back(t.text);
    foil_start_ = toks_.size();
    for (std::size_t k = 0; k < words_.size(); ++k)
      if (words_[k] == "than" || words_[k] == "versus" || words_[k] == "vs" || words_at(k, {"compare", "to"}) ||
          words_at(k, {"compared", "to"}) || words_at(k, {"compared", "with"})) {
        foil_start_ = k;
        break;
      }
  }

  ExtractedFilters run() {
    const auto mentions = find_mentions(toks_, schema_);
    for (const auto& m : mentions)
      for (std::size_t k = m.start; k < m.end; ++k) used_[k] = true;
    const std::optional<std::size_t> age = schema_.resolve("age");

    // Bare comparatives in front of "the age of N" / "age N" bind to Age.
    std::vector<bool> mention_consumed(mentions.size(), false);
    if (age) {
      for (std::size_t mi = 0; mi < mentions.size(); ++mi) {
        const auto& m = mentions[mi];
        if (m.kind != Mention::Kind::Feature || m.feature != *age) continue;
        std::size_t b = m.start;
        if (b > 0 && words_[b - 1] == "the") --b;
        if (auto cmp = comparator_ending_at(b)) {
          std::size_t j = m.end;
          if (j < toks_.size() && words_[j] == "of") ++j;
          if (number_at(j)) {
            at_ = cmp->second;
            add_constraint(*age, cmp->first, toks_[j].number);
            used_[j] = true;
            mark(cmp->second, b);
            mention_consumed[mi] = true;
          }
        }
      }
    }

    for (std::size_t mi = 0; mi < mentions.size(); ++mi) {
      const auto& m = mentions[mi];
      if (mention_consumed[mi]) continue;
      switch (m.kind) {
        case Mention::Kind::Feature: feature_value(m); break;
        case Mention::Kind::OutOfSchema: out_of_schema_value(m); break;
        case Mention::Kind::Demographic: out_.unrecognized_terms.push_back({m.surface, ""}); break;
        case Mention::Kind::Target: break;
      }
    }

    // "N pregnancies": a free number directly before a feature mention.
    for (const auto& m : mentions) {
      if (m.kind != Mention::Kind::Feature || m.start == 0) continue;
      const std::size_t j = m.start - 1;
      if (number_at(j) && !used_[j]) {
        at_ = j;
        std::optional<std::pair<ConstraintOp, std::size_t>> cmp = j > 0 ? comparator_ending_at(j) : std::nullopt;
        used_[j] = true;
        if (auto orig = cmp ? std::nullopt : instead_of(m.end)) {
          add_constraint(m.feature, ConstraintOp::EQ, *orig);
          add_change(m.feature, toks_[j].number);
          continue;
        }
        add_constraint(m.feature, cmp ? cmp->first : ConstraintOp::EQ, toks_[j].number);
        if (cmp) mark(cmp->second, j);
      }
    }

    if (age) age_patterns(*age);
    out_.likelihood = likelihood();
    out_.constraints = in_mention_order(std::move(out_.constraints), cpos_);
    out_.proposed_changes = in_mention_order(std::move(out_.proposed_changes), ppos_);
    return std::move(out_);
  }

 private:
  template <class T>
  static std::vector<T> in_mention_order(std::vector<T> items, const std::vector<std::size_t>& pos) {
    std::vector<std::size_t> order(items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pos[a] < pos[b]; });
    std::vector<T> out;
    for (auto i : order) out.push_back(std::move(items[i]));
    return out;
  }

  bool number_at(std::size_t j) const { return j < toks_.size() && toks_[j].kind == TokenKind::Number; }

  bool words_at(std::size_t j, std::initializer_list<const char*> ws) const {
    std::size_t k = j;
    for (const char* w : ws) {
      if (k >= toks_.size() || words_[k] != w) return false;
      ++k;
    }
    return true;
  }

  void mark(std::size_t from, std::size_t to) {
    for (std::size_t k = from; k < to && k < used_.size(); ++k) used_[k] = true;
  }

  // Comparator phrase starting at j: (op, end index).
  std::optional<std::pair<ConstraintOp, std::size_t>> comparator_at(std::size_t j) const {
    if (j < toks_.size() && toks_[j].kind == TokenKind::Symbol) {
      const auto& s = toks_[j].text;
      if (s == ">") return std::pair{ConstraintOp::GT, j + 1};
      if (s == ">=") return std::pair{ConstraintOp::GE, j + 1};
      if (s == "<") return std::pair{ConstraintOp::LT, j + 1};
      if (s == "<=") return std::pair{ConstraintOp::LE, j + 1};
    }
    for (const auto& p : comparator_phrases())
      if (match_words_at(words_, j, p.words)) return std::pair{p.op, j + p.words.size()};
    return std::nullopt;
  }

  // Comparator phrase ending right before index `end`: (op, start index).
  std::optional<std::pair<ConstraintOp, std::size_t>> comparator_ending_at(std::size_t end) const {
    for (std::size_t len = 5; len >= 1; --len) {
      if (len > end) continue;
      const std::size_t b = end - len;
      if (used_[b]) continue;
      if (auto c = comparator_at(b); c && c->second == end) return std::pair{c->first, b};
    }
    return std::nullopt;
  }

  std::optional<std::size_t> change_at(std::size_t j) const {
    for (const auto& p : change_phrases())
      if (match_words_at(words_, j, p)) return j + p.size();
    return std::nullopt;
  }

  void add_constraint(std::size_t f, ConstraintOp op, double v, double high = 0.0) {
    // Values mentioned in the foil ("... than one with insulin of 300") describe
    // the comparison case, not the subject of the question.
    if (at_ > foil_start_)
      for (const auto& c : out_.constraints)
        if (c.feature == schema_.feature_names[f]) return;
    FeatureConstraint c{schema_.feature_names[f], op, v, high, op == ConstraintOp::EQ ? schema_.eq_tolerance[f] : 0.0};
    if (std::find(out_.constraints.begin(), out_.constraints.end(), c) == out_.constraints.end()) {
      out_.constraints.push_back(c);
      cpos_.push_back(at_);
    }
  }

  void add_change(std::size_t f, double v) {
    ProposedChange p{schema_.feature_names[f], v};
    for (const auto& q : out_.proposed_changes)
      if (q.feature == p.feature) return;
    out_.proposed_changes.push_back(p);
    ppos_.push_back(at_);
  }

  // "instead of N" at j: consumes and returns N.
  std::optional<double> instead_of(std::size_t j) {
    if (words_at(j, {"instead", "of"}) && number_at(j + 2) && !used_[j + 2]) {
      used_[j + 2] = true;
      mark(j, j + 2);
      return toks_[j + 2].number;
    }
    return std::nullopt;
  }

  void feature_value(const Mention& m) {
    at_ = m.start;
    std::size_t j = m.end;
    int skipped = 0;
    while (j < toks_.size() && !used_[j]) {
      if (auto c = change_at(j); c && number_at(*c) && !used_[*c]) {
        used_[*c] = true;
        mark(j, *c);
        add_change(m.feature, toks_[*c].number);
        if (auto orig = instead_of(*c + 1)) add_constraint(m.feature, ConstraintOp::EQ, *orig);
        return;
      }
      if (auto c = comparator_at(j); c && number_at(c->second) && !used_[c->second]) {
        used_[c->second] = true;
        mark(j, c->second);
        add_constraint(m.feature, c->first, toks_[c->second].number);
        return;
      }
      if (words_[j] == "between" && number_at(j + 1) && words_at(j + 2, {"and"}) && number_at(j + 3)) {
        const double a = toks_[j + 1].number, b = toks_[j + 3].number;
        mark(j, j + 4);
        add_constraint(m.feature, ConstraintOp::RANGE, std::min(a, b), std::max(a, b));
        return;
      }
      if (number_at(j)) {
        used_[j] = true;
        const double v = toks_[j].number;
        if (auto orig = instead_of(j + 1)) {
          add_constraint(m.feature, ConstraintOp::EQ, *orig);
          add_change(m.feature, v);
        } else {
          add_constraint(m.feature, ConstraintOp::EQ, v);
        }
        return;
      }
      if (!is_filler(toks_[j]) || ++skipped > 3) return;
      ++j;
    }
  }

  void out_of_schema_value(const Mention& m) {
    std::size_t j = m.end;
    int skipped = 0;
    while (j < toks_.size() && !used_[j] && skipped <= 3) {
      if (number_at(j)) {
        used_[j] = true;
        out_.unrecognized_terms.push_back({m.surface, toks_[j].text});
        return;
      }
      if (!is_filler(toks_[j])) break;
      ++skipped;
      ++j;
    }
    out_.unrecognized_terms.push_back({m.surface, ""});
  }

  void age_patterns(std::size_t age) {
    for (std::size_t j = 0; j < toks_.size(); ++j) {
      if (used_[j]) continue;
      at_ = j;
      // N-year-old, N years old, N years or older
      if (number_at(j) && j + 1 < toks_.size() && (words_[j + 1] == "year" || words_[j + 1] == "years")) {
        if (words_at(j + 2, {"old"})) {
          add_constraint(age, ConstraintOp::EQ, toks_[j].number);
          mark(j, j + 3);
          continue;
        }
        if (words_at(j + 2, {"or", "older"}) || words_at(j + 2, {"and", "older"})) {
          add_constraint(age, ConstraintOp::GE, toks_[j].number);
          mark(j, j + 4);
          continue;
        }
        if (words_at(j + 2, {"or", "younger"}) || words_at(j + 2, {"and", "younger"})) {
          add_constraint(age, ConstraintOp::LE, toks_[j].number);
          mark(j, j + 4);
          continue;
        }
      }
      if (number_at(j) && (words_at(j + 1, {"or", "older"}) || words_at(j + 1, {"and", "older"}))) {
        add_constraint(age, ConstraintOp::GE, toks_[j].number);
        mark(j, j + 3);
        continue;
      }
      // aged N, aged over N, aged between A and B
      if (words_[j] == "aged") {
        std::size_t k = j + 1;
        if (auto c = comparator_at(k); c && number_at(c->second)) {
          add_constraint(age, c->first, toks_[c->second].number);
          mark(j, c->second + 1);
        } else if (words_at(k, {"between"}) && number_at(k + 1) && words_at(k + 2, {"and"}) && number_at(k + 3)) {
          add_constraint(age, ConstraintOp::RANGE, std::min(toks_[k + 1].number, toks_[k + 3].number),
                         std::max(toks_[k + 1].number, toks_[k + 3].number));
          mark(j, k + 4);
        } else if (number_at(k)) {
          add_constraint(age, ConstraintOp::EQ, toks_[k].number);
          mark(j, k + 1);
        }
        continue;
      }
      // patients over 50, older than 40
      if (auto c = comparator_at(j); c && number_at(c->second) && !used_[c->second]) {
        const std::size_t n = c->second;
        const bool unit_years = n + 1 < toks_.size() && (words_[n + 1] == "years" || words_[n + 1] == "year");
        add_constraint(age, c->first, toks_[n].number);
        mark(j, unit_years ? n + 2 : n + 1);
      }
    }
  }

  Likelihood likelihood() const {
    static const std::vector<std::pair<std::vector<std::string>, Likelihood>> phrases = [] {
      std::vector<std::pair<std::vector<std::string>, Likelihood>> p;
      for (const char* s : {"more likely", "higher likelihood", "higher risk", "high risk", "higher chance",
                            "greater risk", "greater chance", "increased risk"})
        p.emplace_back(text::words(s), Likelihood::High);
      for (const char* s : {"less likely", "unlikely", "lower likelihood", "lower risk", "low risk", "lower chance",
                            "decreased risk", "reduced risk"})
        p.emplace_back(text::words(s), Likelihood::Low);
      return p;
    }();
    for (std::size_t j = 0; j < words_.size(); ++j)
      for (const auto& [ws, l] : phrases)
        if (match_words_at(words_, j, ws)) return l;
    return Likelihood::Unspecified;
  }

  const std::vector<Token>& toks_;
  const DatasetSchema& schema_;
  std::vector<std::string> words_;
  std::vector<bool> used_;
  ExtractedFilters out_;
  // Token position of the phrase currently being read; orders the output.
  std::size_t at_ = 0;
  std::size_t foil_start_ = 0;
  std::vector<std::size_t> cpos_, ppos_;
};

}  // namespace detail

inline ExtractedFilters extract_filters(std::string_view question, const DatasetSchema& schema) {
  const auto toks = text::tokenize(question);
  return detail::FilterScanner(toks, schema).run();
}

// ---------------------------------------------------------------------------
// Question parser

inline const std::vector<std::string>& action_modifier_keywords() {
  static const std::vector<std::string> k = {"accuracy", "preprocessing", "imputation", "performance"};
  return k;
}

inline ActionVerb default_action(ExplanationType t) {
  switch (t) {
    case ExplanationType::Data: return ActionVerb::Describe;
    case ExplanationType::Contrastive: return ActionVerb::Compare;
    case ExplanationType::Rationale:
    case ExplanationType::CaseBased: return ActionVerb::Explain;
    default: return ActionVerb::Predict;
  }
}

inline ReframedQuestion parse_question(std::string_view question, const DatasetSchema& schema, const CueTable& cues) {
  if (trim(question).empty()) throw Error(ErrorCode::EmptyQuestion, "question is empty");
  ReframedQuestion rq;
  rq.question = std::string(question);
  auto cls = classify_explanation_type(question, cues);
  rq.explanation_type = cls.type;
  rq.matched_cue = cls.matched_cue;

  auto filters = extract_filters(question, schema);
  rq.likelihood = filters.likelihood;
  rq.unrecognized_terms = std::move(filters.unrecognized_terms);
  auto& mi = rq.machine_interpretation;
  mi.name = rq.explanation_type == ExplanationType::Data ? "Describe" : "Predict";
  mi.target = schema.target_name;
  mi.constraints = std::move(filters.constraints);
  mi.proposed_changes = std::move(filters.proposed_changes);

  rq.action.verb = default_action(rq.explanation_type);
  for (const auto& w : text::words(question))
    for (const auto& k : action_modifier_keywords())
      if (w == k && std::find(rq.action.modifiers.begin(), rq.action.modifiers.end(), k) == rq.action.modifiers.end())
        rq.action.modifiers.push_back(k);
  return rq;
}

inline void to_json(json& j, const ReframedQuestion& rq) {
  json unrec = json::array();
  for (const auto& u : rq.unrecognized_terms) unrec.push_back({{"term", u.term}, {"value", u.value}});
  json constraints = rq.machine_interpretation.constraints;
  json changes = json::array();
  for (const auto& p : rq.machine_interpretation.proposed_changes)
    changes.push_back({{"feature", p.feature}, {"value", p.value}});
  j = {{"question", rq.question},
       {"explanation_type", to_string(rq.explanation_type)},
       {"matched_cue", rq.matched_cue},
       {"machine_interpretation", rq.machine_interpretation.serialize()},
       {"constraints", constraints},
       {"proposed_changes", changes},
       {"action", rq.action.str()},
       {"likelihood", to_string(rq.likelihood)},
       {"unrecognized_terms", unrec}};
}

// Rebuilds the structured question from its JSON form; the predicate text is
// authoritative for the interpretation.
inline ReframedQuestion reframed_from_json(const json& j, const DatasetSchema& schema) {
  ReframedQuestion rq;
  rq.question = j.at("question").get<std::string>();
  rq.explanation_type = explanation_type_from_string(j.at("explanation_type").get<std::string>());
  rq.matched_cue = j.value("matched_cue", "");
  rq.machine_interpretation = parse_machine_interpretation(j.at("machine_interpretation").get<std::string>(), schema);
  rq.action = Action::parse(j.at("action").get<std::string>());
  rq.likelihood = likelihood_from_string(j.at("likelihood").get<std::string>());
  for (const auto& u : j.value("unrecognized_terms", json::array()))
    rq.unrecognized_terms.push_back({u.at("term").get<std::string>(), u.at("value").get<std::string>()});
  return rq;
}

// ---------------------------------------------------------------------------
// Parser evaluation

struct GoldItem {
  std::string question;
  std::string explanation_type;
  std::string machine_interpretation;
  std::string action;
  std::string likelihood;
};

inline std::vector<GoldItem> parse_gold_corpus(std::string_view jsonl) {
  std::vector<GoldItem> out;
  std::size_t start = 0, line_no = 0;
  while (start < jsonl.size()) {
    auto nl = jsonl.find('\n', start);
    auto line = trim(jsonl.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start));
    ++line_no;
    start = nl == std::string_view::npos ? jsonl.size() : nl + 1;
    if (line.empty()) continue;
    try {
      auto j = json::parse(line);
      out.push_back({j.at("question").get<std::string>(), j.at("explanation_type").get<std::string>(),
                     j.at("machine_interpretation").get<std::string>(), j.at("action").get<std::string>(),
                     j.at("likelihood").get<std::string>()});
    } catch (const json::exception& e) {
      throw Error(ErrorCode::InvalidArgument, "gold corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<GoldItem> load_gold_corpus(const std::string& path) { return parse_gold_corpus(csv::read_file(path)); }

struct FieldScore {
  double precision = 0, recall = 0, f1 = 0;
};

struct TypeScore {
  double precision = 0, recall = 0, f1 = 0;
  std::size_t support = 0;
};

struct ParserReport {
  static inline const std::vector<std::string> kFields = {"explanation_type", "machine_interpretation", "action",
                                                          "likelihood"};
  std::map<std::string, FieldScore> exact;
  std::map<std::string, FieldScore> levenshtein;
  double levenshtein_threshold = 0.9;
  // type_confusion[gold][predicted], indexed like kAllExplanationTypes.
  std::vector<std::vector<std::size_t>> type_confusion;
  std::map<std::string, TypeScore> per_type;
  double type_accuracy = 0;
  std::size_t items = 0;
};

inline void to_json(json& j, const FieldScore& f) {
  j = {{"f1", f.f1}, {"precision", f.precision}, {"recall", f.recall}};
}

inline void to_json(json& j, const ParserReport& r) {
  json per_type = json::object();
  for (const auto& [t, s] : r.per_type)
    per_type[t] = {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"support", s.support}};
  std::vector<std::string> labels;
  for (auto t : kAllExplanationTypes) labels.emplace_back(to_string(t));
  j = {{"items", r.items},
       {"exact_match", r.exact},
       {"levenshtein", r.levenshtein},
       {"levenshtein_threshold", r.levenshtein_threshold},
       {"type_accuracy", r.type_accuracy},
       {"type_labels", labels},
       {"type_confusion", r.type_confusion},
       {"per_type", per_type}};
}

using QuestionParser = std::function<ReframedQuestion(const std::string&)>;

inline std::map<std::string, std::string> rq_fields(const ReframedQuestion& rq) {
  return {{"explanation_type", std::string(to_string(rq.explanation_type))},
          {"machine_interpretation", rq.machine_interpretation.serialize()},
          {"action", rq.action.str()},
          {"likelihood", std::string(to_string(rq.likelihood))}};
}

inline std::map<std::string, std::string> gold_fields(const GoldItem& g) {
  return {{"explanation_type", g.explanation_type},
          {"machine_interpretation", g.machine_interpretation},
          {"action", g.action},
          {"likelihood", g.likelihood}};
}

// A predicted field counts toward precision when non-empty, a gold field
// toward recall when non-empty; a true positive needs both plus a match.
inline ParserReport evaluate_parser(const std::vector<GoldItem>& gold, const QuestionParser& parser,
                                    double levenshtein_threshold = 0.9) {
  if (gold.empty()) throw Error(ErrorCode::EmptyGoldSet, "no gold questions");
  ParserReport r;
  r.items = gold.size();
  r.levenshtein_threshold = levenshtein_threshold;
  const std::size_t nt = kAllExplanationTypes.size();
  r.type_confusion.assign(nt, std::vector<std::size_t>(nt, 0));
  auto type_index = [](ExplanationType t) {
    return static_cast<std::size_t>(std::find(kAllExplanationTypes.begin(), kAllExplanationTypes.end(), t) -
                                    kAllExplanationTypes.begin());
  };

  struct Counts {
    std::size_t predicted = 0, gold = 0, tp_exact = 0, tp_lev = 0;
  };
  std::map<std::string, Counts> counts;
  for (const auto& item : gold) {
    ReframedQuestion rq;
    try {
      rq = parser(item.question);
    } catch (const Error&) {
      rq.machine_interpretation.name.clear();  // nothing predicted
    }
    const auto pred = rq_fields(rq);
    const auto ref = gold_fields(item);
    for (const auto& field : ParserReport::kFields) {
      const std::string p = text::normalize_field(rq.machine_interpretation.name.empty() ? "" : pred.at(field));
      const std::string g = text::normalize_field(ref.at(field));
      auto& c = counts[field];
      c.predicted += !p.empty();
      c.gold += !g.empty();
      if (p.empty() || g.empty()) continue;
      c.tp_exact += p == g;
      c.tp_lev += text::levenshtein_similarity(p, g) >= levenshtein_threshold;
    }
    const auto gt = explanation_type_from_string(item.explanation_type);
    r.type_confusion[type_index(gt)][type_index(rq.explanation_type)]++;
  }

  auto score = [](std::size_t tp, std::size_t predicted, std::size_t gold_n) {
    FieldScore s;
    s.precision = predicted ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
    s.recall = gold_n ? static_cast<double>(tp) / static_cast<double>(gold_n) : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
  };
  for (const auto& field : ParserReport::kFields) {
    const auto& c = counts[field];
    r.exact[field] = score(c.tp_exact, c.predicted, c.gold);
    r.levenshtein[field] = score(c.tp_lev, c.predicted, c.gold);
  }

  std::size_t correct = 0;
  for (std::size_t t = 0; t < nt; ++t) {
    std::size_t support = 0, predicted = 0;
    for (std::size_t k = 0; k < nt; ++k) {
      support += r.type_confusion[t][k];
      predicted += r.type_confusion[k][t];
    }
    correct += r.type_confusion[t][t];
    TypeScore ts;
    auto fs = score(r.type_confusion[t][t], predicted, support);
    ts.precision = fs.precision;
    ts.recall = fs.recall;
    ts.f1 = fs.f1;
    ts.support = support;
    if (support || predicted) r.per_type[std::string(to_string(kAllExplanationTypes[t]))] = ts;
  }
  r.type_accuracy = static_cast<double>(correct) / static_cast<double>(gold.size());
  return r;
}

}  // namespace xplain
