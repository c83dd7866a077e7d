#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "xplain/data.hpp"
#include "xplain/decompose.hpp"
#include "xplain/error.hpp"
#include "xplain/explainers.hpp"
#include "xplain/numfmt.hpp"
#include "xplain/registry.hpp"
#include "xplain/text.hpp"

namespace xplain {

enum class FactSource { Subset, Explainer };

inline std::string_view to_string(FactSource s) { return s == FactSource::Subset ? "subset" : "explainer"; }

struct Fact {
  std::string fact_id;
  std::string name;
  double value = 0.0;
  FactSource source = FactSource::Subset;
  bool integral = false;  // counts, labels, row ids

  // The only spelling of this number that may appear in generated text.
  std::string text() const {
    return integral ? std::to_string(static_cast<long long>(std::llround(value))) : format_display(value);
  }

  bool operator==(const Fact&) const = default;
};

inline void to_json(json& j, const Fact& f) {
  j = {{"fact_id", f.fact_id}, {"name", f.name}, {"value", f.value}, {"source", to_string(f.source)},
       {"integral", f.integral}, {"text", f.text()}};
}

inline void from_json(const json& j, Fact& f) {
  f.fact_id = j.at("fact_id").get<std::string>();
  f.name = j.at("name").get<std::string>();
  f.value = j.at("value").get<double>();
  f.source = j.at("source").get<std::string>() == "subset" ? FactSource::Subset : FactSource::Explainer;
  f.integral = j.value("integral", false);
}

struct ContextBundle {
  ReframedQuestion reframed;
  SubsetSummary subset_summary;
  std::vector<ExplainerOutput> explainer_outputs;
  std::vector<Fact> fact_table;
  std::string target_label = "Diabetes";
  // Features whose subset means are reported: the constrained ones, or all of
  // them for a question without conditions.
  std::vector<std::string> summary_features;

  const Fact& fact(const std::string& id) const {
    for (const auto& f : fact_table)
      if (f.fact_id == id) return f;
    throw Error(ErrorCode::UnknownKey, "no fact '" + id + "'");
  }
  bool has_fact(const std::string& id) const {
    return std::any_of(fact_table.begin(), fact_table.end(), [&](const Fact& f) { return f.fact_id == id; });
  }

  bool operator==(const ContextBundle&) const = default;
};

struct Explanations {
  std::string subset_text;
  std::string explainer_text;
  bool operator==(const Explanations&) const = default;
};

struct SynthesisScores {
  double answer_relevance = 0.0;
  double faithfulness = 0.0;
  double context_utilization = 0.0;
  std::string method_note;
  bool operator==(const SynthesisScores&) const = default;
};

inline void to_json(json& j, const SynthesisScores& s) {
  j = {{"answer_relevance", s.answer_relevance},
       {"faithfulness", s.faithfulness},
       {"context_utilization", s.context_utilization},
       {"method_note", s.method_note}};
}

inline void from_json(const json& j, SynthesisScores& s) {
  s.answer_relevance = j.at("answer_relevance").get<double>();
  s.faithfulness = j.at("faithfulness").get<double>();
  s.context_utilization = j.at("context_utilization").get<double>();
  s.method_note = j.value("method_note", "");
}

// Outputs are persisted on their own; the bundle records their ids.
inline json bundle_to_json(const ContextBundle& b) {
  std::vector<std::string> ids;
  for (const auto& o : b.explainer_outputs) ids.push_back(o.explainer_id);
  return {{"reframed", json(b.reframed)},
          {"subset_summary", b.subset_summary},
          {"explainer_ids", ids},
          {"fact_table", b.fact_table},
          {"target_label", b.target_label},
          {"summary_features", b.summary_features}};
}

inline ContextBundle bundle_from_json(const json& j, const DatasetSchema& schema, std::vector<ExplainerOutput> outputs) {
  ContextBundle b;
  b.reframed = reframed_from_json(j.at("reframed"), schema);
  b.subset_summary = j.at("subset_summary").get<SubsetSummary>();
  b.fact_table = j.at("fact_table").get<std::vector<Fact>>();
  b.target_label = j.at("target_label").get<std::string>();
  b.summary_features = j.at("summary_features").get<std::vector<std::string>>();
  const auto ids = j.at("explainer_ids").get<std::vector<std::string>>();
  for (const auto& id : ids) {
    auto it = std::find_if(outputs.begin(), outputs.end(), [&](const ExplainerOutput& o) { return o.explainer_id == id; });
    if (it == outputs.end()) throw Error(ErrorCode::StoreCorrupt, "bundle references missing output " + id);
    b.explainer_outputs.push_back(*it);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Retrieval

namespace detail {

inline std::vector<std::size_t> top_attributions(const ExplainerOutput& o, std::size_t k) {
  std::vector<std::size_t> idx(o.attributions.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::fabs(o.attributions[a].attribution) > std::fabs(o.attributions[b].attribution);
  });
  if (idx.size() > k) idx.resize(k);
  return idx;
}

inline bool changed(double a, double b) { return std::fabs(a - b) > 1e-9 * std::max(1.0, std::fabs(a)); }

inline std::string prefix(const ExplainerOutput& o) { return o.explainer_id + "."; }

}  // namespace detail

inline constexpr std::size_t kTopAttributions = 3;

inline ContextBundle retrieve_context(const ReframedQuestion& rq, const Dataset& ds, std::vector<ExplainerOutput> outputs) {
  ContextBundle b;
  b.reframed = rq;
  b.explainer_outputs = std::move(outputs);
  if (!ds.schema.target_name.empty()) b.target_label = ds.schema.target_name;
  b.subset_summary = filter_subset(ds, rq.machine_interpretation.constraints).second;
  const auto& s = b.subset_summary;

  auto add = [&](std::string id, std::string name, double v, FactSource src, bool integral = false) {
    b.fact_table.push_back({std::move(id), std::move(name), v, src, integral});
  };
  add("subset.match_count", "matching records", static_cast<double>(s.match_count), FactSource::Subset, true);
  add("subset.total_count", "records in the dataset", static_cast<double>(s.total_count), FactSource::Subset, true);
  for (const auto& c : rq.machine_interpretation.constraints)
    if (std::find(b.summary_features.begin(), b.summary_features.end(), c.feature) == b.summary_features.end())
      b.summary_features.push_back(c.feature);
  if (b.summary_features.empty()) b.summary_features = s.feature_names;
  for (const auto& f : b.summary_features) add("subset.mean." + f, "mean " + f, s.stats(f).mean, FactSource::Subset);
  add("subset.outcome_rate", "share labelled " + b.target_label, s.outcome_rate, FactSource::Subset);

  for (const auto& o : b.explainer_outputs) {
    const auto p = detail::prefix(o);
    switch (o.modality) {
      case Modality::Features:
        for (std::size_t i : detail::top_attributions(o, kTopAttributions)) {
          const auto& a = o.attributions[i];
          add(p + "attribution." + a.feature, "attribution of " + a.feature, a.attribution, FactSource::Explainer);
          if (o.instance) add(p + "value." + a.feature, a.feature + " of the explained case", (*o.instance)[i], FactSource::Explainer);
        }
        break;
      case Modality::Samples:
        for (std::size_t r = 0; r < o.samples.size(); ++r) {
          const auto& smp = o.samples[r];
          const std::string row = p + "row" + std::to_string(r + 1) + ".";
          if (o.explainer_id == "GeneticCF") {
            if (smp.zero_change || !o.instance) {
              if (smp.probability) add(row + "probability", "predicted probability", *smp.probability, FactSource::Explainer);
              continue;
            }
            for (std::size_t j = 0; j < smp.values.size(); ++j) {
              if (!detail::changed((*o.instance)[j], smp.values[j])) continue;
              add(row + o.feature_names[j] + ".from", o.feature_names[j] + " now", (*o.instance)[j], FactSource::Explainer);
              add(row + o.feature_names[j] + ".to", o.feature_names[j] + " proposed", smp.values[j], FactSource::Explainer);
            }
            if (smp.probability) add(row + "probability", "predicted probability", *smp.probability, FactSource::Explainer);
          } else {
            add(row + "row_id", "record id", static_cast<double>(smp.row_id), FactSource::Explainer, true);
            add(row + "weight", "prototype weight", smp.weight, FactSource::Explainer);
            for (std::size_t j = 0; j < smp.values.size(); ++j)
              add(row + o.feature_names[j], o.feature_names[j], smp.values[j], FactSource::Explainer);
          }
        }
        break;
      case Modality::Rules:
        for (std::size_t r = 0; r < o.rules.size(); ++r) {
          const auto& rule = o.rules[r];
          const std::string row = p + "rule" + std::to_string(r + 1) + ".";
          for (const auto& c : rule.conditions) {
            if (std::isfinite(c.interval.lo)) add(row + c.feature + ".lower", c.feature + " lower bound", c.interval.lo, FactSource::Explainer);
            if (std::isfinite(c.interval.hi)) add(row + c.feature + ".upper", c.feature + " upper bound", c.interval.hi, FactSource::Explainer);
          }
          add(row + "label", "label", rule.label, FactSource::Explainer, true);
        }
        break;
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Rendering

namespace detail {

inline std::string join_names(const std::vector<std::string>& names) {
  std::string s;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) s += i + 1 == names.size() ? (names.size() > 2 ? ", and " : " and ") : ", ";
    s += names[i];
  }
  return s;
}

inline const ExplainerOutput* find_output(const ContextBundle& b, Modality m) {
  for (const auto& o : b.explainer_outputs)
    if (o.modality == m) return &o;
  return nullptr;
}

inline std::string fill(const NLTemplate& t, const std::map<std::string, std::string>& slots) {
  std::string out;
  const std::string& s = t.text_skeleton;
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] == '{') {
      const auto close = s.find('}', i);
      if (close != std::string::npos) {
        const auto name = s.substr(i + 1, close - i - 1);
        auto it = slots.find(name);
        if (it == slots.end()) throw Error(ErrorCode::SlotUnfillable, t.template_id + ": no content for " + name);
        out += it->second;
        i = close + 1;
        continue;
      }
    }
    out += s[i++];
  }
  return out;
}

inline std::string subset_text(const ContextBundle& b) {
  const auto& s = b.subset_summary;
  const auto& constraints = b.reframed.machine_interpretation.constraints;
  std::vector<std::string> constrained;
  for (const auto& c : constraints)
    if (std::find(constrained.begin(), constrained.end(), c.feature) == constrained.end()) constrained.push_back(c.feature);
  std::string t;
  const auto total = b.fact("subset.total_count").text();
  if (s.fallback_used)
    t = "There are no full matches in the dataset for the requested " + join_names(constrained) +
        " values, so the summary below describes all " + total + " records.";
  else if (constrained.empty())
    t = "The question sets no conditions, so the summary below describes all " + total + " records.";
  else
    t = b.fact("subset.match_count").text() + " of " + total + " records match the requested " + join_names(constrained) +
        " values. Summary of the matching records:";
  for (const auto& f : b.summary_features) t += "\n- The mean " + f + " is " + b.fact("subset.mean." + f).text() + ".";
  t += "\n- The share of records labelled " + b.target_label + " is " + b.fact("subset.outcome_rate").text() + ".";
  return t;
}

inline std::string rules_slot(const ContextBundle& b, const ExplainerOutput& o) {
  if (o.rules.empty()) throw Error(ErrorCode::SlotUnfillable, "RULES: no rules were extracted");
  std::string t;
  for (std::size_t r = 0; r < o.rules.size(); ++r) {
    // rule_text formats bounds the same way Fact::text does; check anyway.
    const auto line = rule_text(o.rules[r]);
    const std::string row = detail::prefix(o) + "rule" + std::to_string(r + 1) + ".";
    if (line.find("label = " + b.fact(row + "label").text()) == std::string::npos)
      throw Error(ErrorCode::SlotUnfillable, "RULES: rule text and fact table disagree");
    t += (r ? "\n" : "") + std::to_string(r + 1) + ". " + line;
  }
  return t;
}

inline std::vector<std::string> rule_features(const ExplainerOutput& o) {
  std::vector<std::string> f;
  for (const auto& r : o.rules)
    for (const auto& c : r.conditions)
      if (std::find(f.begin(), f.end(), c.feature) == f.end()) f.push_back(c.feature);
  return f;
}

inline std::string prototypes_slot(const ContextBundle& b, const ExplainerOutput& o) {
  if (o.samples.empty()) throw Error(ErrorCode::SlotUnfillable, "PROTOTYPES: no prototypes were selected");
  std::string t;
  for (std::size_t r = 0; r < o.samples.size(); ++r) {
    const std::string row = detail::prefix(o) + "row" + std::to_string(r + 1) + ".";
    t += (r ? "\n" : "") + std::string("- Record ") + b.fact(row + "row_id").text() + " (prototype weight " +
         b.fact(row + "weight").text() + "): ";
    for (std::size_t j = 0; j < o.feature_names.size(); ++j)
      t += (j ? ", " : "") + o.feature_names[j] + " " + b.fact(row + o.feature_names[j]).text();
  }
  return t;
}

inline std::string deltas_slot(const ContextBundle& b, const ExplainerOutput& o) {
  if (o.samples.empty()) throw Error(ErrorCode::SlotUnfillable, "COUNTERFACTUAL_DELTAS: no counterfactuals were found");
  std::string t;
  for (std::size_t r = 0; r < o.samples.size(); ++r) {
    const auto& smp = o.samples[r];
    const std::string row = detail::prefix(o) + "row" + std::to_string(r + 1) + ".";
    const std::string prob = b.has_fact(row + "probability") ? " (predicted probability " + b.fact(row + "probability").text() + ")" : "";
    if (smp.zero_change || !o.instance) {
      t += (r ? "\n" : "") + std::string("- No change is needed: the case already receives the requested prediction") + prob + ".";
      continue;
    }
    std::vector<std::string> parts;
    for (const auto& f : o.feature_names)
      if (b.has_fact(row + f + ".from"))
        parts.push_back(f + " from " + b.fact(row + f + ".from").text() + " to " + b.fact(row + f + ".to").text());
    t += (r ? "\n" : "") + std::string("- Change ") + join_names(parts) + prob + ".";
  }
  return t;
}

inline std::string closing(const ContextBundle& b, ExplanationType type) {
  switch (type) {
    case ExplanationType::Rationale: {
      const auto* o = find_output(b, Modality::Rules);
      const auto feats = o ? rule_features(*o) : std::vector<std::string>{};
      return "These rules provide a clear guideline for classifying data" +
             (feats.empty() ? std::string() : " based on " + join_names(feats) + " values") +
             ", with different labels assigned depending on the value ranges. This type of explanation helps users "
             "understand the rationale behind the model's decisions and assess its reasoning.";
    }
    case ExplanationType::CaseBased:
      return "Each weight shows how strongly a record represents the group; comparing a new case with these records "
             "shows which prior cases the model's behaviour most resembles.";
    case ExplanationType::Data:
      return "These representative records and the summary statistics describe the part of the training data that "
             "the question refers to.";
    case ExplanationType::Counterfactual:
      return "Each option changes as few inputs as possible; features that cannot be changed, such as age, are kept fixed.";
    default:
      return "";
  }
}

}  // namespace detail

inline Explanations render_explanation(const NLTemplate& tmpl, const ContextBundle& b) {
  const auto type = b.reframed.explanation_type;
  if (type != tmpl.explanation_type)
    throw Error(ErrorCode::InvalidArgument, "template " + tmpl.template_id + " does not serve " + std::string(to_string(type)));
  Explanations e;
  e.subset_text = detail::subset_text(b);

  std::map<std::string, std::string> slots;
  slots["CLOSING_GUIDANCE"] = detail::closing(b, type);
  if (tmpl.has_slot("SUBSET_STATS")) slots["SUBSET_STATS"] = e.subset_text;
  if (tmpl.has_slot("MATCH_COUNT")) {
    const auto& s = b.subset_summary;
    slots["MATCH_COUNT"] = s.fallback_used ? "No records fully match the question's conditions."
                                           : b.fact("subset.match_count").text() + " of " + b.fact("subset.total_count").text() +
                                                 " records match the question's conditions.";
  }
  if (tmpl.has_slot("RULES")) {
    const auto* o = detail::find_output(b, Modality::Rules);
    if (!o) throw Error(ErrorCode::SlotUnfillable, "RULES: no rule output");
    slots["RULES"] = detail::rules_slot(b, *o);
  }
  if (tmpl.has_slot("PROTOTYPES")) {
    const auto* o = detail::find_output(b, Modality::Samples);
    if (!o) throw Error(ErrorCode::SlotUnfillable, "PROTOTYPES: no sample output");
    slots["PROTOTYPES"] = detail::prototypes_slot(b, *o);
  }
  if (tmpl.has_slot("COUNTERFACTUAL_DELTAS")) {
    const auto* o = detail::find_output(b, Modality::Samples);
    if (!o) throw Error(ErrorCode::SlotUnfillable, "COUNTERFACTUAL_DELTAS: no counterfactual output");
    slots["COUNTERFACTUAL_DELTAS"] = detail::deltas_slot(b, *o);
  }
  if (tmpl.has_slot("FACTS") || tmpl.has_slot("FOILS") || tmpl.has_slot("ATTRIBUTION_RANKING")) {
    const auto* o = detail::find_output(b, Modality::Features);
    if (!o || o->attributions.empty()) throw Error(ErrorCode::SlotUnfillable, "FACTS: no attributions");
    const auto p = detail::prefix(*o);
    const auto top = detail::top_attributions(*o, kTopAttributions);
    std::string facts, foils;
    std::vector<std::string> ranking;
    for (std::size_t i : top) {
      const auto& a = o->attributions[i];
      ranking.push_back(a.feature);
      const auto phi = b.fact(p + "attribution." + a.feature).text();
      const std::string value = b.has_fact(p + "value." + a.feature) ? b.fact(p + "value." + a.feature).text() : "";
      if (a.attribution > 0) {
        facts += "\n- " + a.feature + (value.empty() ? "" : " of " + value) + " raised the predicted likelihood of " + b.target_label +
                 " (contribution " + phi + ").";
      } else if (a.attribution < 0) {
        // Moving the value toward the background mean removes a negative contribution.
        bool above = false;
        if (o->instance && o->config.contains("background_mean"))
          above = (*o->instance)[i] > o->config["background_mean"].at(i).get<double>();
        foils += "\n- Had " + a.feature + " been " + (above ? "lower" : "higher") + (value.empty() ? "" : " than " + value) +
                 ", the predicted likelihood of " + b.target_label + " would have been higher (contribution " + phi + ").";
      }
    }
    slots["FACTS"] = "Features that pushed the prediction towards " + b.target_label + ":" +
                     (facts.empty() ? "\n- None among the most influential features." : facts);
    slots["FOILS"] = "Features that held the prediction back:" +
                     (foils.empty() ? "\n- None among the most influential features." : foils);
    slots["ATTRIBUTION_RANKING"] = "Most influential features, in order: " + detail::join_names(ranking) + ".";
  }
  e.explainer_text = detail::fill(tmpl, slots);
  return e;
}

// ---------------------------------------------------------------------------
// Scoring

// Numeric tokens as written in text: an optional minus, digits, an optional
// fraction. Digits inside words (x0, H2O) are not numbers, and a number that
// opens a line as an enumerator ("1. IF ...") is list markup.
inline std::vector<std::string> numeric_tokens(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  auto word_char = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; };
  while (i < s.size()) {
    const bool minus = s[i] == '-' && i + 1 < s.size() && std::isdigit(static_cast<unsigned char>(s[i + 1])) &&
                       (i == 0 || !word_char(s[i - 1]));
    if (!(minus || std::isdigit(static_cast<unsigned char>(s[i]))) || (i > 0 && word_char(s[i - 1]) && !minus) ||
        (i > 0 && s[i - 1] == '.' && !minus)) {
      ++i;
      continue;
    }
    std::size_t j = i + (minus ? 1 : 0);
    while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
    if (j + 1 < s.size() && s[j] == '.' && std::isdigit(static_cast<unsigned char>(s[j + 1]))) {
      ++j;
      while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
    }
    if (j < s.size() && (std::isalpha(static_cast<unsigned char>(s[j])) || s[j] == '_')) {  // "2nd", "3x"
      i = j;
      continue;
    }
    const bool line_start = i == 0 || s[i - 1] == '\n';
    const bool enumerator = line_start && !minus && j + 1 < s.size() && s[j] == '.' && s[j + 1] == ' ';
    if (!enumerator) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

inline const char* kSynthesisMethodNote =
    "Deterministic proxies, not LLM-judged scores: context_utilization = share of fact-table entries whose canonical "
    "text appears as a number in either explanation; faithfulness = share of numbers in the explanations that equal "
    "some fact-table entry (1 when there are none; line-leading list enumerators are not counted); answer_relevance = "
    "share of the question's content-word stems found in the explanations.";

inline SynthesisScores score_synthesis(const Explanations& texts, const ContextBundle& b, const std::string& question) {
  SynthesisScores s;
  s.method_note = kSynthesisMethodNote;
  const std::string all = texts.subset_text + "\n" + texts.explainer_text;
  const auto tokens = numeric_tokens(all);
  const std::set<std::string> token_set(tokens.begin(), tokens.end());
  std::set<std::string> fact_texts;
  for (const auto& f : b.fact_table) fact_texts.insert(f.text());

  std::size_t cited = 0;
  for (const auto& f : b.fact_table) cited += token_set.count(f.text());
  s.context_utilization = b.fact_table.empty() ? 0.0 : static_cast<double>(cited) / static_cast<double>(b.fact_table.size());

  std::size_t grounded = 0;
  for (const auto& t : tokens) grounded += fact_texts.count(t);
  s.faithfulness = tokens.empty() ? 1.0 : static_cast<double>(grounded) / static_cast<double>(tokens.size());

  const auto q = text::content_stems(question);
  const auto a = text::content_stems(all);
  std::size_t shared = 0;
  for (const auto& w : q) shared += a.count(w);
  s.answer_relevance = q.empty() ? 0.0 : static_cast<double>(shared) / static_cast<double>(q.size());
  return s;
}

}  // namespace xplain
