#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "xplain/csv.hpp"
#include "xplain/data.hpp"
#include "xplain/decompose.hpp"
#include "xplain/error.hpp"
#include "xplain/types.hpp"

namespace xplain {

inline const std::vector<std::string>& known_slots() {
  static const std::vector<std::string> s = {"SUBSET_STATS", "MATCH_COUNT",           "RULES",
                                             "FACTS",        "FOILS",                 "PROTOTYPES",
                                             "COUNTERFACTUAL_DELTAS", "ATTRIBUTION_RANKING", "CLOSING_GUIDANCE"};
  return s;
}

// Metric ids with an implementation in metrics.hpp.
inline const std::set<std::string>& implemented_metrics() {
  static const std::set<std::string> m = {"faithfulness", "monotonicity",          "avg_rule_length",
                                          "fidelity",     "non_representativeness", "diversity"};
  return m;
}

struct NLTemplate {
  std::string template_id;
  ExplanationType explanation_type = ExplanationType::Unknown;
  std::vector<std::string> slots;
  std::string text_skeleton;  // "{SLOT}" placeholders

  bool has_slot(const std::string& s) const { return std::find(slots.begin(), slots.end(), s) != slots.end(); }

  // Placeholder names in order of appearance.
  std::vector<std::string> placeholders() const {
    std::vector<std::string> out;
    std::size_t i = 0;
    while ((i = text_skeleton.find('{', i)) != std::string::npos) {
      auto j = text_skeleton.find('}', i);
      if (j == std::string::npos) break;
      out.push_back(text_skeleton.substr(i + 1, j - i - 1));
      i = j + 1;
    }
    return out;
  }

  bool operator==(const NLTemplate&) const = default;
};

struct CatalogItem {
  ExplainerId id;
  std::string name;
  Modality modality = Modality::Features;
  std::vector<std::string> data_types;
  bool operator==(const CatalogItem&) const = default;
};

struct RegistryEntry {
  ExplanationType explanation_type = ExplanationType::Unknown;
  std::string eo_class;
  std::string definition;
  std::vector<std::string> question_cues;
  std::vector<ExplainerId> explainer_methods;
  std::optional<Modality> output_modality;  // absent when no explainer is mapped
  std::vector<std::string> metrics;
  std::string template_id;
  std::vector<std::string> supported_data_types;
  bool operator==(const RegistryEntry&) const = default;
};

struct Registry {
  int version = 1;
  std::vector<ExplanationType> cue_priority;
  std::map<ExplanationType, RegistryEntry> entries;
  std::vector<CatalogItem> explainer_catalog;  // file order
  std::map<Modality, std::vector<std::string>> metrics_by_modality;
  std::map<std::string, NLTemplate> templates;

  bool operator==(const Registry&) const = default;

  const CatalogItem* catalog_item(const ExplainerId& id) const {
    for (const auto& c : explainer_catalog)
      if (c.id == id) return &c;
    return nullptr;
  }

  const RegistryEntry& entry(ExplanationType t) const {
    auto it = entries.find(t);
    if (it == entries.end()) throw Error(ErrorCode::UnknownKey, std::string(to_string(t)));
    return it->second;
  }

  CueTable cue_table() const {
    CueTable table;
    for (auto t : cue_priority) table.ordered.emplace_back(t, entry(t).question_cues);
    return table;
  }
};

class ValidationError : public Error {
 public:
  ValidationError(const std::string& entry, const std::string& reason)
      : Error(ErrorCode::ValidationError, entry + ": " + reason), entry_(entry) {}
  const std::string& entry() const { return entry_; }

 private:
  std::string entry_;
};

namespace detail {

inline std::vector<std::string> string_list(const json& j, const std::string& where, const char* key) {
  if (!j.contains(key)) throw ValidationError(where, std::string("missing '") + key + "'");
  if (!j.at(key).is_array()) throw ValidationError(where, std::string("'") + key + "' must be a list");
  std::vector<std::string> out;
  for (const auto& v : j.at(key)) {
    if (!v.is_string()) throw ValidationError(where, std::string("'") + key + "' must hold strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

inline std::string required_string(const json& j, const std::string& where, const char* key) {
  if (!j.contains(key) || !j.at(key).is_string()) throw ValidationError(where, std::string("missing '") + key + "'");
  return j.at(key).get<std::string>();
}

template <class F>
auto checked(const std::string& where, F&& f) {
  try {
    return f();
  } catch (const ValidationError&) {
    throw;
  } catch (const Error& e) {
    throw ValidationError(where, e.what());
  }
}

}  // namespace detail

inline void validate_registry(const Registry& r) {
  std::set<std::string> type_names;
  for (auto t : kAllExplanationTypes) type_names.insert(std::string(to_string(t)));

  for (const auto& [m, ids] : r.metrics_by_modality)
    for (const auto& id : ids)
      if (!implemented_metrics().count(id))
        throw ValidationError(std::string(to_string(m)), "metric '" + id + "' has no implementation");

  std::set<std::string> ids;
  for (const auto& c : r.explainer_catalog) {
    if (!ids.insert(c.id).second) throw ValidationError(c.id, "duplicate explainer id");
    if (type_names.count(c.id)) throw ValidationError(c.id, "explainer id collides with an explanation type");
  }

  for (auto t : kSupportedExplanationTypes)
    if (!r.entries.count(t)) throw ValidationError(std::string(to_string(t)), "no entry for supported type");

  std::set<ExplainerId> referenced;
  for (const auto& [t, e] : r.entries) {
    const std::string where(to_string(t));
    if (t == ExplanationType::Unknown) throw ValidationError(where, "Unknown cannot have an entry");
    if (is_supported(t) && e.explainer_methods.empty()) throw ValidationError(where, "no explainer methods");
    if (!is_supported(t) && !e.explainer_methods.empty())
      throw ValidationError(where, "explainer methods on an unsupported type");
    for (const auto& id : e.explainer_methods) {
      const auto* item = r.catalog_item(id);
      if (!item) throw Error(ErrorCode::DanglingExplainer, where + " references unknown explainer '" + id + "'");
      if (!e.output_modality || item->modality != *e.output_modality)
        throw ValidationError(where, "explainer '" + id + "' modality does not match the entry");
      referenced.insert(id);
    }
    if (e.output_modality) {
      auto it = r.metrics_by_modality.find(*e.output_modality);
      if (it == r.metrics_by_modality.end())
        throw ValidationError(where, "no metrics declared for modality " + std::string(to_string(*e.output_modality)));
      std::set<std::string> want(it->second.begin(), it->second.end());
      std::set<std::string> have(e.metrics.begin(), e.metrics.end());
      if (want != have)
        throw ValidationError(where, "metrics inconsistent with modality " + std::string(to_string(*e.output_modality)));
    } else if (!e.metrics.empty()) {
      throw ValidationError(where, "metrics without an output modality");
    }
    auto tpl = r.templates.find(e.template_id);
    if (tpl == r.templates.end()) throw ValidationError(where, "unknown template '" + e.template_id + "'");
    if (tpl->second.explanation_type != t) throw ValidationError(where, "template is for another explanation type");
  }
  for (const auto& c : r.explainer_catalog)
    if (!referenced.count(c.id)) throw ValidationError(c.id, "explainer not mapped to any explanation type");

  for (const auto& [id, tpl] : r.templates) {
    for (const auto& s : tpl.slots)
      if (std::find(known_slots().begin(), known_slots().end(), s) == known_slots().end())
        throw ValidationError(id, "unknown slot '" + s + "'");
    for (const auto& p : tpl.placeholders())
      if (!tpl.has_slot(p)) throw ValidationError(id, "placeholder {" + p + "} has no slot");
    if (tpl.explanation_type == ExplanationType::Contrastive && !(tpl.has_slot("FACTS") && tpl.has_slot("FOILS")))
      throw ValidationError(id, "contrastive template needs FACTS and FOILS");
  }

  std::set<ExplanationType> prio(r.cue_priority.begin(), r.cue_priority.end());
  if (prio.size() != r.cue_priority.size() || prio.size() != r.entries.size())
    throw ValidationError("cue_priority", "must list every entry exactly once");
  for (auto t : r.cue_priority)
    if (!r.entries.count(t)) throw ValidationError("cue_priority", "lists a type without an entry");
}

inline Registry registry_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("registry", "document must be an object");
  if (!j.contains("version") || !j.at("version").is_number_integer())
    throw ValidationError("registry", "missing integer 'version'");
  Registry r;
  r.version = j.at("version").get<int>();

  if (!j.contains("metrics_by_modality") || !j.at("metrics_by_modality").is_object())
    throw ValidationError("registry", "missing 'metrics_by_modality'");
  for (const auto& [k, v] : j.at("metrics_by_modality").items()) {
    const auto m = detail::checked(k, [&] { return modality_from_string(k); });
    r.metrics_by_modality[m] = detail::string_list(j.at("metrics_by_modality"), k, k.c_str());
  }

  if (!j.contains("explainer_catalog") || !j.at("explainer_catalog").is_array())
    throw ValidationError("registry", "missing 'explainer_catalog'");
  for (const auto& c : j.at("explainer_catalog")) {
    CatalogItem item;
    item.id = detail::required_string(c, "explainer_catalog", "id");
    item.name = detail::required_string(c, item.id, "name");
    item.modality = detail::checked(item.id, [&] { return modality_from_string(detail::required_string(c, item.id, "modality")); });
    item.data_types = detail::string_list(c, item.id, "data_types");
    r.explainer_catalog.push_back(std::move(item));
  }

  if (!j.contains("templates") || !j.at("templates").is_array()) throw ValidationError("registry", "missing 'templates'");
  for (const auto& t : j.at("templates")) {
    NLTemplate tpl;
    tpl.template_id = detail::required_string(t, "templates", "template_id");
    tpl.explanation_type = detail::checked(tpl.template_id, [&] {
      return explanation_type_from_string(detail::required_string(t, tpl.template_id, "explanation_type"));
    });
    tpl.slots = detail::string_list(t, tpl.template_id, "slots");
    tpl.text_skeleton = detail::required_string(t, tpl.template_id, "text_skeleton");
    if (r.templates.count(tpl.template_id)) throw ValidationError(tpl.template_id, "duplicate template id");
    r.templates[tpl.template_id] = std::move(tpl);
  }

  if (!j.contains("entries") || !j.at("entries").is_array()) throw ValidationError("registry", "missing 'entries'");
  for (const auto& e : j.at("entries")) {
    RegistryEntry entry;
    const std::string name = detail::required_string(e, "entries", "explanation_type");
    entry.explanation_type = detail::checked(name, [&] { return explanation_type_from_string(name); });
    entry.eo_class = e.value("eo_class", "");
    entry.definition = detail::required_string(e, name, "definition");
    entry.question_cues = detail::string_list(e, name, "question_cues");
    entry.explainer_methods = detail::string_list(e, name, "explainer_methods");
    if (e.contains("output_modality") && !e.at("output_modality").is_null())
      entry.output_modality =
          detail::checked(name, [&] { return modality_from_string(detail::required_string(e, name, "output_modality")); });
    entry.metrics = detail::string_list(e, name, "metrics");
    entry.template_id = detail::required_string(e, name, "template");
    entry.supported_data_types = detail::string_list(e, name, "supported_data_types");
    if (r.entries.count(entry.explanation_type)) throw ValidationError(name, "duplicate entry");
    r.entries[entry.explanation_type] = std::move(entry);
  }

  for (const auto& name : detail::string_list(j, "registry", "cue_priority"))
    r.cue_priority.push_back(detail::checked("cue_priority", [&] { return explanation_type_from_string(name); }));

  validate_registry(r);
  return r;
}

inline json registry_to_json(const Registry& r) {
  json metrics = json::object();
  for (const auto& [m, ids] : r.metrics_by_modality) metrics[std::string(to_string(m))] = ids;
  json catalog = json::array();
  for (const auto& c : r.explainer_catalog)
    catalog.push_back({{"id", c.id}, {"name", c.name}, {"modality", to_string(c.modality)}, {"data_types", c.data_types}});
  json entries = json::array();
  for (const auto& [t, e] : r.entries)
    entries.push_back({{"explanation_type", to_string(t)},
                       {"eo_class", e.eo_class},
                       {"definition", e.definition},
                       {"question_cues", e.question_cues},
                       {"explainer_methods", e.explainer_methods},
                       {"output_modality", e.output_modality ? json(to_string(*e.output_modality)) : json(nullptr)},
                       {"metrics", e.metrics},
                       {"template", e.template_id},
                       {"supported_data_types", e.supported_data_types}});
  json templates = json::array();
  for (const auto& [id, t] : r.templates)
    templates.push_back({{"template_id", id},
                         {"explanation_type", to_string(t.explanation_type)},
                         {"slots", t.slots},
                         {"text_skeleton", t.text_skeleton}});
  std::vector<std::string> prio;
  for (auto t : r.cue_priority) prio.emplace_back(to_string(t));
  return {{"version", r.version},
          {"cue_priority", prio},
          {"metrics_by_modality", metrics},
          {"explainer_catalog", catalog},
          {"entries", entries},
          {"templates", templates}};
}

inline Registry load_registry(const std::string& path) {
  const std::string text = csv::read_file(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(path, std::string("not valid JSON: ") + e.what());
  }
  return registry_from_json(j);
}

inline const std::vector<ExplainerId>& explainers_for(const Registry& r, ExplanationType t) {
  if (!is_supported(t)) throw Error(ErrorCode::UnsupportedType, std::string(to_string(t)));
  return r.entry(t).explainer_methods;
}

inline std::vector<ExplainerId> explainers_for_data_type(const Registry& r, const std::string& data_type) {
  std::vector<ExplainerId> out;
  for (const auto& c : r.explainer_catalog)
    if (std::find(c.data_types.begin(), c.data_types.end(), data_type) != c.data_types.end()) out.push_back(c.id);
  if (out.empty()) throw Error(ErrorCode::UnknownKey, "data type '" + data_type + "'");
  return out;
}

inline const NLTemplate& template_for(const Registry& r, ExplanationType t) {
  const auto& e = r.entry(t);
  auto it = r.templates.find(e.template_id);
  if (it == r.templates.end()) throw Error(ErrorCode::UnknownKey, "template '" + e.template_id + "'");
  return it->second;
}

inline const std::vector<std::string>& metrics_for_modality(const Registry& r, Modality m) {
  auto it = r.metrics_by_modality.find(m);
  if (it == r.metrics_by_modality.end()) throw Error(ErrorCode::UnknownKey, std::string(to_string(m)));
  return it->second;
}

}  // namespace xplain
