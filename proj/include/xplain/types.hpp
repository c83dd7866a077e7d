#pragma once

#include <array>
#include <string>
#include <string_view>

#include "xplain/data.hpp"
#include "xplain/error.hpp"

namespace xplain {

enum class ExplanationType { CaseBased, Contrastive, Counterfactual, Data, Rationale, Contextual, Unknown };

inline constexpr std::array<ExplanationType, 7> kAllExplanationTypes = {
    ExplanationType::CaseBased, ExplanationType::Contrastive, ExplanationType::Counterfactual, ExplanationType::Data,
    ExplanationType::Rationale, ExplanationType::Contextual,  ExplanationType::Unknown};

inline constexpr std::array<ExplanationType, 5> kSupportedExplanationTypes = {
    ExplanationType::CaseBased, ExplanationType::Contrastive, ExplanationType::Counterfactual, ExplanationType::Data,
    ExplanationType::Rationale};

inline std::string_view to_string(ExplanationType t) {
  switch (t) {
    case ExplanationType::CaseBased: return "CaseBased";
    case ExplanationType::Contrastive: return "Contrastive";
    case ExplanationType::Counterfactual: return "Counterfactual";
    case ExplanationType::Data: return "Data";
    case ExplanationType::Rationale: return "Rationale";
    case ExplanationType::Contextual: return "Contextual";
    case ExplanationType::Unknown: return "Unknown";
  }
  return "Unknown";
}

// Accepts the canonical names plus the long forms used in explanation
// ontologies ("Case Based Explanation", "Rationale Explanation", ...).
inline ExplanationType explanation_type_from_string(std::string_view s) {
  std::string key;
  for (char c : to_lower(s))
    if (std::isalpha(static_cast<unsigned char>(c))) key.push_back(c);
  if (key.size() > 11 && key.ends_with("explanation")) key.resize(key.size() - 11);
  for (auto t : kAllExplanationTypes)
    if (to_lower(to_string(t)) == key) return t;
  throw Error(ErrorCode::InvalidArgument, "explanation type '" + std::string(s) + "'");
}

inline bool is_supported(ExplanationType t) {
  for (auto s : kSupportedExplanationTypes)
    if (s == t) return true;
  return false;
}

enum class Modality { Rules, Samples, Features };

inline std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::Rules: return "Rules";
    case Modality::Samples: return "Samples";
    case Modality::Features: return "Features";
  }
  return "";
}

inline Modality modality_from_string(std::string_view s) {
  for (auto m : {Modality::Rules, Modality::Samples, Modality::Features})
    if (to_string(m) == s) return m;
  throw Error(ErrorCode::InvalidArgument, "modality '" + std::string(s) + "'");
}

using ExplainerId = std::string;

}  // namespace xplain
