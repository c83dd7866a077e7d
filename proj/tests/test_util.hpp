#pragma once

#include <string>
#include <vector>

#include "xplain/data.hpp"
#include "xplain/registry.hpp"

namespace xplain::testing {

inline std::string data_path(const std::string& name) { return std::string(XPLAIN_DATA_DIR) + "/" + name; }

inline const DatasetSchema& pima_schema() {
  static const DatasetSchema s = load_schema(data_path("pima_schema.json"));
  return s;
}

inline const Dataset& pima_raw() {
  static const Dataset d = load_dataset(data_path("pima.csv"), pima_schema());
  return d;
}

inline const Dataset& pima() {
  static const Dataset d = impute_medians(pima_raw());
  return d;
}

inline const Registry& default_registry() {
  static const Registry r = load_registry(data_path("registry.json"));
  return r;
}

// Schema with continuous features x0..x{m-1}, outcome "y" labelled 0/1.
inline DatasetSchema toy_schema(std::size_t m) {
  DatasetSchema s;
  for (std::size_t i = 0; i < m; ++i) {
    s.feature_names.push_back("x" + std::to_string(i));
    s.feature_kinds.push_back(FeatureKind::Continuous);
    s.display_names.push_back("x" + std::to_string(i));
    s.zero_means_missing.push_back(false);
    s.mutability.push_back(true);
    s.eq_tolerance.push_back(0.0);
  }
  s.outcome_name = "y";
  s.outcome_labels = {"0", "1"};
  s.target_name = "Y";
  return s;
}

inline Dataset toy_dataset(const std::vector<std::vector<double>>& rows, const std::vector<int>& labels) {
  Dataset d{toy_schema(rows.empty() ? 1 : rows.front().size()), rows, labels, {}};
  for (std::size_t i = 0; i < rows.size(); ++i) d.row_ids.push_back(static_cast<std::int64_t>(i));
  return d;
}

}  // namespace xplain::testing
