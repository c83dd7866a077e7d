#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "xplain/csv.hpp"
#include "xplain/error.hpp"
#include "xplain/numfmt.hpp"
#include "xplain/rng.hpp"

namespace xplain {

using json = nlohmann::json;

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

enum class FeatureKind { Continuous, Integer };

struct DatasetSchema {
  std::vector<std::string> feature_names;
  std::vector<FeatureKind> feature_kinds;
  std::vector<std::string> display_names;
  std::vector<bool> zero_means_missing;
  std::vector<bool> mutability;
  // Absolute slack used when a question pins a feature to a value.
  std::vector<double> eq_tolerance;
  std::string outcome_name;
  // outcome_labels[1] is the positive class.
  std::vector<std::string> outcome_labels;
  // Name of the predicted condition as it appears in questions and predicates.
  std::string target_name;
  std::vector<std::string> target_aliases;
  // lower-cased surface form -> canonical feature name
  std::map<std::string, std::string> feature_aliases;

  std::size_t feature_count() const { return feature_names.size(); }

  std::optional<std::size_t> index_of(std::string_view canonical) const {
    for (std::size_t i = 0; i < feature_names.size(); ++i)
      if (feature_names[i] == canonical) return i;
    return std::nullopt;
  }

  // Canonical name or alias, case-insensitive.
  std::optional<std::size_t> resolve(std::string_view surface) const {
    const std::string key = to_lower(trim(surface));
    for (std::size_t i = 0; i < feature_names.size(); ++i)
      if (to_lower(feature_names[i]) == key) return i;
    auto it = feature_aliases.find(key);
    if (it == feature_aliases.end()) return std::nullopt;
    return index_of(it->second);
  }

  bool is_target(std::string_view surface) const {
    const std::string key = to_lower(trim(surface));
    if (key == to_lower(target_name) || key == to_lower(outcome_name)) return true;
    return std::any_of(target_aliases.begin(), target_aliases.end(),
                       [&](const std::string& a) { return to_lower(a) == key; });
  }

  void validate() const {
    const std::size_t m = feature_names.size();
    if (m == 0) throw Error(ErrorCode::InvalidArgument, "schema has no features");
    if (feature_kinds.size() != m || display_names.size() != m || zero_means_missing.size() != m ||
        mutability.size() != m || eq_tolerance.size() != m)
      throw Error(ErrorCode::InvalidArgument, "schema per-feature arrays differ in length");
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = i + 1; j < m; ++j)
        if (to_lower(feature_names[i]) == to_lower(feature_names[j]))
          throw Error(ErrorCode::InvalidArgument, "duplicate feature " + feature_names[i]);
      if (feature_names[i] == outcome_name)
        throw Error(ErrorCode::InvalidArgument, "outcome column is also a feature");
      if (!(eq_tolerance[i] >= 0.0))
        throw Error(ErrorCode::InvalidArgument, "negative tolerance for " + feature_names[i]);
    }
    if (outcome_labels.size() != 2)
      throw Error(ErrorCode::InvalidArgument, "outcome must have exactly two labels");
    for (const auto& [alias, canonical] : feature_aliases) {
      if (!index_of(canonical))
        throw Error(ErrorCode::InvalidArgument, "alias '" + alias + "' targets unknown feature " + canonical);
      for (std::size_t i = 0; i < m; ++i)
        if (to_lower(feature_names[i]) == alias && feature_names[i] != canonical)
          throw Error(ErrorCode::InvalidArgument, "alias '" + alias + "' shadows feature " + feature_names[i]);
    }
  }
};

inline std::string to_string(FeatureKind k) { return k == FeatureKind::Integer ? "integer" : "continuous"; }

inline DatasetSchema schema_from_json(const json& j) {
  DatasetSchema s;
  const auto& outcome = j.at("outcome");
  s.outcome_name = outcome.at("name").get<std::string>();
  s.outcome_labels = outcome.at("labels").get<std::vector<std::string>>();
  s.target_name = outcome.value("target", s.outcome_name);
  s.target_aliases = outcome.value("aliases", std::vector<std::string>{});
  for (const auto& f : j.at("features")) {
    const std::string name = f.at("name").get<std::string>();
    s.feature_names.push_back(name);
    const std::string kind = f.value("kind", "continuous");
    if (kind != "continuous" && kind != "integer")
      throw Error(ErrorCode::InvalidArgument, "feature kind '" + kind + "' for " + name);
    s.feature_kinds.push_back(kind == "integer" ? FeatureKind::Integer : FeatureKind::Continuous);
    s.display_names.push_back(f.value("display", name));
    s.zero_means_missing.push_back(f.value("zero_means_missing", false));
    s.mutability.push_back(f.value("mutable", true));
    s.eq_tolerance.push_back(f.value("eq_tolerance", 0.0));
    for (const auto& alias : f.value("aliases", std::vector<std::string>{})) {
      const std::string key = to_lower(alias);
      auto [it, inserted] = s.feature_aliases.emplace(key, name);
      if (!inserted && it->second != name)
        throw Error(ErrorCode::InvalidArgument, "alias '" + alias + "' maps to both " + it->second + " and " + name);
    }
  }
  s.validate();
  return s;
}

inline json schema_to_json(const DatasetSchema& s) {
  json features = json::array();
  for (std::size_t i = 0; i < s.feature_count(); ++i) {
    std::vector<std::string> aliases;
    for (const auto& [alias, canonical] : s.feature_aliases)
      if (canonical == s.feature_names[i]) aliases.push_back(alias);
    features.push_back({{"name", s.feature_names[i]},
                        {"kind", to_string(s.feature_kinds[i])},
                        {"display", s.display_names[i]},
                        {"zero_means_missing", static_cast<bool>(s.zero_means_missing[i])},
                        {"mutable", static_cast<bool>(s.mutability[i])},
                        {"eq_tolerance", s.eq_tolerance[i]},
                        {"aliases", aliases}});
  }
  return {{"outcome",
           {{"name", s.outcome_name},
            {"labels", s.outcome_labels},
            {"target", s.target_name},
            {"aliases", s.target_aliases}}},
          {"features", features}};
}

inline DatasetSchema load_schema(const std::string& path) {
  try {
    return schema_from_json(json::parse(csv::read_file(path)));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, "schema " + path + ": " + e.what());
  }
}

struct Dataset {
  DatasetSchema schema;
  std::vector<std::vector<double>> rows;
  // Index into schema.outcome_labels.
  std::vector<int> outcomes;
  std::vector<std::int64_t> row_ids;

  std::size_t size() const { return rows.size(); }
  bool empty() const { return rows.empty(); }

  std::vector<double> column(std::size_t j) const {
    std::vector<double> c;
    c.reserve(rows.size());
    for (const auto& r : rows) c.push_back(r[j]);
    return c;
  }

  Dataset subset(const std::vector<std::size_t>& indices) const {
    Dataset out{schema, {}, {}, {}};
    out.rows.reserve(indices.size());
    for (std::size_t i : indices) {
      out.rows.push_back(rows[i]);
      out.outcomes.push_back(outcomes[i]);
      out.row_ids.push_back(row_ids[i]);
    }
    return out;
  }

  bool operator==(const Dataset& o) const {
    return rows == o.rows && outcomes == o.outcomes && row_ids == o.row_ids;
  }
};

struct CellError {
  std::size_t row;  // 1-based data row (header excluded)
  std::string column;
};

class DataError : public Error {
 public:
  DataError(ErrorCode code, const std::string& what, std::vector<CellError> cells = {})
      : Error(code, what), cells_(std::move(cells)) {}
  const std::vector<CellError>& cells() const { return cells_; }

 private:
  std::vector<CellError> cells_;
};

inline Dataset parse_dataset(std::string_view text, const DatasetSchema& schema) {
  const auto records = csv::parse(text);
  if (records.size() <= 1) throw DataError(ErrorCode::EmptyFile, records.empty() ? "no header" : "header only");

  const auto& header = records.front();
  std::vector<std::optional<std::size_t>> column_of_feature(schema.feature_count());
  std::optional<std::size_t> outcome_column;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string name = trim(header[c]);
    if (to_lower(name) == to_lower(schema.outcome_name)) {
      outcome_column = c;
      continue;
    }
    if (auto f = schema.resolve(name)) column_of_feature[*f] = c;
  }
  for (std::size_t f = 0; f < schema.feature_count(); ++f)
    if (!column_of_feature[f]) throw DataError(ErrorCode::MissingColumn, schema.feature_names[f]);
  if (!outcome_column) throw DataError(ErrorCode::MissingColumn, schema.outcome_name);

  Dataset ds{schema, {}, {}, {}};
  std::vector<CellError> bad;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    std::vector<double> row(schema.feature_count());
    bool ok = true;
    for (std::size_t f = 0; f < schema.feature_count(); ++f) {
      const std::size_t c = *column_of_feature[f];
      std::optional<double> v = c < rec.size() ? parse_double(rec[c]) : std::nullopt;
      if (!v || !std::isfinite(*v)) {
        bad.push_back({r, schema.feature_names[f]});
        ok = false;
      } else {
        row[f] = *v;
      }
    }
    int label = -1;
    if (*outcome_column < rec.size()) {
      const std::string cell = trim(rec[*outcome_column]);
      for (std::size_t l = 0; l < schema.outcome_labels.size(); ++l) {
        if (cell == schema.outcome_labels[l]) label = static_cast<int>(l);
      }
      if (label < 0) {
        auto v = parse_double(cell);
        for (std::size_t l = 0; v && l < schema.outcome_labels.size(); ++l) {
          auto lv = parse_double(schema.outcome_labels[l]);
          if (lv && *lv == *v) label = static_cast<int>(l);
        }
      }
    }
    if (label < 0) {
      bad.push_back({r, schema.outcome_name});
      ok = false;
    }
    if (ok) {
      ds.rows.push_back(std::move(row));
      ds.outcomes.push_back(label);
      ds.row_ids.push_back(static_cast<std::int64_t>(r - 1));
    }
  }
  if (!bad.empty()) {
    const std::string what = "row " + std::to_string(bad.front().row) + ", column " + bad.front().column + " (" +
                             std::to_string(bad.size()) + " bad cells)";
    throw DataError(ErrorCode::UnparseableCell, what, std::move(bad));
  }
  return ds;
}

inline Dataset load_dataset(const std::string& path, const DatasetSchema& schema) {
  return parse_dataset(csv::read_file(path), schema);
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return NAN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Zeros in columns flagged zero_means_missing become the median of that
// column's non-zero values.
inline Dataset impute_medians(const Dataset& ds) {
  Dataset out = ds;
  for (std::size_t f = 0; f < ds.schema.feature_count(); ++f) {
    if (!ds.schema.zero_means_missing[f]) continue;
    std::vector<double> present;
    for (const auto& r : ds.rows)
      if (r[f] != 0.0) present.push_back(r[f]);
    if (present.empty() && !ds.rows.empty())
      throw Error(ErrorCode::AllMissingColumn, ds.schema.feature_names[f]);
    if (present.size() == ds.rows.size()) continue;
    const double med = median_of(std::move(present));
    for (auto& r : out.rows)
      if (r[f] == 0.0) r[f] = med;
  }
  return out;
}

inline std::pair<Dataset, Dataset> split(const Dataset& ds, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw Error(ErrorCode::InvalidArgument, "test_fraction must lie in (0, 1)");
  const std::size_t classes = ds.schema.outcome_labels.size();
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.outcomes[i])].push_back(i);
  for (std::size_t c = 0; c < classes; ++c)
    if (by_class[c].size() < 2)
      throw Error(ErrorCode::ClassTooSmall, "class " + ds.schema.outcome_labels[c] + " has " +
                                                std::to_string(by_class[c].size()) + " rows");

  // Largest-remainder apportionment of round(N * fraction) test rows.
  const auto total_test = static_cast<std::size_t>(std::llround(static_cast<double>(ds.size()) * test_fraction));
  std::vector<std::size_t> take(classes);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const double exact = static_cast<double>(by_class[c].size()) * test_fraction;
    take[c] = static_cast<std::size_t>(std::floor(exact));
    assigned += take[c];
    remainders.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total_test && k < remainders.size(); ++k, ++assigned) take[remainders[k].second]++;

  Rng rng(seed);
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t c = 0; c < classes; ++c) {
    auto members = by_class[c];
    rng.shuffle(members);
    test_idx.insert(test_idx.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take[c]));
    train_idx.insert(train_idx.end(), members.begin() + static_cast<std::ptrdiff_t>(take[c]), members.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  return {ds.subset(train_idx), ds.subset(test_idx)};
}

enum class ConstraintOp { EQ, LT, LE, GT, GE, RANGE };

inline std::string_view to_string(ConstraintOp op) {
  switch (op) {
    case ConstraintOp::EQ: return "EQ";
    case ConstraintOp::LT: return "LT";
    case ConstraintOp::LE: return "LE";
    case ConstraintOp::GT: return "GT";
    case ConstraintOp::GE: return "GE";
    case ConstraintOp::RANGE: return "RANGE";
  }
  return "EQ";
}

inline ConstraintOp constraint_op_from_string(std::string_view s) {
  for (auto op : {ConstraintOp::EQ, ConstraintOp::LT, ConstraintOp::LE, ConstraintOp::GT, ConstraintOp::GE,
                  ConstraintOp::RANGE})
    if (to_string(op) == s) return op;
  throw Error(ErrorCode::InvalidArgument, "constraint op '" + std::string(s) + "'");
}

struct FeatureConstraint {
  std::string feature;
  ConstraintOp op = ConstraintOp::EQ;
  double value = 0.0;
  // Upper bound when op == RANGE (value is the lower bound).
  double high = 0.0;
  double tolerance = 0.0;

  bool satisfied_by(double x) const {
    switch (op) {
      case ConstraintOp::EQ: return std::abs(x - value) <= tolerance;
      case ConstraintOp::LT: return x < value;
      case ConstraintOp::LE: return x <= value;
      case ConstraintOp::GT: return x > value;
      case ConstraintOp::GE: return x >= value;
      case ConstraintOp::RANGE: return x >= value && x <= high;
    }
    return false;
  }

  bool operator==(const FeatureConstraint&) const = default;
};

inline void to_json(json& j, const FeatureConstraint& c) {
  j = {{"feature", c.feature}, {"op", to_string(c.op)}, {"value", c.value}, {"tolerance", c.tolerance}};
  if (c.op == ConstraintOp::RANGE) j["high"] = c.high;
}

inline void from_json(const json& j, FeatureConstraint& c) {
  c.feature = j.at("feature").get<std::string>();
  c.op = constraint_op_from_string(j.at("op").get<std::string>());
  c.value = j.at("value").get<double>();
  c.high = j.value("high", 0.0);
  c.tolerance = j.value("tolerance", 0.0);
}

struct FeatureStats {
  double mean = 0.0, median = 0.0, std = 0.0, min = 0.0, max = 0.0;
  bool operator==(const FeatureStats&) const = default;
};

struct SubsetSummary {
  std::size_t match_count = 0;
  std::size_t total_count = 0;
  std::vector<std::string> feature_names;
  std::vector<FeatureStats> per_feature_stats;
  double outcome_rate = 0.0;
  bool fallback_used = false;

  const FeatureStats& stats(std::string_view feature) const {
    for (std::size_t i = 0; i < feature_names.size(); ++i)
      if (feature_names[i] == feature) return per_feature_stats[i];
    throw Error(ErrorCode::UnknownFeature, std::string(feature));
  }

  bool operator==(const SubsetSummary&) const = default;
};

inline void to_json(json& j, const SubsetSummary& s) {
  json stats = json::object();
  for (std::size_t i = 0; i < s.feature_names.size(); ++i) {
    const auto& f = s.per_feature_stats[i];
    stats[s.feature_names[i]] = {{"mean", f.mean}, {"median", f.median}, {"std", f.std}, {"min", f.min}, {"max", f.max}};
  }
  j = {{"match_count", s.match_count},
       {"total_count", s.total_count},
       {"feature_order", s.feature_names},
       {"per_feature_stats", stats},
       {"outcome_rate", s.outcome_rate},
       {"fallback_used", s.fallback_used}};
}

inline void from_json(const json& j, SubsetSummary& s) {
  s.match_count = j.at("match_count").get<std::size_t>();
  s.total_count = j.at("total_count").get<std::size_t>();
  s.feature_names = j.at("feature_order").get<std::vector<std::string>>();
  s.per_feature_stats.clear();
  for (const auto& name : s.feature_names) {
    const auto& f = j.at("per_feature_stats").at(name);
    s.per_feature_stats.push_back({f.at("mean").get<double>(), f.at("median").get<double>(), f.at("std").get<double>(),
                                   f.at("min").get<double>(), f.at("max").get<double>()});
  }
  s.outcome_rate = j.at("outcome_rate").get<double>();
  s.fallback_used = j.at("fallback_used").get<bool>();
}

inline SubsetSummary summarize_stats(const Dataset& ds) {
  if (ds.empty()) throw Error(ErrorCode::EmptyDataset, "cannot summarize zero rows");
  SubsetSummary s;
  s.match_count = s.total_count = ds.size();
  s.feature_names = ds.schema.feature_names;
  const double n = static_cast<double>(ds.size());
  for (std::size_t f = 0; f < ds.schema.feature_count(); ++f) {
    auto col = ds.column(f);
    FeatureStats st;
    double sum = 0.0;
    for (double v : col) sum += v;
    st.mean = sum / n;
    double ss = 0.0;
    for (double v : col) ss += (v - st.mean) * (v - st.mean);
    st.std = ds.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    auto [lo, hi] = std::minmax_element(col.begin(), col.end());
    st.min = *lo;
    st.max = *hi;
    st.median = median_of(std::move(col));
    s.per_feature_stats.push_back(st);
  }
  std::size_t positives = 0;
  for (int o : ds.outcomes) positives += o == 1;
  s.outcome_rate = static_cast<double>(positives) / n;
  return s;
}

inline std::pair<Dataset, SubsetSummary> filter_subset(const Dataset& ds,
                                                      const std::vector<FeatureConstraint>& constraints) {
  std::vector<std::pair<std::size_t, const FeatureConstraint*>> resolved;
  for (const auto& c : constraints) {
    auto f = ds.schema.index_of(c.feature);
    if (!f) throw Error(ErrorCode::UnknownFeature, c.feature);
    resolved.emplace_back(*f, &c);
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    bool ok = std::all_of(resolved.begin(), resolved.end(),
                          [&](const auto& rc) { return rc.second->satisfied_by(ds.rows[i][rc.first]); });
    if (ok) keep.push_back(i);
  }
  if (keep.empty()) {
    SubsetSummary s = summarize_stats(ds);
    s.match_count = 0;
    s.fallback_used = true;
    return {ds, s};
  }
  Dataset sub = ds.subset(keep);
  SubsetSummary s = summarize_stats(sub);
  s.total_count = ds.size();
  return {std::move(sub), s};
}

// Per-feature (mean, population std) used by explainers that work in
// standardized units. A zero std is reported as 0; callers decide the guard.
inline std::pair<std::vector<double>, std::vector<double>> column_moments(const std::vector<std::vector<double>>& rows) {
  const std::size_t m = rows.empty() ? 0 : rows.front().size();
  std::vector<double> mean(m, 0.0), sd(m, 0.0);
  if (rows.empty()) return {mean, sd};
  const double n = static_cast<double>(rows.size());
  for (const auto& r : rows)
    for (std::size_t j = 0; j < m; ++j) mean[j] += r[j];
  for (double& v : mean) v /= n;
  for (const auto& r : rows)
    for (std::size_t j = 0; j < m; ++j) sd[j] += (r[j] - mean[j]) * (r[j] - mean[j]);
  for (double& v : sd) v = std::sqrt(v / n);
  return {mean, sd};
}

}  // namespace xplain
