#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xplain/data.hpp"
#include "xplain/error.hpp"
#include "xplain/explainers.hpp"
#include "xplain/linalg.hpp"
#include "xplain/registry.hpp"
#include "xplain/types.hpp"

namespace xplain {

struct MetricReport {
  std::string metric_id;
  double value = 0.0;
  Modality modality = Modality::Features;
  std::optional<std::vector<double>> per_instance_values;
  json config_echo = json::object();

  bool operator==(const MetricReport&) const = default;
};

inline void to_json(json& j, const MetricReport& r) {
  j = {{"metric_id", r.metric_id},
       {"value", r.value},
       {"modality", to_string(r.modality)},
       {"per_instance_values", r.per_instance_values ? json(*r.per_instance_values) : json(nullptr)},
       {"config_echo", r.config_echo}};
}

inline void from_json(const json& j, MetricReport& r) {
  r.metric_id = j.at("metric_id").get<std::string>();
  r.value = j.at("value").get<double>();
  r.modality = modality_from_string(j.at("modality").get<std::string>());
  r.per_instance_values.reset();
  if (j.contains("per_instance_values") && !j.at("per_instance_values").is_null())
    r.per_instance_values = j.at("per_instance_values").get<std::vector<double>>();
  r.config_echo = j.value("config_echo", json::object());
}

// Aggregates per-instance scores into one report (value = their mean).
inline MetricReport mean_report(std::string metric_id, Modality modality, std::vector<double> values,
                                json config_echo = json::object()) {
  if (values.empty()) throw Error(ErrorCode::InvalidArgument, metric_id + ": no instances to aggregate");
  double s = 0;
  for (double v : values) s += v;
  MetricReport r{std::move(metric_id), s / static_cast<double>(values.size()), modality, std::move(values),
                 std::move(config_echo)};
  return r;
}

namespace detail {

inline std::vector<double> phi_of(const ExplainerOutput& o) {
  if (o.modality != Modality::Features) throw Error(ErrorCode::InvalidArgument, o.explainer_id + " has no attributions");
  std::vector<double> phi;
  for (const auto& a : o.attributions) phi.push_back(a.attribution);
  return phi;
}

inline void check_features(std::span<const double> phi, std::span<const double> x, const Dataset& background) {
  if (phi.size() != x.size() || x.size() != background.schema.feature_count())
    throw Error(ErrorCode::DimensionMismatch, "attributions, instance and background disagree on width");
  if (background.empty()) throw Error(ErrorCode::EmptyDataset, "empty background");
}

inline bool constant(std::span<const double> v) {
  for (double e : v)
    if (std::fabs(e - v[0]) > 1e-12 * std::max(1.0, std::fabs(v[0]))) return false;
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Features

// Pearson correlation between attributions and single-feature ablation effects
// delta_i = f(x) - f(x with feature i set to the background mean).
inline MetricReport faithfulness(const ProbaFn& f, std::span<const double> phi, std::span<const double> x,
                                 const Dataset& background) {
  detail::check_features(phi, x, background);
  const auto mu = column_moments(background.rows).first;
  const double fx = f(x);
  std::vector<double> row(x.begin(), x.end()), delta(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    row[i] = mu[i];
    delta[i] = fx - f(row);
    row[i] = x[i];
  }
  if (x.size() < 2 || detail::constant(phi) || detail::constant(delta))
    throw Error(ErrorCode::ZeroVariance, "faithfulness is undefined when attributions or ablation effects are constant");
  MetricReport r{"faithfulness", linalg::pearson(std::vector<double>(phi.begin(), phi.end()), delta), Modality::Features,
                 std::nullopt, {{"baseline", "background mean"}, {"correlation", "pearson"}}};
  return r;
}

inline MetricReport faithfulness(const ProbaFn& f, const ExplainerOutput& o, const Dataset& background) {
  if (!o.instance) throw Error(ErrorCode::InvalidArgument, "attribution output carries no instance");
  return faithfulness(f, detail::phi_of(o), *o.instance, background);
}

// 1 when restoring features from the mean row in increasing |phi| order moves
// the prediction by non-decreasing amounts, else 0.
inline MetricReport monotonicity(const ProbaFn& f, std::span<const double> phi, std::span<const double> x,
                                 const Dataset& background) {
  detail::check_features(phi, x, background);
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return std::fabs(phi[a]) < std::fabs(phi[b]); });
  auto row = column_moments(background.rows).first;
  double prev = f(row), last_step = -INFINITY;
  bool ok = true;
  for (std::size_t i : order) {
    row[i] = x[i];
    const double cur = f(row);
    const double step = std::fabs(cur - prev);
    if (step < last_step - 1e-12) ok = false;
    last_step = step;
    prev = cur;
  }
  MetricReport r{"monotonicity", ok ? 1.0 : 0.0, Modality::Features, std::nullopt,
                 {{"baseline", "background mean"}, {"variant", "boolean non-decreasing steps"}}};
  return r;
}

inline MetricReport monotonicity(const ProbaFn& f, const ExplainerOutput& o, const Dataset& background) {
  if (!o.instance) throw Error(ErrorCode::InvalidArgument, "attribution output carries no instance");
  return monotonicity(f, detail::phi_of(o), *o.instance, background);
}

// ---------------------------------------------------------------------------
// Rules

inline MetricReport avg_rule_length(const std::vector<Rule>& rules) {
  if (rules.empty()) throw Error(ErrorCode::EmptyRuleSet, "no rules");
  double total = 0;
  for (const auto& r : rules) total += static_cast<double>(r.conditions.size());
  MetricReport rep{"avg_rule_length", total / static_cast<double>(rules.size()), Modality::Rules, std::nullopt,
                   {{"rules", rules.size()}}};
  return rep;
}

// Share of rows where the rules agree with the model's predicted class.
inline MetricReport fidelity(const std::vector<Rule>& rules, const ProbaFn& f, const Dataset& data) {
  if (rules.empty()) throw Error(ErrorCode::EmptyRuleSet, "no rules");
  if (data.empty()) throw Error(ErrorCode::EmptyDataset, "no rows to score fidelity on");
  std::size_t agree = 0;
  for (const auto& row : data.rows) agree += apply_rules(rules, row) == (f(row) >= 0.5 ? 1 : 0);
  MetricReport rep{"fidelity", static_cast<double>(agree) / static_cast<double>(data.size()), Modality::Rules,
                   std::nullopt, {{"rows", data.size()}}};
  return rep;
}

// ---------------------------------------------------------------------------
// Samples

// Mean pairwise Euclidean distance in raw feature units.
inline MetricReport diversity(const std::vector<Sample>& samples) {
  if (samples.size() < 2) throw Error(ErrorCode::TooFewSamples, "diversity needs at least two samples");
  double total = 0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < samples.size(); ++a)
    for (std::size_t b = a + 1; b < samples.size(); ++b, ++pairs)
      total += std::sqrt(linalg::squared_distance(samples[a].values, samples[b].values));
  MetricReport rep{"diversity", total / static_cast<double>(pairs), Modality::Samples, std::nullopt,
                   {{"distance", "euclidean"}, {"units", "raw"}, {"samples", samples.size()}}};
  return rep;
}

// Weighted squared MMD between the samples (weights normalised to one) and
// the data, RBF kernel on data-standardised features. Default width: median
// heuristic on the standardised data.
inline MetricReport non_representativeness(const std::vector<Sample>& samples, const Dataset& data,
                                           std::optional<double> sigma = std::nullopt) {
  if (sigma && !(*sigma > 0)) throw Error(ErrorCode::NonPositiveWidth, "kernel width must be positive");
  if (samples.empty()) throw Error(ErrorCode::TooFewSamples, "no samples");
  if (data.empty()) throw Error(ErrorCode::EmptyDataset, "no data rows");
  double wsum = 0;
  for (const auto& s : samples) wsum += s.weight;
  if (!(wsum > 0)) throw Error(ErrorCode::InvalidArgument, "sample weights must sum to a positive value");

  const auto [mean, sd] = column_moments(data.rows);
  std::vector<std::vector<double>> p;
  std::vector<double> w;
  for (const auto& s : samples) {
    p.push_back(s.values);
    w.push_back(s.weight / wsum);
  }
  const auto zp = standardize_rows(p, mean, sd);
  const auto zd = standardize_rows(data.rows, mean, sd);
  const double width = sigma ? *sigma : median_heuristic(zd);

  double pp = 0, pd = 0, dd = 0;
  for (std::size_t a = 0; a < zp.size(); ++a)
    for (std::size_t b = 0; b < zp.size(); ++b) pp += w[a] * w[b] * rbf(zp[a], zp[b], width);
  for (std::size_t a = 0; a < zp.size(); ++a)
    for (const auto& d : zd) pd += w[a] * rbf(zp[a], d, width);
  for (std::size_t a = 0; a < zd.size(); ++a) {
    dd += 1.0;  // k(x, x)
    for (std::size_t b = a + 1; b < zd.size(); ++b) dd += 2.0 * rbf(zd[a], zd[b], width);
  }
  const double n = static_cast<double>(zd.size());
  const double mmd2 = pp - 2.0 * pd / n + dd / (n * n);
  MetricReport rep{"non_representativeness", mmd2 < 0 ? 0.0 : mmd2, Modality::Samples, std::nullopt,
                   {{"sigma", width},
                    {"sigma_rule", sigma ? "given" : "median_heuristic"},
                    {"standardization", "data z-score"},
                    {"estimator", "weighted MMD^2 (biased)"}}};
  return rep;
}

// ---------------------------------------------------------------------------
// Dispatch by metric id

struct MetricContext {
  ProbaFn model;
  const Dataset* background = nullptr;  // feature metrics: mean-imputation baseline
  const Dataset* data = nullptr;        // fidelity rows / representativeness reference
  std::optional<double> sigma;
};

inline MetricReport compute_metric(const std::string& id, const ExplainerOutput& o, const MetricContext& ctx) {
  auto need = [&](const Dataset* d, const char* what) -> const Dataset& {
    if (!d) throw Error(ErrorCode::InvalidArgument, id + " needs " + what);
    return *d;
  };
  if (id == "faithfulness") return faithfulness(ctx.model, o, need(ctx.background, "a background"));
  if (id == "monotonicity") return monotonicity(ctx.model, o, need(ctx.background, "a background"));
  if (id == "avg_rule_length") return avg_rule_length(o.rules);
  if (id == "fidelity") return fidelity(o.rules, ctx.model, need(ctx.data, "data"));
  if (id == "diversity") return diversity(o.samples);
  if (id == "non_representativeness") return non_representativeness(o.samples, need(ctx.data, "data"), ctx.sigma);
  throw Error(ErrorCode::UnknownKey, "no metric '" + id + "'");
}

// Every metric registered for the output's modality, in registry order.
// Metrics that are undefined for this output are skipped and listed in
// `skipped` with the reason.
inline std::vector<MetricReport> evaluate_output(const Registry& registry, const ExplainerOutput& o,
                                                 const MetricContext& ctx,
                                                 std::vector<std::pair<std::string, std::string>>* skipped = nullptr) {
  std::vector<MetricReport> out;
  for (const auto& id : metrics_for_modality(registry, o.modality)) {
    try {
      out.push_back(compute_metric(id, o, ctx));
    } catch (const Error& e) {
      if (e.code() == ErrorCode::UnknownKey || e.code() == ErrorCode::InvalidArgument) throw;
      if (skipped) skipped->emplace_back(id, std::string(to_string(e.code())) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace xplain
