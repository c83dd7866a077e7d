#pragma once

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xplain/csv.hpp"
#include "xplain/data.hpp"
#include "xplain/error.hpp"
#include "xplain/fsutil.hpp"
#include "xplain/linalg.hpp"
#include "xplain/models.hpp"
#include "xplain/numfmt.hpp"
#include "xplain/rng.hpp"
#include "xplain/types.hpp"

namespace xplain {

// Probability of the positive class.
using ProbaFn = std::function<double(std::span<const double>)>;

inline ProbaFn as_proba_fn(const TrainedModel& m) {
  return [&m](std::span<const double> x) { return m.predict_proba(x); };
}

// ---------------------------------------------------------------------------
// Output types

struct Attribution {
  std::string feature;
  double attribution = 0.0;
  double base_value = 0.0;
  bool operator==(const Attribution&) const = default;
};

struct Sample {
  std::int64_t row_id = -1;  // -1 for synthesized rows
  std::vector<double> values;
  double weight = 1.0;
  std::optional<double> probability;
  bool zero_change = false;
  bool operator==(const Sample&) const = default;
};

struct Interval {
  double lo = -INFINITY;
  double hi = INFINITY;
  bool lo_closed = false;
  bool hi_closed = false;

  bool contains(double x) const {
    return (lo_closed ? x >= lo : x > lo) && (hi_closed ? x <= hi : x < hi);
  }
  bool empty() const { return lo > hi || (lo == hi && !(lo_closed && hi_closed)); }

  void cap_above(double t, bool closed) {
    if (t < hi || (t == hi && !closed)) {
      hi = t;
      hi_closed = closed;
    }
  }
  void cap_below(double t, bool closed) {
    if (t > lo || (t == lo && !closed)) {
      lo = t;
      lo_closed = closed;
    }
  }

  // "(-inf, 32.25]"
  std::string str() const {
    return std::string(lo_closed ? "[" : "(") + format_shortest(lo) + ", " + format_shortest(hi) + (hi_closed ? "]" : ")");
  }

  static Interval parse(std::string_view s) {
    const std::string t = trim(s);
    const auto comma = t.find(',');
    if (t.size() < 5 || comma == std::string::npos || (t.front() != '(' && t.front() != '[') ||
        (t.back() != ')' && t.back() != ']'))
      throw Error(ErrorCode::InvalidArgument, "interval '" + t + "'");
    auto lo = parse_double(t.substr(1, comma - 1));
    auto hi = parse_double(t.substr(comma + 1, t.size() - comma - 2));
    if (!lo || !hi) throw Error(ErrorCode::InvalidArgument, "interval '" + t + "'");
    return {*lo, *hi, t.front() == '[', t.back() == ']'};
  }

  bool operator==(const Interval&) const = default;
};

struct Condition {
  std::string feature;
  std::size_t index = 0;
  Interval interval;
  bool operator==(const Condition&) const = default;
};

struct Rule {
  std::vector<Condition> conditions;
  int label = 0;
  double coverage = 0.0;
  double precision = 0.0;

  bool covers(std::span<const double> row) const {
    for (const auto& c : conditions)
      if (!c.interval.contains(row[c.index])) return false;
    return true;
  }

  // "BMI in (-inf, 32.25] AND Age in (30, inf)"; empty for the always-true rule.
  std::string antecedent() const {
    std::string s;
    for (const auto& c : conditions) s += (s.empty() ? "" : " AND ") + c.feature + " in " + c.interval.str();
    return s;
  }

  bool operator==(const Rule&) const = default;
};

inline std::string condition_text(const Condition& c) {
  const auto& iv = c.interval;
  const bool has_lo = std::isfinite(iv.lo), has_hi = std::isfinite(iv.hi);
  auto lower = [&] { return c.feature + (iv.lo_closed ? " is greater than or equal to " : " is greater than ") + format_display(iv.lo); };
  auto upper = [&] { return (iv.hi_closed ? "less than or equal to " : "less than ") + format_display(iv.hi); };
  if (has_lo && has_hi) return lower() + " and " + upper();
  if (has_lo) return lower();
  if (has_hi) return c.feature + " is " + upper();
  return c.feature + " is any value";
}

// "IF BMI is less than or equal to 32.25, THEN label = 0"
inline std::string rule_text(const Rule& r, const std::vector<std::string>& labels = {}) {
  std::string cond;
  for (const auto& c : r.conditions) cond += (cond.empty() ? "" : " AND ") + condition_text(c);
  if (cond.empty()) cond = "any values";
  const std::string label = r.label >= 0 && static_cast<std::size_t>(r.label) < labels.size()
                                ? labels[static_cast<std::size_t>(r.label)]
                                : std::to_string(r.label);
  return "IF " + cond + ", THEN label = " + label;
}

struct ExplainerOutput {
  ExplainerId explainer_id;
  Modality modality = Modality::Features;
  std::vector<std::string> feature_names;
  std::vector<Attribution> attributions;
  std::vector<Sample> samples;
  std::vector<Rule> rules;
  std::optional<std::vector<double>> instance;
  std::uint64_t seed = 0;
  double runtime_ms = 0.0;
  json config = json::object();
  std::string note;

  std::vector<csv::Record> table() const {
    std::vector<csv::Record> t;
    switch (modality) {
      case Modality::Features:
        t.push_back({"feature", "attribution", "base_value"});
        for (const auto& a : attributions)
          t.push_back({a.feature, format_shortest(a.attribution), format_shortest(a.base_value)});
        break;
      case Modality::Samples: {
        csv::Record h{"row_id"};
        h.insert(h.end(), feature_names.begin(), feature_names.end());
        h.insert(h.end(), {"weight", "probability", "zero_change"});
        t.push_back(h);
        for (const auto& s : samples) {
          csv::Record r{std::to_string(s.row_id)};
          for (double v : s.values) r.push_back(format_shortest(v));
          r.push_back(format_shortest(s.weight));
          r.push_back(s.probability ? format_shortest(*s.probability) : "");
          r.push_back(s.zero_change ? "1" : "0");
          t.push_back(r);
        }
        break;
      }
      case Modality::Rules:
        t.push_back({"rule_id", "antecedent", "label", "coverage", "precision"});
        for (std::size_t i = 0; i < rules.size(); ++i)
          t.push_back({std::to_string(i), rules[i].antecedent(), std::to_string(rules[i].label),
                       format_shortest(rules[i].coverage), format_shortest(rules[i].precision)});
        break;
    }
    return t;
  }

  json metadata() const {
    return {{"explainer_id", explainer_id},
            {"modality", to_string(modality)},
            {"feature_names", feature_names},
            {"seed", seed},
            {"instance", instance ? json(*instance) : json(nullptr)},
            {"runtime_ms", runtime_ms},
            {"config", config},
            {"note", note}};
  }

  bool operator==(const ExplainerOutput&) const = default;
};

namespace detail {

inline double cell_number(const std::string& s, const char* what) {
  auto v = parse_double(s);
  if (!v) throw Error(ErrorCode::StoreCorrupt, std::string("bad ") + what + " '" + s + "'");
  return *v;
}

}  // namespace detail

// Rebuilds an output from its table and metadata sidecar.
inline ExplainerOutput output_from_table(const json& meta, const std::vector<csv::Record>& table) {
  ExplainerOutput o;
  o.explainer_id = meta.at("explainer_id").get<std::string>();
  o.modality = modality_from_string(meta.at("modality").get<std::string>());
  o.feature_names = meta.at("feature_names").get<std::vector<std::string>>();
  o.seed = meta.at("seed").get<std::uint64_t>();
  if (!meta.at("instance").is_null()) o.instance = meta.at("instance").get<std::vector<double>>();
  o.runtime_ms = meta.at("runtime_ms").get<double>();
  o.config = meta.at("config");
  o.note = meta.value("note", "");
  if (table.empty()) throw Error(ErrorCode::StoreCorrupt, o.explainer_id + ": table has no header");
  const std::size_t m = o.feature_names.size();
  for (std::size_t r = 1; r < table.size(); ++r) {
    const auto& row = table[r];
    switch (o.modality) {
      case Modality::Features:
        if (row.size() != 3) throw Error(ErrorCode::StoreCorrupt, "attribution row width");
        o.attributions.push_back({row[0], detail::cell_number(row[1], "attribution"), detail::cell_number(row[2], "base value")});
        break;
      case Modality::Samples: {
        if (row.size() != m + 4) throw Error(ErrorCode::StoreCorrupt, "sample row width");
        Sample s;
        s.row_id = static_cast<std::int64_t>(detail::cell_number(row[0], "row id"));
        for (std::size_t j = 0; j < m; ++j) s.values.push_back(detail::cell_number(row[1 + j], "value"));
        s.weight = detail::cell_number(row[m + 1], "weight");
        if (!row[m + 2].empty()) s.probability = detail::cell_number(row[m + 2], "probability");
        s.zero_change = row[m + 3] == "1";
        o.samples.push_back(std::move(s));
        break;
      }
      case Modality::Rules: {
        if (row.size() != 5) throw Error(ErrorCode::StoreCorrupt, "rule row width");
        Rule rule;
        std::string_view ant = row[1];
        while (!ant.empty()) {
          auto amp = ant.find(" AND ");
          auto part = ant.substr(0, amp);
          auto in = part.find(" in ");
          if (in == std::string_view::npos) throw Error(ErrorCode::StoreCorrupt, "antecedent '" + row[1] + "'");
          Condition c;
          c.feature = std::string(part.substr(0, in));
          auto it = std::find(o.feature_names.begin(), o.feature_names.end(), c.feature);
          if (it == o.feature_names.end()) throw Error(ErrorCode::StoreCorrupt, "rule feature '" + c.feature + "'");
          c.index = static_cast<std::size_t>(it - o.feature_names.begin());
          c.interval = Interval::parse(part.substr(in + 4));
          rule.conditions.push_back(c);
          ant = amp == std::string_view::npos ? std::string_view{} : ant.substr(amp + 5);
        }
        rule.label = static_cast<int>(detail::cell_number(row[2], "label"));
        rule.coverage = detail::cell_number(row[3], "coverage");
        rule.precision = detail::cell_number(row[4], "precision");
        o.rules.push_back(std::move(rule));
        break;
      }
    }
  }
  return o;
}

// <dir>/<explainer_id>.csv and <dir>/<explainer_id>.json
inline void save_output(const std::filesystem::path& dir, const ExplainerOutput& o) {
  fs::write_file_atomic(dir / (o.explainer_id + ".csv"), csv::write(o.table()));
  fs::write_file_atomic(dir / (o.explainer_id + ".json"), o.metadata().dump(2) + "\n");
}

inline ExplainerOutput load_output(const std::filesystem::path& dir, const ExplainerId& id) {
  try {
    const auto meta = json::parse(csv::read_file((dir / (id + ".json")).string()));
    return output_from_table(meta, csv::parse(csv::read_file((dir / (id + ".csv")).string())));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::StoreCorrupt, id + ": " + e.what());
  }
}

namespace detail {

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

inline std::vector<double> column_means(const Dataset& ds) {
  if (ds.empty()) throw Error(ErrorCode::EmptyDataset, "background is empty");
  return column_moments(ds.rows).first;
}

inline void check_instance(const Dataset& background, std::span<const double> x) {
  if (x.size() != background.schema.feature_count())
    throw Error(ErrorCode::DimensionMismatch, "instance has " + std::to_string(x.size()) + " values, expected " +
                                                  std::to_string(background.schema.feature_count()));
}

// v(S) for every coalition bitmask S: features in S from x, the rest from mu.
inline std::vector<double> coalition_values(const ProbaFn& f, std::span<const double> x, const std::vector<double>& mu) {
  const std::size_t m = mu.size();
  std::vector<double> v(std::size_t{1} << m);
  std::vector<double> row(m);
  for (std::size_t mask = 0; mask < v.size(); ++mask) {
    for (std::size_t j = 0; j < m; ++j) row[j] = (mask >> j) & 1 ? x[j] : mu[j];
    v[mask] = f(row);
  }
  return v;
}

inline double log_choose(std::size_t n, std::size_t k) {
  return std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(k) + 1) -
         std::lgamma(static_cast<double>(n - k) + 1);
}

inline ExplainerOutput features_output(const ExplainerId& id, const Dataset& bg, std::span<const double> x,
                                       const std::vector<double>& phi, double base) {
  ExplainerOutput o;
  o.explainer_id = id;
  o.modality = Modality::Features;
  o.feature_names = bg.schema.feature_names;
  for (std::size_t j = 0; j < phi.size(); ++j) o.attributions.push_back({bg.schema.feature_names[j], phi[j], base});
  o.instance = std::vector<double>(x.begin(), x.end());
  return o;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shapley values with a mean-imputation value function

inline constexpr std::size_t kMaxExactFeatures = 12;

inline ExplainerOutput exact_shapley(const ProbaFn& f, std::span<const double> x, const Dataset& background) {
  detail::Stopwatch clock;
  detail::check_instance(background, x);
  const std::size_t m = x.size();
  if (m > kMaxExactFeatures)
    throw Error(ErrorCode::TooManyFeatures, std::to_string(m) + " features; exact enumeration supports at most 12");
  const auto mu = detail::column_means(background);
  const auto v = detail::coalition_values(f, x, mu);
  std::vector<double> weight(m);  // |S|!(M-|S|-1)!/M!
  for (std::size_t s = 0; s < m; ++s)
    weight[s] = std::exp(std::lgamma(s + 1.0) + std::lgamma(static_cast<double>(m - s)) - std::lgamma(m + 1.0));
  std::vector<double> phi(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    for (std::size_t mask = 0; mask < v.size(); ++mask) {
      if (mask & bit) continue;
      phi[i] += weight[static_cast<std::size_t>(std::popcount(mask))] * (v[mask | bit] - v[mask]);
    }
  }
  auto o = detail::features_output("ExactShapley", background, x, phi, v[0]);
  o.config = {{"value_function", "mean_imputation"}, {"mode", "exact"}, {"background_mean", mu}};
  o.runtime_ms = clock.ms();
  return o;
}

struct KernelShapConfig {
  std::size_t n_coalition_samples = 2048;
  std::uint64_t seed = 0;
  // Sample coalitions even when exact enumeration is affordable.
  bool force_sampling = false;
};

// Weighted least squares over coalitions with the Shapley kernel, constrained
// so that phi_0 + sum(phi) = f(x), where phi_0 = f(mean row).
inline ExplainerOutput kernel_shap(const ProbaFn& f, std::span<const double> x, const Dataset& background,
                                   const KernelShapConfig& config = {}) {
  detail::Stopwatch clock;
  detail::check_instance(background, x);
  const std::size_t m = x.size();
  if (m == 0) throw Error(ErrorCode::InvalidArgument, "no features");
  bool degenerate = true;
  for (const auto& r : background.rows)
    if (!std::equal(r.begin(), r.end(), x.begin(), x.end())) degenerate = false;
  if (degenerate) throw Error(ErrorCode::DegenerateBackground, "every background row equals the instance");

  const auto mu = detail::column_means(background);
  const double base = f(mu);
  const double fx = f(x);
  const bool exact = m <= kMaxExactFeatures && !config.force_sampling;

  std::vector<std::vector<double>> a(m, std::vector<double>(m, 0.0));
  std::vector<double> b(m, 0.0);
  std::vector<double> row(m);
  std::size_t used = 0;
  auto add = [&](std::uint64_t mask_lo, const std::vector<char>* members, double w) {
    for (std::size_t j = 0; j < m; ++j) {
      const bool in = members ? (*members)[j] : ((mask_lo >> j) & 1);
      row[j] = in ? x[j] : mu[j];
    }
    const double y = f(row) - base;
    for (std::size_t i = 0; i < m; ++i) {
      const bool zi = members ? (*members)[i] : ((mask_lo >> i) & 1);
      if (!zi) continue;
      b[i] += w * y;
      for (std::size_t j = 0; j < m; ++j) {
        const bool zj = members ? (*members)[j] : ((mask_lo >> j) & 1);
        if (zj) a[i][j] += w;
      }
    }
    ++used;
  };

  if (exact) {
    const std::size_t full = (std::size_t{1} << m) - 1;
    for (std::size_t mask = 1; mask < full; ++mask) {
      const std::size_t s = static_cast<std::size_t>(std::popcount(mask));
      const double w = static_cast<double>(m - 1) /
                       (std::exp(detail::log_choose(m, s)) * static_cast<double>(s) * static_cast<double>(m - s));
      add(mask, nullptr, w);
    }
  } else if (m >= 2) {
    // Sizes drawn proportional to the total kernel mass of each size; each
    // draw then carries unit weight. Complements are added in pairs.
    Rng rng(config.seed);
    std::vector<double> cum;
    double total = 0;
    for (std::size_t s = 1; s < m; ++s) {
      total += static_cast<double>(m - 1) / (static_cast<double>(s) * static_cast<double>(m - s));
      cum.push_back(total);
    }
    std::vector<char> members(m), complement(m);
    for (std::size_t k = 0; k < std::max<std::size_t>(1, config.n_coalition_samples / 2); ++k) {
      const double u = rng.uniform() * total;
      const std::size_t s = 1 + static_cast<std::size_t>(std::lower_bound(cum.begin(), cum.end(), u) - cum.begin());
      std::fill(members.begin(), members.end(), 0);
      for (std::size_t j : rng.sample_without_replacement(m, std::min(s, m - 1))) members[j] = 1;
      for (std::size_t j = 0; j < m; ++j) complement[j] = !members[j];
      add(0, &members, 1.0);
      add(0, &complement, 1.0);
    }
  }

  // KKT system [A 1; 1' 0] [phi; lambda] = [b; f(x) - base]
  std::vector<std::vector<double>> kkt(m + 1, std::vector<double>(m + 1, 0.0));
  std::vector<double> rhs(m + 1, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) kkt[i][j] = a[i][j];
    kkt[i][m] = 1.0;
    kkt[m][i] = 1.0;
    rhs[i] = b[i];
  }
  rhs[m] = fx - base;
  auto sol = linalg::solve(kkt, rhs);
  sol.resize(m);

  auto o = detail::features_output("KernelShap", background, x, sol, base);
  o.seed = config.seed;
  o.config = {{"value_function", "mean_imputation"},
              {"mode", exact ? "exact" : "sampled"},
              {"coalitions", used},
              {"n_coalition_samples", config.n_coalition_samples},
              {"background_mean", mu}};
  o.runtime_ms = clock.ms();
  return o;
}

// ---------------------------------------------------------------------------
// Protodash

struct ProtodashConfig {
  std::size_t m = 5;
  std::optional<double> sigma;  // default: median heuristic
  int sweeps = 200;
  double tolerance = 1e-8;
};

struct ProtodashFit {
  std::vector<std::size_t> selected;  // source indices, selection order
  std::vector<double> weights;
  std::vector<double> objective_trace;  // l(w) after each greedy step
  double sigma = 1.0;
};

inline double rbf(const std::vector<double>& a, const std::vector<double>& b, double sigma) {
  return std::exp(-linalg::squared_distance(a, b) / (2.0 * sigma * sigma));
}

// z-scores with the given moments; zero-spread columns are only centred.
inline std::vector<std::vector<double>> standardize_rows(const std::vector<std::vector<double>>& rows,
                                                         const std::vector<double>& mean, const std::vector<double>& sd) {
  std::vector<std::vector<double>> out(rows);
  for (auto& r : out)
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = (r[j] - mean[j]) / (sd[j] > 0 ? sd[j] : 1.0);
  return out;
}

// Median pairwise distance over at most 256 evenly spaced rows.
inline double median_heuristic(const std::vector<std::vector<double>>& z) {
  std::vector<std::size_t> pick;
  const std::size_t n = z.size(), k = std::min<std::size_t>(n, 256);
  for (std::size_t i = 0; i < k; ++i) pick.push_back(i * n / k);
  std::vector<double> d;
  for (std::size_t a = 0; a < pick.size(); ++a)
    for (std::size_t b = a + 1; b < pick.size(); ++b) d.push_back(std::sqrt(linalg::squared_distance(z[pick[a]], z[pick[b]])));
  if (d.empty()) return 1.0;
  const double med = median_of(d);
  return med > 0 ? med : 1.0;
}

inline double protodash_objective(const std::vector<double>& w, const std::vector<double>& mu,
                                  const std::vector<std::vector<double>>& k) {
  double lin = 0, quad = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    lin += w[i] * mu[i];
    for (std::size_t j = 0; j < w.size(); ++j) quad += w[i] * k[i][j] * w[j];
  }
  return lin - 0.5 * quad;
}

// Projected coordinate ascent for max w'mu - w'Kw/2 subject to w >= 0.
inline std::vector<double> fit_prototype_weights(const std::vector<std::vector<double>>& k, const std::vector<double>& mu,
                                                 std::vector<double> w, int sweeps = 200, double tolerance = 1e-8) {
  w.resize(mu.size(), 0.0);
  for (int s = 0; s < sweeps; ++s) {
    double change = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      double g = mu[i];
      for (std::size_t j = 0; j < w.size(); ++j)
        if (j != i) g -= k[i][j] * w[j];
      const double next = std::max(0.0, g / k[i][i]);
      change = std::max(change, std::fabs(next - w[i]));
      w[i] = next;
    }
    if (change < tolerance) break;
  }
  return w;
}

inline ProtodashFit protodash_fit(const Dataset& target, const Dataset& source, const ProtodashConfig& config) {
  if (source.empty()) throw Error(ErrorCode::EmptySource, "no candidate rows");
  if (target.empty()) throw Error(ErrorCode::EmptyDataset, "no target rows");
  if (config.sigma && !(*config.sigma > 0)) throw Error(ErrorCode::NonPositiveWidth, "kernel width must be positive");
  if (config.m > source.size())
    throw Error(ErrorCode::InvalidArgument, "m = " + std::to_string(config.m) + " exceeds " + std::to_string(source.size()) + " source rows");

  const auto [mean, sd] = column_moments(source.rows);
  const auto zs = standardize_rows(source.rows, mean, sd);
  const auto zt = standardize_rows(target.rows, mean, sd);
  ProtodashFit fit;
  fit.sigma = config.sigma ? *config.sigma : median_heuristic(zs);

  const std::size_t n = zs.size();
  std::vector<double> mu(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& t : zt) mu[i] += rbf(zs[i], t, fit.sigma);
    mu[i] /= static_cast<double>(zt.size());
  }
  std::vector<std::vector<double>> kcol;  // kcol[s][i] = k(selected s, candidate i)
  std::vector<char> taken(n, 0);
  while (fit.selected.size() < config.m) {
    std::size_t best = n;
    double best_grad = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      double g = mu[i];
      for (std::size_t s = 0; s < fit.selected.size(); ++s) g -= kcol[s][i] * fit.weights[s];
      if (g > best_grad + 1e-15) {
        best_grad = g;
        best = i;
      }
    }
    if (best == n) break;  // no candidate improves the objective
    taken[best] = 1;
    fit.selected.push_back(best);
    std::vector<double> col(n);
    for (std::size_t i = 0; i < n; ++i) col[i] = rbf(zs[best], zs[i], fit.sigma);
    kcol.push_back(std::move(col));

    const std::size_t k = fit.selected.size();
    std::vector<std::vector<double>> kss(k, std::vector<double>(k));
    std::vector<double> mus(k);
    for (std::size_t a = 0; a < k; ++a) {
      mus[a] = mu[fit.selected[a]];
      for (std::size_t b = 0; b < k; ++b) kss[a][b] = kcol[a][fit.selected[b]];
    }
    fit.weights = fit_prototype_weights(kss, mus, fit.weights, config.sweeps, config.tolerance);
    fit.objective_trace.push_back(protodash_objective(fit.weights, mus, kss));
  }
  return fit;
}

inline ExplainerOutput protodash(const Dataset& target, const Dataset& source, const ProtodashConfig& config = {}) {
  detail::Stopwatch clock;
  const auto fit = protodash_fit(target, source, config);
  ExplainerOutput o;
  o.explainer_id = "Protodash";
  o.modality = Modality::Samples;
  o.feature_names = source.schema.feature_names;
  for (std::size_t s = 0; s < fit.selected.size(); ++s) {
    const std::size_t i = fit.selected[s];
    o.samples.push_back({source.row_ids[i], source.rows[i], fit.weights[s], std::nullopt, false});
  }
  o.config = {{"m", config.m},
              {"sigma", fit.sigma},
              {"sigma_rule", config.sigma ? "given" : "median_heuristic"},
              {"standardization", "source z-score"},
              {"sweeps", config.sweeps},
              {"target_rows", target.size()},
              {"source_rows", source.size()},
              {"objective", fit.objective_trace.empty() ? 0.0 : fit.objective_trace.back()}};
  if (fit.selected.size() < config.m)
    o.note = "stopped after " + std::to_string(fit.selected.size()) + " prototypes: no remaining candidate improves the objective";
  o.runtime_ms = clock.ms();
  return o;
}

// ---------------------------------------------------------------------------
// Genetic counterfactual search

struct CounterfactualConfig {
  std::size_t population = 64;
  int generations = 60;
  double lambda_prox = 0.5;
  double lambda_div = 0.1;
  std::uint64_t seed = 7;
  std::optional<int> desired_class;  // default: the opposite of the prediction
  std::size_t refine_pool = 24;
};

namespace detail {

class CounterfactualSearch {
 public:
  CounterfactualSearch(const ProbaFn& f, std::span<const double> x, const DatasetSchema& schema, const Dataset& reference,
                       int desired, const CounterfactualConfig& cfg)
      : f_(f), x_(x.begin(), x.end()), schema_(schema), desired_(desired), cfg_(cfg), rng_(cfg.seed) {
    const std::size_t m = x_.size();
    lo_.assign(m, INFINITY);
    hi_.assign(m, -INFINITY);
    for (const auto& r : reference.rows)
      for (std::size_t j = 0; j < m; ++j) {
        lo_[j] = std::min(lo_[j], r[j]);
        hi_[j] = std::max(hi_[j], r[j]);
      }
    sd_ = column_moments(reference.rows).second;
    for (auto& s : sd_)
      if (!(s > 0)) s = 1.0;
    for (std::size_t j = 0; j < m; ++j)
      if (schema.mutability[j]) mutable_.push_back(j);
  }

  const std::vector<std::size_t>& mutable_features() const { return mutable_; }

  bool valid(const std::vector<double>& c) const { return (f_(c) >= 0.5 ? 1 : 0) == desired_; }

  // Distance in standard-deviation units.
  double distance(const std::vector<double>& a, const std::vector<double>& b) const {
    double d = 0;
    for (std::size_t j = 0; j < a.size(); ++j) d += std::fabs(a[j] - b[j]) / sd_[j];
    return d;
  }

  double fitness(const std::vector<double>& c) const {
    const double p = f_(c);
    const bool ok = (p >= 0.5 ? 1 : 0) == desired_;
    const double hinge = desired_ == 1 ? std::max(0.0, 0.5 - p) : std::max(0.0, p - 0.5);
    return (ok ? 0.0 : -(1.0 + 10.0 * hinge)) - cfg_.lambda_prox * distance(c, x_);
  }

  std::vector<std::vector<double>> run() {
    std::vector<std::vector<double>> pop;
    const double scales[] = {0.5, 1.0, 2.0, 3.0};
    for (std::size_t i = 0; i < cfg_.population; ++i) {
      auto c = x_;
      bool moved = false;
      for (std::size_t j : mutable_)
        if (rng_.uniform() < 0.5) {
          c[j] += rng_.normal() * sd_[j] * scales[i % 4];
          moved = true;
        }
      if (!moved) {
        const std::size_t j = mutable_[rng_.index(mutable_.size())];
        c[j] += rng_.normal() * sd_[j] * scales[i % 4];
      }
      pop.push_back(repair(std::move(c)));
    }

    std::set<std::vector<double>> archive;
    const std::size_t elite = std::max<std::size_t>(2, cfg_.population / 16);
    for (int g = 0; g <= cfg_.generations; ++g) {
      std::vector<std::pair<double, std::size_t>> scored;
      for (std::size_t i = 0; i < pop.size(); ++i) {
        scored.emplace_back(fitness(pop[i]), i);
        if (valid(pop[i])) archive.insert(pop[i]);
      }
      if (g == cfg_.generations) break;
      std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
      std::vector<std::vector<double>> next;
      for (std::size_t e = 0; e < elite && e < scored.size(); ++e) next.push_back(pop[scored[e].second]);
      auto tournament = [&]() -> const std::vector<double>& {
        std::size_t best = rng_.index(pop.size());
        for (int t = 0; t < 2; ++t) {
          std::size_t c = rng_.index(pop.size());
          if (fitness_of(scored, c) > fitness_of(scored, best)) best = c;
        }
        return pop[best];
      };
      while (next.size() < cfg_.population) {
        const auto& a = tournament();
        const auto& b = tournament();
        auto child = a;
        for (std::size_t j : mutable_) {
          if (rng_.uniform() < 0.5) child[j] = b[j];
          if (rng_.uniform() < 0.3) child[j] += rng_.normal() * sd_[j] * 0.5;
        }
        next.push_back(repair(std::move(child)));
      }
      pop = std::move(next);
    }
    return {archive.begin(), archive.end()};
  }

  // Move each changed feature back toward the instance while the class stays flipped.
  std::vector<double> pull_back(std::vector<double> c) const {
    std::vector<std::size_t> order = mutable_;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return std::fabs(c[a] - x_[a]) / sd_[a] < std::fabs(c[b] - x_[b]) / sd_[b];
    });
    for (std::size_t j : order) {
      if (c[j] == x_[j]) continue;
      const double keep = c[j];
      c[j] = x_[j];
      if (valid(c)) continue;
      double bad = x_[j], good = keep;
      if (schema_.feature_kinds[j] == FeatureKind::Integer) {
        // Search the integers strictly past the instance value (which may
        // itself be fractional, e.g. a median) up to the kept value.
        const double dir = good > bad ? 1.0 : -1.0;
        const double first = dir > 0 ? std::floor(bad) + 1.0 : std::ceil(bad) - 1.0;
        long lo = 0, hi = std::max(0L, std::lround(std::fabs(std::round(good) - first)));
        while (lo < hi) {
          const long mid = lo + (hi - lo) / 2;
          c[j] = first + dir * static_cast<double>(mid);
          if (valid(c))
            hi = mid;
          else
            lo = mid + 1;
        }
        const double cand = first + dir * static_cast<double>(lo);
        c[j] = cand;
        if (valid(c)) good = cand;
      } else {
        for (int it = 0; it < 50; ++it) {
          const double mid = 0.5 * (bad + good);
          c[j] = mid;
          (valid(c) ? good : bad) = mid;
        }
      }
      c[j] = good;
    }
    return c;
  }

  const std::vector<double>& instance() const { return x_; }

 private:
  static double fitness_of(const std::vector<std::pair<double, std::size_t>>& scored, std::size_t i) {
    for (const auto& [fit, idx] : scored)
      if (idx == i) return fit;
    return -INFINITY;
  }

  std::vector<double> repair(std::vector<double> c) const {
    for (std::size_t j = 0; j < c.size(); ++j) {
      if (!schema_.mutability[j]) {
        c[j] = x_[j];
        continue;
      }
      if (schema_.feature_kinds[j] == FeatureKind::Integer) c[j] = std::round(c[j]);
      c[j] = std::clamp(c[j], lo_[j], hi_[j]);
    }
    return c;
  }

  const ProbaFn& f_;
  std::vector<double> x_;
  const DatasetSchema& schema_;
  int desired_;
  CounterfactualConfig cfg_;
  Rng rng_;
  std::vector<double> lo_, hi_, sd_;
  std::vector<std::size_t> mutable_;
};

}  // namespace detail

// `reference` supplies the observed feature ranges and spreads (usually the
// training set).
inline ExplainerOutput genetic_cf(const ProbaFn& f, std::span<const double> x, std::size_t k,
                                  const DatasetSchema& schema, const Dataset& reference,
                                  const CounterfactualConfig& config = {}) {
  detail::Stopwatch clock;
  if (k == 0) throw Error(ErrorCode::InvalidArgument, "k must be at least 1");
  if (x.size() != schema.feature_count()) throw Error(ErrorCode::DimensionMismatch, "instance width");
  if (reference.empty()) throw Error(ErrorCode::EmptyDataset, "no reference rows for feature ranges");
  const double p = f(x);
  const int current = p >= 0.5 ? 1 : 0;
  const int desired = config.desired_class.value_or(1 - current);

  ExplainerOutput o;
  o.explainer_id = "GeneticCF";
  o.modality = Modality::Samples;
  o.feature_names = schema.feature_names;
  o.instance = std::vector<double>(x.begin(), x.end());
  o.seed = config.seed;
  o.config = {{"population", config.population},
              {"generations", config.generations},
              {"lambda_prox", config.lambda_prox},
              {"lambda_div", config.lambda_div},
              {"desired_class", desired},
              {"distance", "L1 in reference standard deviations"}};

  if (current == desired) {
    o.samples.push_back({-1, std::vector<double>(x.begin(), x.end()), 1.0, p, true});
    o.note = "instance already has the desired class";
    o.runtime_ms = clock.ms();
    return o;
  }

  detail::CounterfactualSearch search(f, x, schema, reference, desired, config);
  if (search.mutable_features().empty()) throw Error(ErrorCode::NoValidCounterfactual, "no mutable features");
  auto found = search.run();
  if (found.empty())
    throw Error(ErrorCode::NoValidCounterfactual,
                "no class flip within " + std::to_string(config.generations) + " generations");

  std::stable_sort(found.begin(), found.end(), [&](const auto& a, const auto& b) {
    return search.distance(a, search.instance()) < search.distance(b, search.instance());
  });
  if (found.size() > config.refine_pool) found.resize(config.refine_pool);
  std::set<std::vector<double>> refined_set;
  std::vector<std::vector<double>> refined;
  for (const auto& c : found) {
    auto r = search.pull_back(c);
    if (search.valid(r) && refined_set.insert(r).second) refined.push_back(std::move(r));
  }
  std::stable_sort(refined.begin(), refined.end(), [&](const auto& a, const auto& b) {
    return search.distance(a, search.instance()) < search.distance(b, search.instance());
  });

  // Greedy set selection: proximity against mean distance to those already chosen.
  std::vector<std::size_t> chosen;
  std::vector<char> used(refined.size(), 0);
  while (chosen.size() < k && chosen.size() < refined.size()) {
    std::size_t best = refined.size();
    double best_score = -INFINITY;
    for (std::size_t i = 0; i < refined.size(); ++i) {
      if (used[i]) continue;
      double spread = 0;
      for (std::size_t c : chosen) spread += search.distance(refined[i], refined[c]);
      if (!chosen.empty()) spread /= static_cast<double>(chosen.size());
      const double score = -config.lambda_prox * search.distance(refined[i], search.instance()) + config.lambda_div * spread;
      if (score > best_score) {
        best_score = score;
        best = i;
      }
    }
    used[best] = 1;
    chosen.push_back(best);
  }
  for (std::size_t c : chosen) o.samples.push_back({-1, refined[c], 1.0, f(refined[c]), false});
  if (o.samples.size() < k)
    o.note = "found " + std::to_string(o.samples.size()) + " distinct counterfactuals of " + std::to_string(k) + " requested";
  o.runtime_ms = clock.ms();
  return o;
}

// ---------------------------------------------------------------------------
// Surrogate rules

struct RuleConfig {
  int surrogate_depth = 3;  // negative: unlimited
  std::size_t min_leaf = 5;
};

// One rule per root-to-leaf path; repeated splits on a feature merge into one
// interval. Conditions keep the order in which features first appear.
inline std::vector<Rule> rules_from_tree(const DecisionTree& tree, const std::vector<std::string>& feature_names) {
  std::vector<Rule> out;
  struct Frame {
    std::size_t node;
    std::vector<Condition> conds;
  };
  std::vector<Frame> stack{{0, {}}};
  while (!stack.empty()) {
    Frame fr = std::move(stack.back());
    stack.pop_back();
    const auto& n = tree.nodes[fr.node];
    if (n.is_leaf()) {
      Rule r;
      r.conditions = std::move(fr.conds);
      r.label = n.value >= 0.5 ? 1 : 0;
      out.push_back(std::move(r));
      continue;
    }
    const auto f = static_cast<std::size_t>(n.feature);
    auto with = [&](bool left) {
      auto conds = fr.conds;
      auto it = std::find_if(conds.begin(), conds.end(), [&](const Condition& c) { return c.index == f; });
      if (it == conds.end()) {
        conds.push_back({feature_names[f], f, Interval{}});
        it = conds.end() - 1;
      }
      if (left)
        it->interval.cap_above(n.threshold, true);
      else
        it->interval.cap_below(n.threshold, false);
      return conds;
    };
    stack.push_back({static_cast<std::size_t>(n.right), with(false)});
    stack.push_back({static_cast<std::size_t>(n.left), with(true)});
  }
  return out;
}

inline int apply_rules(const std::vector<Rule>& rules, std::span<const double> row) {
  for (const auto& r : rules)
    if (r.covers(row)) return r.label;
  throw Error(ErrorCode::NoCoveringRule, "no rule covers the row");
}

// Coverage and precision against the model's predicted classes.
inline void score_rules(std::vector<Rule>& rules, const std::vector<std::vector<double>>& rows,
                        const std::vector<int>& predicted) {
  const double n = static_cast<double>(rows.size());
  for (auto& r : rules) {
    std::size_t covered = 0, agree = 0;
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (r.covers(rows[i])) {
        ++covered;
        agree += predicted[i] == r.label;
      }
    r.coverage = n > 0 ? static_cast<double>(covered) / n : 0.0;
    r.precision = covered ? static_cast<double>(agree) / static_cast<double>(covered) : 0.0;
  }
}

inline ExplainerOutput extract_rules(const ProbaFn& f, const Dataset& train, const RuleConfig& config = {}) {
  detail::Stopwatch clock;
  if (train.empty()) throw Error(ErrorCode::EmptyDataset, "no training rows for the surrogate");
  std::vector<int> yhat;
  yhat.reserve(train.size());
  for (const auto& r : train.rows) yhat.push_back(f(r) >= 0.5 ? 1 : 0);
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto tree = grow_tree(train.rows, yhat, idx, {config.surrogate_depth, config.min_leaf, 0});

  ExplainerOutput o;
  o.explainer_id = "SurrogateRules";
  o.modality = Modality::Rules;
  o.feature_names = train.schema.feature_names;
  o.rules = rules_from_tree(tree, train.schema.feature_names);
  score_rules(o.rules, train.rows, yhat);
  o.config = {{"surrogate_depth", config.surrogate_depth},
              {"min_leaf", config.min_leaf},
              {"surrogate", "gini CART on model predictions"},
              {"train_rows", train.size()}};
  o.runtime_ms = clock.ms();
  return o;
}

}  // namespace xplain
