#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "test_util.hpp"
#include "xplain/explainers.hpp"
#include "xplain/metrics.hpp"
#include "xplain/models.hpp"

using namespace xplain;
using xplain::testing::toy_dataset;

namespace {

Dataset random_rows(std::size_t n, std::size_t m, std::uint64_t seed, double shift = 0.0) {
  Rng rng(seed);
  std::vector<std::vector<double>> rows(n, std::vector<double>(m));
  for (auto& r : rows)
    for (auto& v : r) v = rng.normal() + shift;
  return toy_dataset(rows, std::vector<int>(n, 0));
}

ProbaFn linear(std::vector<double> w, double b) {
  return [w, b](std::span<const double> x) {
    double s = b;
    for (std::size_t j = 0; j < w.size(); ++j) s += w[j] * x[j];
    return s;
  };
}

template <class F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::InvalidArgument;
}

std::vector<Sample> as_samples(const Dataset& d) {
  std::vector<Sample> s;
  for (std::size_t i = 0; i < d.size(); ++i) s.push_back({d.row_ids[i], d.rows[i], 1.0, std::nullopt, false});
  return s;
}

// Direct MMD^2 with every kernel term summed in one flat loop.
double mmd2_oracle(const std::vector<std::vector<double>>& p, const std::vector<double>& w,
                   const std::vector<std::vector<double>>& d, double sigma) {
  const std::size_t m = p.size(), n = d.size();
  std::vector<std::vector<double>> all = p;
  all.insert(all.end(), d.begin(), d.end());
  std::vector<double> coef(m + n);
  const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < m; ++i) coef[i] = w[i] / wsum;
  for (std::size_t i = 0; i < n; ++i) coef[m + i] = -1.0 / static_cast<double>(n);
  double s = 0;
  for (std::size_t a = 0; a < all.size(); ++a)
    for (std::size_t b = 0; b < all.size(); ++b) {
      double d2 = 0;
      for (std::size_t j = 0; j < all[a].size(); ++j) d2 += (all[a][j] - all[b][j]) * (all[a][j] - all[b][j]);
      s += coef[a] * coef[b] * std::exp(-d2 / (2 * sigma * sigma));
    }
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(Faithfulness, LinearExactShapleyIsOne) {
  Rng rng(11);
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = 2 + static_cast<std::size_t>(t % 7);
    const auto bg = random_rows(30, m, 1000 + t);
    std::vector<double> w(m), x(m);
    for (auto& v : w) v = rng.normal();
    for (auto& v : x) v = rng.normal() * 2;
    const auto f = linear(w, rng.normal());
    const auto o = exact_shapley(f, x, bg);
    EXPECT_NEAR(faithfulness(f, o, bg).value, 1.0, 1e-6);
  }
}

TEST(Faithfulness, NegatedAttributionsGiveMinusOne) {
  const auto bg = random_rows(20, 3, 2);
  const auto f = linear({1, -2, 0.5}, 0);
  const std::vector<double> x{1, 1, 1};
  auto o = exact_shapley(f, x, bg);
  std::vector<double> neg;
  for (const auto& a : o.attributions) neg.push_back(-a.attribution);
  EXPECT_NEAR(faithfulness(f, neg, x, bg).value, -1.0, 1e-12);
}

TEST(Faithfulness, HandComputedNonlinearCase) {
  // f = x0 * x1 + x0 with background mean (0, 0).
  const auto bg = toy_dataset({{-1, -1}, {1, 1}}, {0, 1});
  ProbaFn f = [](std::span<const double> x) { return x[0] * x[1] + x[0]; };
  // f(1,2) = 3, f(0,2) = 0, f(1,0) = 1: deltas (3, 2)
  const std::vector<double> x{1, 2}, phi{0.5, 0.1};
  EXPECT_NEAR(faithfulness(f, phi, x, bg).value, 1.0, 1e-12);
  const std::vector<double> x3{1, 2, 0};
  const auto bg3 = toy_dataset({{-1, -1, 0}, {1, 1, 0}}, {0, 1});
  // deltas (3, 2, 0) against phi (1, 2, 3)
  const std::vector<double> phi3{1, 2, 3};
  const double dm = 5.0 / 3, pm = 2;
  const double d[3] = {3, 2, 0}, p[3] = {1, 2, 3};
  double sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 3; ++i) {
    sxy += (p[i] - pm) * (d[i] - dm);
    sxx += (p[i] - pm) * (p[i] - pm);
    syy += (d[i] - dm) * (d[i] - dm);
  }
  EXPECT_NEAR(faithfulness(f, phi3, x3, bg3).value, sxy / std::sqrt(sxx * syy), 1e-12);
}

TEST(Faithfulness, ZeroVariance) {
  const auto bg = random_rows(10, 3, 3);
  const auto f = linear({1, 1, 1}, 0);
  const std::vector<double> x{1, 2, 3}, flat{0.2, 0.2, 0.2};
  EXPECT_EQ(code_of([&] { faithfulness(f, flat, x, bg); }), ErrorCode::ZeroVariance);
  ProbaFn c = [](std::span<const double>) { return 0.3; };
  const std::vector<double> phi{1, 2, 3};
  EXPECT_EQ(code_of([&] { faithfulness(c, phi, x, bg); }), ErrorCode::ZeroVariance);
}

TEST(Monotonicity, SingleFeatureIsVacuouslyMonotone) {
  const auto bg = toy_dataset({{0}, {2}}, {0, 1});
  const auto f = linear({3}, 0);
  const std::vector<double> x{5}, phi{12};
  EXPECT_EQ(monotonicity(f, phi, x, bg).value, 1.0);
}

TEST(Monotonicity, LargerAttributionMovingLessScoresZero) {
  // mean row (0, 0); restoring x1 moves f by 3, then x0 moves it by 1.
  const auto bg = toy_dataset({{-1, -1}, {1, 1}}, {0, 1});
  const auto f = linear({1, 1}, 0);
  const std::vector<double> x{1, 3};
  const std::vector<double> misordered{2, 1}, ordered{1, 3};
  EXPECT_EQ(monotonicity(f, misordered, x, bg).value, 0.0);
  EXPECT_EQ(monotonicity(f, ordered, x, bg).value, 1.0);
}

TEST(Monotonicity, MeanReportAggregates) {
  const auto r = mean_report("monotonicity", Modality::Features, {1, 0, 0, 1});
  EXPECT_DOUBLE_EQ(r.value, 0.5);
  ASSERT_TRUE(r.per_instance_values);
  EXPECT_EQ(r.per_instance_values->size(), 4u);
}

// ---------------------------------------------------------------------------

namespace {

Rule single(std::size_t idx, std::string name, double t, bool left, int label) {
  Rule r;
  Interval iv;
  if (left)
    iv.cap_above(t, true);
  else
    iv.cap_below(t, false);
  r.conditions.push_back({std::move(name), idx, iv});
  r.label = label;
  return r;
}

// Distinct features on each root-to-leaf path, walked independently of rules_from_tree.
double path_feature_mean(const DecisionTree& t) {
  double total = 0;
  std::size_t leaves = 0;
  std::function<void(int, std::set<int>)> walk = [&](int i, std::set<int> seen) {
    const auto& n = t.nodes[static_cast<std::size_t>(i)];
    if (n.feature < 0) {
      total += static_cast<double>(seen.size());
      ++leaves;
      return;
    }
    seen.insert(n.feature);
    walk(n.left, seen);
    walk(n.right, seen);
  };
  walk(0, {});
  return total / static_cast<double>(leaves);
}

}  // namespace

TEST(AvgRuleLength, Basics) {
  EXPECT_DOUBLE_EQ(avg_rule_length({single(1, "BMI", 32.25, true, 0), single(1, "BMI", 32.25, false, 1)}).value, 1.0);
  EXPECT_DOUBLE_EQ(avg_rule_length({Rule{}}).value, 0.0);
  EXPECT_EQ(code_of([] { avg_rule_length({}); }), ErrorCode::EmptyRuleSet);
}

TEST(AvgRuleLength, PerfectTreeOverDistinctFeatures) {
  for (int d = 1; d <= 4; ++d) {
    DecisionTree t;
    std::function<int(int)> build = [&](int depth) -> int {
      const int id = static_cast<int>(t.nodes.size());
      t.nodes.push_back({});
      if (depth == d) {
        t.nodes[static_cast<std::size_t>(id)].value = depth % 2;
        return id;
      }
      const int l = build(depth + 1), r = build(depth + 1);
      t.nodes[static_cast<std::size_t>(id)] = {depth, 0.0, l, r, 0.5, 0};
      return id;
    };
    build(0);
    std::vector<std::string> names{"a", "b", "c", "d"};
    EXPECT_DOUBLE_EQ(avg_rule_length(rules_from_tree(t, names)).value, d);
  }
}

TEST(AvgRuleLength, PimaSurrogateMatchesPathWalk) {
  const auto& pima = xplain::testing::pima();
  auto [train, test] = split(pima, 0.2, 7);
  const auto model = train_logistic(train);
  const auto f = as_proba_fn(model);
  std::vector<int> yhat;
  for (const auto& r : train.rows) yhat.push_back(f(r) >= 0.5);
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto tree = grow_tree(train.rows, yhat, idx, {5, 5, 0});
  const auto o = extract_rules(f, train, {5, 5});
  EXPECT_NEAR(avg_rule_length(o.rules).value, path_feature_mean(tree), 1e-12);
}

TEST(Fidelity, SelfSurrogateIsOne) {
  const auto& pima = xplain::testing::pima();
  auto [train, test] = split(pima, 0.2, 7);
  const auto model = train_tree(train, {4, 5, 0});
  const auto rules = rules_from_tree(std::get<DecisionTree>(model.parameters), train.schema.feature_names);
  EXPECT_DOUBLE_EQ(fidelity(rules, as_proba_fn(model), train).value, 1.0);
}

TEST(Fidelity, MajorityRuleEqualsNegativeRate) {
  const auto& pima = xplain::testing::pima();
  auto [train, test] = split(pima, 0.2, 7);
  const auto model = train_logistic(train);
  std::size_t negatives = 0;
  for (const auto& r : test.rows) negatives += model.predict(r) == 0;
  Rule all;
  all.label = 0;
  EXPECT_DOUBLE_EQ(fidelity({all}, as_proba_fn(model), test).value,
                   static_cast<double>(negatives) / static_cast<double>(test.size()));
}

TEST(Fidelity, GapInRulesThrows) {
  const auto d = toy_dataset({{0}, {5}}, {0, 1});
  const auto f = linear({0.1}, 0);
  EXPECT_EQ(code_of([&] { fidelity({single(0, "x0", 1, true, 0)}, f, d); }), ErrorCode::NoCoveringRule);
}

// ---------------------------------------------------------------------------

TEST(Diversity, Definition) {
  std::vector<Sample> same(3, Sample{0, {1, 2}, 1, std::nullopt, false});
  EXPECT_DOUBLE_EQ(diversity(same).value, 0.0);
  std::vector<Sample> two{{0, {0, 0}, 1, std::nullopt, false}, {1, {3, 4}, 1, std::nullopt, false}};
  EXPECT_DOUBLE_EQ(diversity(two).value, 5.0);
  std::vector<Sample> three{{0, {0}, 1, {}, false}, {1, {1}, 1, {}, false}, {2, {4}, 1, {}, false}};
  EXPECT_DOUBLE_EQ(diversity(three).value, (1.0 + 4.0 + 3.0) / 3.0);
  std::reverse(three.begin(), three.end());
  EXPECT_DOUBLE_EQ(diversity(three).value, (1.0 + 4.0 + 3.0) / 3.0);
  EXPECT_EQ(code_of([&] { diversity({two[0]}); }), ErrorCode::TooFewSamples);
}

TEST(NonRepresentativeness, SelfIsZeroAndSymmetric) {
  const auto d = random_rows(25, 3, 4);
  EXPECT_NEAR(non_representativeness(as_samples(d), d).value, 0.0, 1e-9);
  const auto p = random_rows(6, 3, 5, 0.8);
  const double sigma = 1.3;
  const double value = non_representativeness(as_samples(p), d, sigma).value;
  // Both sets live in the reference set's standardised space.
  const auto [mean, sd] = column_moments(d.rows);
  const auto zp = standardize_rows(p.rows, mean, sd), zd = standardize_rows(d.rows, mean, sd);
  EXPECT_NEAR(value, mmd2_oracle(zp, std::vector<double>(zp.size(), 1.0), zd, sigma), 1e-12);
  EXPECT_NEAR(mmd2_oracle(zp, std::vector<double>(zp.size(), 1.0), zd, sigma),
              mmd2_oracle(zd, std::vector<double>(zd.size(), 1.0), zp, sigma), 1e-12);
}

TEST(NonRepresentativeness, WeightedMatchesOracleAndIsOrderFree) {
  const auto d = random_rows(20, 2, 6);
  auto s = as_samples(d.subset({1, 4, 9}));
  s[0].weight = 0.2;
  s[1].weight = 1.5;
  s[2].weight = 0.7;
  const auto [mean, sd] = column_moments(d.rows);
  std::vector<std::vector<double>> p;
  for (const auto& x : s) p.push_back(x.values);
  const auto r = non_representativeness(s, d, 0.9);
  EXPECT_NEAR(r.value, mmd2_oracle(standardize_rows(p, mean, sd), {0.2, 1.5, 0.7}, standardize_rows(d.rows, mean, sd), 0.9),
              1e-12);
  std::reverse(s.begin(), s.end());
  EXPECT_NEAR(non_representativeness(s, d, 0.9).value, r.value, 1e-12);
  EXPECT_EQ(r.config_echo["sigma"], 0.9);
}

TEST(NonRepresentativeness, OutlierWorseThanProtodash) {
  auto d = random_rows(20, 2, 8);
  d.rows.push_back({9, 9});
  d.outcomes.push_back(0);
  d.row_ids.push_back(20);
  ProtodashConfig cfg;
  cfg.m = 3;
  const auto proto = protodash(d, d, cfg);
  const double sigma = proto.config["sigma"].get<double>();
  std::vector<Sample> outlier{{20, {9, 9}, 1.0, std::nullopt, false}};
  EXPECT_GT(non_representativeness(outlier, d, sigma).value, non_representativeness(proto.samples, d, sigma).value);
}

TEST(NonRepresentativeness, Errors) {
  const auto d = random_rows(5, 2, 9);
  EXPECT_EQ(code_of([&] { non_representativeness(as_samples(d), d, 0.0); }), ErrorCode::NonPositiveWidth);
  EXPECT_EQ(code_of([&] { non_representativeness(as_samples(d), d, -1.0); }), ErrorCode::NonPositiveWidth);
}

// ---------------------------------------------------------------------------

TEST(Dispatch, EveryRegisteredMetricIsComputable) {
  const auto& reg = xplain::testing::default_registry();
  const auto bg = random_rows(30, 3, 10);
  const auto f = linear({0.3, -0.2, 0.1}, 0.5);
  const std::vector<double> x{1, 2, -1};
  MetricContext ctx{f, &bg, &bg, std::nullopt};
  ProtodashConfig pc;
  pc.m = 4;
  ProbaFn step = [](std::span<const double> v) { return v[0] > 0 ? 0.8 : 0.2; };
  MetricContext rctx{step, &bg, &bg, std::nullopt};
  std::set<std::string> seen;
  for (const auto& [o, c] : std::vector<std::pair<ExplainerOutput, MetricContext>>{
           {kernel_shap(f, x, bg), ctx}, {protodash(bg, bg, pc), ctx}, {extract_rules(step, bg, {2, 2}), rctx}}) {
    const auto reports = evaluate_output(reg, o, c);
    EXPECT_EQ(reports.size(), 2u) << o.explainer_id;
    for (const auto& r : reports) {
      EXPECT_TRUE(std::isfinite(r.value));
      EXPECT_EQ(r.modality, o.modality);
      seen.insert(r.metric_id);
    }
  }
  EXPECT_EQ(seen, implemented_metrics());
  EXPECT_EQ(code_of([&] { compute_metric("sparsity", kernel_shap(f, x, bg), ctx); }), ErrorCode::UnknownKey);
}

TEST(Dispatch, UndefinedMetricIsSkippedWithReason) {
  const auto& reg = xplain::testing::default_registry();
  const auto bg = random_rows(10, 2, 12);
  ExplainerOutput one;
  one.explainer_id = "GeneticCF";
  one.modality = Modality::Samples;
  one.feature_names = bg.schema.feature_names;
  one.samples.push_back({-1, {0, 0}, 1.0, 0.7, false});
  std::vector<std::pair<std::string, std::string>> skipped;
  const auto reports = evaluate_output(reg, one, {linear({1, 1}, 0), &bg, &bg, std::nullopt}, &skipped);
  ASSERT_EQ(skipped.size(), 1u);
  EXPECT_EQ(skipped[0].first, "diversity");
  ASSERT_EQ(reports.size(), 1u);
  EXPECT_EQ(reports[0].metric_id, "non_representativeness");
}

TEST(MetricReportJson, RoundTrip) {
  MetricReport r = mean_report("faithfulness", Modality::Features, {0.5, 0.25}, {{"baseline", "background mean"}});
  json j = r;
  EXPECT_EQ(j.get<MetricReport>(), r);
  MetricReport plain{"diversity", 3.5, Modality::Samples, std::nullopt, json::object()};
  json k = plain;
  EXPECT_EQ(k.get<MetricReport>(), plain);
}
