#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "xplain/data.hpp"
#include "xplain/error.hpp"
#include "xplain/rng.hpp"

namespace xplain {

inline double sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// CART

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  // Fraction of positive labels among the training rows reaching the node.
  double value = 0.0;
  std::size_t samples = 0;

  bool is_leaf() const { return feature < 0; }
  bool operator==(const TreeNode&) const = default;
};

struct DecisionTree {
  // Preorder; nodes[0] is the root. Rows with x[feature] <= threshold go left.
  std::vector<TreeNode> nodes;

  std::size_t leaf_index(std::span<const double> x) const {
    std::size_t i = 0;
    while (!nodes[i].is_leaf()) {
      const auto& n = nodes[i];
      i = static_cast<std::size_t>(x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
    }
    return i;
  }

  double predict(std::span<const double> x) const { return nodes[leaf_index(x)].value; }

  int depth() const {
    int best = 0;
    std::vector<std::pair<std::size_t, int>> stack{{0, 0}};
    while (!stack.empty()) {
      auto [i, d] = stack.back();
      stack.pop_back();
      best = std::max(best, d);
      if (!nodes[i].is_leaf()) {
        stack.emplace_back(static_cast<std::size_t>(nodes[i].left), d + 1);
        stack.emplace_back(static_cast<std::size_t>(nodes[i].right), d + 1);
      }
    }
    return best;
  }

  bool operator==(const DecisionTree&) const = default;
};

struct TreeConfig {
  int max_depth = 5;  // negative: unlimited
  std::size_t min_leaf = 1;
  // Features examined per split; 0 means all of them.
  std::size_t feature_subset = 0;
};

namespace detail {

inline double gini(double pos, double n) {
  if (n <= 0) return 0.0;
  const double p = pos / n;
  return 2.0 * p * (1.0 - p);
}

struct SplitChoice {
  int feature = -1;
  double threshold = 0.0;
  double impurity = INFINITY;
};

inline SplitChoice best_split(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                              const std::vector<std::size_t>& idx, const std::vector<std::size_t>& features,
                              std::size_t min_leaf) {
  SplitChoice best;
  const double n = static_cast<double>(idx.size());
  double total_pos = 0;
  for (std::size_t i : idx) total_pos += y[i];
  std::vector<std::size_t> order(idx);
  for (std::size_t f : features) {
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return x[a][f] < x[b][f] || (x[a][f] == x[b][f] && a < b);
    });
    double left_pos = 0;
    for (std::size_t k = 0; k + 1 < order.size(); ++k) {
      left_pos += y[order[k]];
      const double lo = x[order[k]][f], hi = x[order[k + 1]][f];
      if (lo == hi) continue;
      const std::size_t nl = k + 1, nr = order.size() - nl;
      if (nl < min_leaf || nr < min_leaf) continue;
      const double imp = (static_cast<double>(nl) * gini(left_pos, static_cast<double>(nl)) +
                          static_cast<double>(nr) * gini(total_pos - left_pos, static_cast<double>(nr))) /
                         n;
      const double threshold = 0.5 * (lo + hi);
      if (imp < best.impurity - 1e-12) best = {static_cast<int>(f), threshold, imp};
    }
  }
  return best;
}

}  // namespace detail

// Gini CART over the rows listed in `idx` (repeats allowed, as in a
// bootstrap sample). Ties go to the lowest feature index, then the lowest
// threshold. `rng` is consulted only when config.feature_subset restricts
// the candidate features.
inline DecisionTree grow_tree(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                              std::vector<std::size_t> idx, const TreeConfig& config, Rng* rng = nullptr) {
  if (idx.empty()) throw Error(ErrorCode::EmptyDataset, "cannot grow a tree on zero rows");
  const std::size_t m = x.front().size();
  const std::size_t min_leaf = std::max<std::size_t>(1, config.min_leaf);
  const std::size_t subset = (config.feature_subset == 0 || config.feature_subset >= m) ? m : config.feature_subset;

  DecisionTree tree;
  struct Pending {
    std::vector<std::size_t> idx;
    int depth;
    int parent;
    bool is_left;
  };
  // Explicit stack, right child pushed first so nodes come out in preorder.
  std::vector<Pending> stack;
  stack.push_back({std::move(idx), 0, -1, false});
  while (!stack.empty()) {
    Pending p = std::move(stack.back());
    stack.pop_back();
    TreeNode node;
    double pos = 0;
    for (std::size_t i : p.idx) pos += y[i];
    node.samples = p.idx.size();
    node.value = pos / static_cast<double>(p.idx.size());
    const int self = static_cast<int>(tree.nodes.size());
    if (p.parent >= 0) (p.is_left ? tree.nodes[static_cast<std::size_t>(p.parent)].left
                                  : tree.nodes[static_cast<std::size_t>(p.parent)].right) = self;

    const bool pure = pos == 0 || pos == static_cast<double>(p.idx.size());
    const bool depth_done = config.max_depth >= 0 && p.depth >= config.max_depth;
    detail::SplitChoice choice;
    if (!pure && !depth_done && p.idx.size() >= 2 * min_leaf) {
      std::vector<std::size_t> features;
      if (subset == m || rng == nullptr) {
        features.resize(m);
        std::iota(features.begin(), features.end(), 0);
      } else {
        features = rng->sample_without_replacement(m, subset);
        std::sort(features.begin(), features.end());
      }
      choice = detail::best_split(x, y, p.idx, features, min_leaf);
    }
    if (choice.feature < 0) {
      tree.nodes.push_back(node);
      continue;
    }
    node.feature = choice.feature;
    node.threshold = choice.threshold;
    tree.nodes.push_back(node);
    std::vector<std::size_t> left, right;
    const auto f = static_cast<std::size_t>(choice.feature);
    for (std::size_t i : p.idx) (x[i][f] <= choice.threshold ? left : right).push_back(i);
    stack.push_back({std::move(right), p.depth + 1, self, false});
    stack.push_back({std::move(left), p.depth + 1, self, true});
  }
  return tree;
}

// ---------------------------------------------------------------------------
// Model kinds

struct LogisticConfig {
  double l2 = 1.0;
  int iterations = 500;
  double learning_rate = 0.1;
};

struct LogisticParams {
  std::vector<double> weights;
  double bias = 0.0;
  // Standardization owned by the model; std == 0 marks a dropped feature.
  std::vector<double> means;
  std::vector<double> stds;

  std::vector<double> standardize(std::span<const double> x) const {
    std::vector<double> z(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) z[j] = stds[j] > 0 ? (x[j] - means[j]) / stds[j] : 0.0;
    return z;
  }

  double logit(std::span<const double> x) const {
    double t = bias;
    for (std::size_t j = 0; j < x.size(); ++j)
      if (stds[j] > 0) t += weights[j] * (x[j] - means[j]) / stds[j];
    return t;
  }

  bool operator==(const LogisticParams&) const = default;
};

struct ForestConfig {
  int n_trees = 100;
  int max_depth = 6;
  std::size_t min_leaf = 1;
  // 0 means ceil(sqrt(M)).
  std::size_t feature_subset = 0;
  std::uint64_t seed = 7;
  bool bootstrap = true;
};

struct RandomForest {
  std::vector<DecisionTree> trees;
  std::vector<std::uint64_t> seeds;
  bool operator==(const RandomForest&) const = default;
};

enum class ModelKind { LogisticRegression, DecisionTree, RandomForest };

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::LogisticRegression: return "LogisticRegression";
    case ModelKind::DecisionTree: return "DecisionTree";
    case ModelKind::RandomForest: return "RandomForest";
  }
  return "";
}

inline ModelKind model_kind_from_string(std::string_view s) {
  for (auto k : {ModelKind::LogisticRegression, ModelKind::DecisionTree, ModelKind::RandomForest})
    if (to_string(k) == s) return k;
  throw Error(ErrorCode::InvalidArgument, "model kind '" + std::string(s) + "'");
}

struct TrainedModel {
  ModelKind kind = ModelKind::LogisticRegression;
  std::variant<LogisticParams, DecisionTree, RandomForest> parameters;
  json train_config = json::object();
  std::vector<std::string> feature_order;
  std::uint64_t seed = 0;

  std::size_t feature_count() const { return feature_order.size(); }

  double predict_proba(std::span<const double> x) const {
    if (x.size() != feature_order.size())
      throw Error(ErrorCode::DimensionMismatch,
                  "row has " + std::to_string(x.size()) + " values, model expects " + std::to_string(feature_order.size()));
    return std::visit(
        [&](const auto& p) -> double {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, LogisticParams>) {
            return sigmoid(p.logit(x));
          } else if constexpr (std::is_same_v<T, DecisionTree>) {
            return p.predict(x);
          } else {
            double s = 0.0;
            for (const auto& t : p.trees) s += t.predict(x);
            return s / static_cast<double>(p.trees.size());
          }
        },
        parameters);
  }

  int predict(std::span<const double> x) const { return predict_proba(x) >= 0.5 ? 1 : 0; }

  double operator()(std::span<const double> x) const { return predict_proba(x); }

  bool operator==(const TrainedModel&) const = default;
};

// Mean log-loss plus (l2 / 2n) * |w|^2 on standardized inputs.
inline double logistic_objective(const LogisticParams& p, const std::vector<std::vector<double>>& z,
                                 const std::vector<int>& y, double l2) {
  const double n = static_cast<double>(z.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    double t = p.bias;
    for (std::size_t j = 0; j < z[i].size(); ++j) t += p.weights[j] * z[i][j];
    // log(1 + e^t) - y t, computed stably
    const double softplus = t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
    loss += softplus - y[i] * t;
  }
  double reg = 0.0;
  for (double w : p.weights) reg += w * w;
  return loss / n + 0.5 * l2 * reg / n;
}

// Gradient of logistic_objective; the last entry is d/d(bias).
inline std::vector<double> logistic_gradient(const LogisticParams& p, const std::vector<std::vector<double>>& z,
                                             const std::vector<int>& y, double l2) {
  const std::size_t m = p.weights.size();
  const double n = static_cast<double>(z.size());
  std::vector<double> g(m + 1, 0.0);
  for (std::size_t i = 0; i < z.size(); ++i) {
    double t = p.bias;
    for (std::size_t j = 0; j < m; ++j) t += p.weights[j] * z[i][j];
    const double r = sigmoid(t) - y[i];
    for (std::size_t j = 0; j < m; ++j) g[j] += r * z[i][j];
    g[m] += r;
  }
  for (std::size_t j = 0; j < m; ++j) g[j] = g[j] / n + l2 * p.weights[j] / n;
  g[m] /= n;
  return g;
}

inline json to_json(const LogisticConfig& c) {
  return {{"l2", c.l2}, {"iterations", c.iterations}, {"learning_rate", c.learning_rate}};
}
inline json to_json(const TreeConfig& c) {
  return {{"max_depth", c.max_depth}, {"min_leaf", c.min_leaf}, {"feature_subset", c.feature_subset}};
}
inline json to_json(const ForestConfig& c) {
  return {{"n_trees", c.n_trees},         {"max_depth", c.max_depth}, {"min_leaf", c.min_leaf},
          {"feature_subset", c.feature_subset}, {"seed", c.seed},     {"bootstrap", c.bootstrap}};
}

inline TrainedModel train_logistic(const Dataset& train, const LogisticConfig& config = {}) {
  if (train.empty()) throw Error(ErrorCode::EmptyDataset, "empty training set");
  const bool has0 = std::find(train.outcomes.begin(), train.outcomes.end(), 0) != train.outcomes.end();
  const bool has1 = std::find(train.outcomes.begin(), train.outcomes.end(), 1) != train.outcomes.end();
  if (!has0 || !has1) throw Error(ErrorCode::SingleClassTrainingSet, "both classes required");

  const std::size_t m = train.schema.feature_count();
  LogisticParams p;
  std::tie(p.means, p.stds) = column_moments(train.rows);
  for (double& s : p.stds)
    if (s < 1e-12) s = 0.0;
  p.weights.assign(m, 0.0);

  std::vector<std::vector<double>> z;
  z.reserve(train.size());
  for (const auto& r : train.rows) z.push_back(p.standardize(r));

  for (int it = 0; it < config.iterations; ++it) {
    auto g = logistic_gradient(p, z, train.outcomes, config.l2);
    for (std::size_t j = 0; j < m; ++j)
      if (p.stds[j] > 0) p.weights[j] -= config.learning_rate * g[j];
    p.bias -= config.learning_rate * g[m];
    if (!std::isfinite(p.bias) ||
        !std::all_of(p.weights.begin(), p.weights.end(), [](double w) { return std::isfinite(w); }))
      throw Error(ErrorCode::NonFiniteLoss, "diverged at iteration " + std::to_string(it));
  }
  if (!std::isfinite(logistic_objective(p, z, train.outcomes, config.l2)))
    throw Error(ErrorCode::NonFiniteLoss, "final loss is not finite");

  TrainedModel model;
  model.kind = ModelKind::LogisticRegression;
  model.parameters = std::move(p);
  model.train_config = to_json(config);
  model.feature_order = train.schema.feature_names;
  return model;
}

inline TrainedModel train_tree(const Dataset& train, const TreeConfig& config = {}) {
  if (train.empty()) throw Error(ErrorCode::EmptyDataset, "empty training set");
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  TrainedModel model;
  model.kind = ModelKind::DecisionTree;
  model.parameters = grow_tree(train.rows, train.outcomes, std::move(idx), config);
  model.train_config = to_json(config);
  model.feature_order = train.schema.feature_names;
  return model;
}

// splitmix64 finalizer; decorrelates per-tree seeds drawn from one base seed.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t k) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (k + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline TrainedModel train_forest(const Dataset& train, const ForestConfig& config = {}) {
  if (train.empty()) throw Error(ErrorCode::EmptyDataset, "empty training set");
  if (config.n_trees < 1) throw Error(ErrorCode::InvalidArgument, "n_trees must be >= 1");
  const std::size_t m = train.schema.feature_count();
  TreeConfig tc;
  tc.max_depth = config.max_depth;
  tc.min_leaf = config.min_leaf;
  tc.feature_subset = config.feature_subset == 0
                          ? static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(m))))
                          : config.feature_subset;

  RandomForest forest;
  const std::size_t n = train.size();
  for (int t = 0; t < config.n_trees; ++t) {
    const std::uint64_t tree_seed = mix_seed(config.seed, static_cast<std::uint64_t>(t));
    Rng rng(tree_seed);
    std::vector<std::size_t> idx(n);
    if (config.bootstrap) {
      for (auto& i : idx) i = rng.index(n);
    } else {
      std::iota(idx.begin(), idx.end(), 0);
    }
    forest.trees.push_back(grow_tree(train.rows, train.outcomes, std::move(idx), tc, &rng));
    forest.seeds.push_back(tree_seed);
  }
  TrainedModel model;
  model.kind = ModelKind::RandomForest;
  model.parameters = std::move(forest);
  model.train_config = to_json(config);
  model.feature_order = train.schema.feature_names;
  model.seed = config.seed;
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation

struct ModelMetrics {
  double precision = 0, recall = 0, f1 = 0, sensitivity = 0, specificity = 0, accuracy = 0;
  // confusion[actual][predicted]
  std::array<std::array<std::size_t, 2>, 2> confusion{};
};

inline void to_json(json& j, const ModelMetrics& m) {
  j = {{"precision", m.precision},     {"recall", m.recall},     {"f1", m.f1},
       {"sensitivity", m.sensitivity}, {"specificity", m.specificity}, {"accuracy", m.accuracy},
       {"confusion", {{m.confusion[0][0], m.confusion[0][1]}, {m.confusion[1][0], m.confusion[1][1]}}}};
}

// Support-weighted precision / recall / F1 over both classes.
inline ModelMetrics metrics_from_predictions(const std::vector<int>& actual, const std::vector<int>& predicted) {
  if (actual.empty()) throw Error(ErrorCode::EmptyTestSet, "no rows to evaluate");
  ModelMetrics m;
  for (std::size_t i = 0; i < actual.size(); ++i)
    m.confusion[static_cast<std::size_t>(actual[i])][static_cast<std::size_t>(predicted[i])]++;
  const double n = static_cast<double>(actual.size());
  auto ratio = [](double a, double b) { return b > 0 ? a / b : 0.0; };
  for (std::size_t c = 0; c < 2; ++c) {
    const double tp = static_cast<double>(m.confusion[c][c]);
    const double support = static_cast<double>(m.confusion[c][0] + m.confusion[c][1]);
    const double predicted_c = static_cast<double>(m.confusion[0][c] + m.confusion[1][c]);
    const double p = ratio(tp, predicted_c), r = ratio(tp, support);
    const double f = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    const double w = support / n;
    m.precision += w * p;
    m.recall += w * r;
    m.f1 += w * f;
  }
  m.sensitivity = ratio(static_cast<double>(m.confusion[1][1]), static_cast<double>(m.confusion[1][0] + m.confusion[1][1]));
  m.specificity = ratio(static_cast<double>(m.confusion[0][0]), static_cast<double>(m.confusion[0][0] + m.confusion[0][1]));
  m.accuracy = static_cast<double>(m.confusion[0][0] + m.confusion[1][1]) / n;
  return m;
}

inline ModelMetrics evaluate(const TrainedModel& model, const Dataset& test) {
  if (test.empty()) throw Error(ErrorCode::EmptyTestSet, "no rows to evaluate");
  std::vector<int> predicted;
  predicted.reserve(test.size());
  for (const auto& r : test.rows) predicted.push_back(model.predict(r));
  return metrics_from_predictions(test.outcomes, predicted);
}

inline json model_to_json(const TrainedModel& m);

// Highest F1 wins; ties go LogisticRegression, then RandomForest, then
// DecisionTree, then the lexicographically smaller serialization so the
// choice never depends on input order.
inline const TrainedModel& select_best(const std::vector<std::pair<TrainedModel, ModelMetrics>>& candidates) {
  if (candidates.empty()) throw Error(ErrorCode::InvalidArgument, "no candidate models");
  auto rank = [](ModelKind k) {
    switch (k) {
      case ModelKind::LogisticRegression: return 0;
      case ModelKind::RandomForest: return 1;
      case ModelKind::DecisionTree: return 2;
    }
    return 3;
  };
  std::size_t best = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const auto& [mi, si] = candidates[i];
    const auto& [mb, sb] = candidates[best];
    if (si.f1 != sb.f1) {
      if (si.f1 > sb.f1) best = i;
    } else if (rank(mi.kind) != rank(mb.kind)) {
      if (rank(mi.kind) < rank(mb.kind)) best = i;
    } else if (model_to_json(mi).dump() < model_to_json(mb).dump()) {
      best = i;
    }
  }
  return candidates[best].first;
}

// ---------------------------------------------------------------------------
// Serialization

inline constexpr int kModelFormatVersion = 1;

inline json tree_to_json(const DecisionTree& t) {
  json nodes = json::array();
  for (const auto& n : t.nodes) {
    if (n.is_leaf())
      nodes.push_back({{"value", n.value}, {"samples", n.samples}});
    else
      nodes.push_back({{"feature", n.feature},
                       {"threshold", n.threshold},
                       {"left", n.left},
                       {"right", n.right},
                       {"value", n.value},
                       {"samples", n.samples}});
  }
  return nodes;
}

inline DecisionTree tree_from_json(const json& j) {
  DecisionTree t;
  for (const auto& n : j) {
    TreeNode node;
    node.feature = n.value("feature", -1);
    node.threshold = n.value("threshold", 0.0);
    node.left = n.value("left", -1);
    node.right = n.value("right", -1);
    node.value = n.at("value").get<double>();
    node.samples = n.value("samples", std::size_t{0});
    if (!node.is_leaf() && !std::isfinite(node.threshold))
      throw Error(ErrorCode::InvalidArgument, "non-finite tree threshold");
    t.nodes.push_back(node);
  }
  if (t.nodes.empty()) throw Error(ErrorCode::InvalidArgument, "tree has no nodes");
  return t;
}

inline json model_to_json(const TrainedModel& m) {
  json params;
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, LogisticParams>) {
          params = {{"weights", p.weights}, {"bias", p.bias}, {"means", p.means}, {"stds", p.stds}};
        } else if constexpr (std::is_same_v<T, DecisionTree>) {
          params = {{"nodes", tree_to_json(p)}};
        } else {
          json trees = json::array();
          for (const auto& t : p.trees) trees.push_back(tree_to_json(t));
          params = {{"trees", trees}, {"seeds", p.seeds}};
        }
      },
      m.parameters);
  return {{"format", "xplain-model"},
          {"version", kModelFormatVersion},
          {"kind", to_string(m.kind)},
          {"feature_order", m.feature_order},
          {"train_config", m.train_config},
          {"seed", m.seed},
          {"parameters", params}};
}

inline TrainedModel model_from_json(const json& j) {
  if (j.value("version", 0) != kModelFormatVersion)
    throw Error(ErrorCode::InvalidArgument, "unsupported model format version");
  TrainedModel m;
  m.kind = model_kind_from_string(j.at("kind").get<std::string>());
  m.feature_order = j.at("feature_order").get<std::vector<std::string>>();
  m.train_config = j.at("train_config");
  m.seed = j.value("seed", std::uint64_t{0});
  const auto& p = j.at("parameters");
  switch (m.kind) {
    case ModelKind::LogisticRegression: {
      LogisticParams lp;
      lp.weights = p.at("weights").get<std::vector<double>>();
      lp.bias = p.at("bias").get<double>();
      lp.means = p.at("means").get<std::vector<double>>();
      lp.stds = p.at("stds").get<std::vector<double>>();
      if (lp.weights.size() != m.feature_order.size())
        throw Error(ErrorCode::InvalidArgument, "weight count differs from feature count");
      m.parameters = std::move(lp);
      break;
    }
    case ModelKind::DecisionTree:
      m.parameters = tree_from_json(p.at("nodes"));
      break;
    case ModelKind::RandomForest: {
      RandomForest rf;
      for (const auto& t : p.at("trees")) rf.trees.push_back(tree_from_json(t));
      rf.seeds = p.at("seeds").get<std::vector<std::uint64_t>>();
      if (rf.trees.empty()) throw Error(ErrorCode::InvalidArgument, "forest has no trees");
      m.parameters = std::move(rf);
      break;
    }
  }
  return m;
}

}  // namespace xplain
