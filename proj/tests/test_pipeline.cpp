#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <thread>

#include "test_util.hpp"
#include "xplain/pipeline.hpp"
#include "xplain/service.hpp"

using namespace xplain;
using namespace xplain::testing;

namespace {

const char* kReferenceQuestion =
    "How did the model justify predicting Diabetes for a 55-year-old male with a BMI of 18 and a Diabetes Pedigree "
    "Function of 0.25?";
const char* kContextualQuestion = "What contextual factors matter here?";

stdfs::path scratch(const std::string& name) {
  auto p = stdfs::temp_directory_path() / ("xplain_test_pipeline_" + name);
  stdfs::remove_all(p);
  return p;
}

PipelineConfig test_config() {
  PipelineConfig c;
  const stdfs::path d = XPLAIN_DATA_DIR;
  c.dataset = d / "pima.csv";
  c.schema = d / "pima_schema.json";
  c.registry = d / "registry.json";
  c.gold_corpus = d / "gold_corpus.jsonl";
  c.store_root = scratch("store");
  return c;
}

const PipelineContext& context() {
  static const PipelineContext ctx = load_context(test_config());
  return ctx;
}

std::string slurp(const stdfs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Config, RelativePathsResolveAgainstConfigDir) {
  const auto c = config_from_json({{"dataset", "d/x.csv"}, {"store_root", "/abs/runs"}, {"port", 9000}, {"seed", 3}}, "/etc/xp");
  EXPECT_EQ(c.dataset, stdfs::path("/etc/xp/d/x.csv"));
  EXPECT_EQ(c.store_root, stdfs::path("/abs/runs"));
  EXPECT_EQ(c.port, 9000);
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.model, "lr");
}

TEST(Config, RejectsNonObject) {
  try {
    config_from_json(json::array());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidArgument);
  }
}

TEST(Context, UsesLogisticRegressionOnSeededSplit) {
  const auto& ctx = context();
  EXPECT_EQ(ctx.model.kind, ModelKind::LogisticRegression);
  EXPECT_EQ(ctx.train.size() + ctx.test.size(), 768u);
  EXPECT_EQ(ctx.test.size(), 154u);
}

TEST(Ask, ReferenceRationaleQuestion) {
  const auto& ctx = context();
  RunStore store(scratch("rationale"));
  const auto rec = ask(kReferenceQuestion, ctx, store);
  EXPECT_EQ(rec.status, RunStatus::Ok);
  EXPECT_EQ(rec.explanation_type, ExplanationType::Rationale);
  EXPECT_EQ(rec.explanation_type, rec.rq.explanation_type);
  ASSERT_EQ(rec.explainer_ids, std::vector<std::string>{"SurrogateRules"});
  std::vector<std::string> ids;
  for (const auto& r : rec.metric_reports) ids.push_back(r.metric_id);
  EXPECT_EQ(ids, (std::vector<std::string>{"avg_rule_length", "fidelity"}));
  EXPECT_FALSE(rec.texts.subset_text.empty());
  EXPECT_FALSE(rec.texts.explainer_text.empty());
  EXPECT_NE(rec.texts.subset_text.find("There are no full matches"), std::string::npos);
  EXPECT_NE(rec.texts.explainer_text.find("IF "), std::string::npos);
  ASSERT_TRUE(rec.synthesis_scores);
  EXPECT_DOUBLE_EQ(rec.synthesis_scores->faithfulness, 1.0);

  const auto dir = store.run_dir(rec.run_id);
  for (const char* f : {"decompose.json", "delegate.json", "synthesis.json", "record.json", "delegate/SurrogateRules.csv",
                        "delegate/SurrogateRules.json", "explanations/subset.txt", "explanations/explainer.txt"})
    EXPECT_TRUE(stdfs::exists(dir / f)) << f;
  for (const auto& o : rec.explainer_outputs) EXPECT_TRUE(stdfs::exists(dir / o.table));
}

TEST(Ask, RecordRoundTripsByteIdentically) {
  const auto& ctx = context();
  RunStore store(scratch("roundtrip"));
  const auto rec = ask(kReferenceQuestion, ctx, store);
  const auto loaded = store.load(rec.run_id, ctx.schema);
  EXPECT_EQ(loaded, rec);
  const auto on_disk = slurp(store.run_dir(rec.run_id) / "record.json");
  EXPECT_EQ(record_text(loaded), on_disk);
}

TEST(Ask, SameSeedIsDeterministic) {
  const auto& ctx = context();
  RunStore store(scratch("determinism"));
  for (const char* q : {kReferenceQuestion, "Why would a 50-year-old with glucose over 150 be predicted diabetic instead of healthy?",
                        "What if the BMI were 25 instead of 35?"}) {
    const auto a = ask(q, ctx, store, 11);
    const auto b = ask(q, ctx, store, 11);
    EXPECT_NE(a.run_id, b.run_id);
    EXPECT_EQ(comparable_record(a).dump(), comparable_record(b).dump()) << q;
    for (const auto& o : a.explainer_outputs)
      EXPECT_EQ(slurp(store.run_dir(a.run_id) / o.table), slurp(store.run_dir(b.run_id) / o.table));
  }
}

TEST(Ask, StageIntermediatesReloadAndReproduceRecord) {
  const auto& ctx = context();
  RunStore store(scratch("isolation"));
  const auto rec = ask(kReferenceQuestion, ctx, store);
  const auto art = load_artifacts(store, rec.run_id, ctx.schema);
  EXPECT_EQ(art.rq, rec.rq);
  ASSERT_EQ(art.outputs.size(), 1u);
  EXPECT_EQ(art.metric_reports, rec.metric_reports);
  ASSERT_TRUE(art.bundle);
  const auto texts = render_explanation(template_for(ctx.registry, art.rq.explanation_type), *art.bundle);
  EXPECT_EQ(texts.subset_text, rec.texts.subset_text);
  EXPECT_EQ(texts.explainer_text, rec.texts.explainer_text);
}

TEST(Ask, EverySupportedTypeReportsItsModalityMetrics) {
  const auto& ctx = context();
  RunStore store(scratch("types"));
  const std::vector<std::pair<std::string, ExplanationType>> cases = {
      {kReferenceQuestion, ExplanationType::Rationale},
      {"Why was a patient with glucose of 150 predicted diabetic rather than healthy?", ExplanationType::Contrastive},
      {"What if the glucose were 110 instead of 150?", ExplanationType::Counterfactual},
      {"Show me similar cases to a 45-year-old with a BMI of 30.", ExplanationType::CaseBased},
      {"What is the distribution of glucose levels for patients older than 60?", ExplanationType::Data},
  };
  for (const auto& [q, type] : cases) {
    const auto rec = ask(q, ctx, store);
    ASSERT_EQ(rec.explanation_type, type) << q;
    ASSERT_EQ(rec.status, RunStatus::Ok);
    ASSERT_EQ(rec.explainer_outputs.size(), explainers_for(ctx.registry, type).size());
    for (const auto& o : rec.explainer_outputs) {
      std::set<std::string> got;
      for (const auto& r : rec.metric_reports)
        if (r.config_echo.at("explainer_id") == o.explainer_id) got.insert(r.metric_id);
      for (const auto& s : rec.skipped_metrics)
        if (s.explainer_id == o.explainer_id) got.insert(s.metric_id);
      const auto want = metrics_for_modality(ctx.registry, o.modality);
      EXPECT_EQ(got, std::set<std::string>(want.begin(), want.end())) << q;
    }
    EXPECT_FALSE(rec.texts.explainer_text.empty()) << q;
  }
}

TEST(Ask, ContextualQuestionYieldsUnsupportedRecord) {
  const auto& ctx = context();
  RunStore store(scratch("unsupported"));
  const auto rec = ask(kContextualQuestion, ctx, store);
  EXPECT_EQ(rec.explanation_type, ExplanationType::Contextual);
  EXPECT_EQ(rec.status, RunStatus::UnsupportedExplanationType);
  EXPECT_TRUE(rec.explainer_outputs.empty());
  EXPECT_TRUE(rec.metric_reports.empty());
  EXPECT_NE(rec.texts.explainer_text.find("not supported"), std::string::npos);
  EXPECT_EQ(store.load(rec.run_id, ctx.schema), rec);
  EXPECT_EQ(json(rec).at("status"), "UnsupportedExplanationType");
}

TEST(Ask, StageErrorsCarryTheStageTag) {
  const auto& ctx = context();
  RunStore store(scratch("errors"));
  try {
    ask("   ", ctx, store);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyQuestion);
    EXPECT_EQ(std::string(e.what()), "EmptyQuestion: [decompose] question is empty");
  }
}

TEST(Ask, DoesNotMutateContext) {
  const auto& ctx = context();
  const auto rows = ctx.data.rows;
  const auto train = ctx.train.rows;
  const auto model = model_to_json(ctx.model).dump();
  const auto reg = registry_to_json(ctx.registry).dump();
  RunStore store(scratch("mutation"));
  ask(kReferenceQuestion, ctx, store);
  ask("What if the BMI were 25 instead of 35?", ctx, store);
  EXPECT_EQ(ctx.data.rows, rows);
  EXPECT_EQ(ctx.train.rows, train);
  EXPECT_EQ(model_to_json(ctx.model).dump(), model);
  EXPECT_EQ(registry_to_json(ctx.registry).dump(), reg);
}

TEST(Ask, ConcurrentCallsGetDistinctRuns) {
  const auto& ctx = context();
  RunStore store(scratch("concurrent"));
  std::vector<std::string> ids(6);
  std::vector<std::thread> threads;
  for (std::size_t i = 0; i < ids.size(); ++i)
    threads.emplace_back([&, i] { ids[i] = ask(i % 2 ? kReferenceQuestion : kContextualQuestion, ctx, store, 5).run_id; });
  for (auto& t : threads) t.join();
  EXPECT_EQ(std::set<std::string>(ids.begin(), ids.end()).size(), ids.size());
  EXPECT_EQ(store.index().size(), ids.size());
}

TEST(RunStore, UnknownAndCorruptRuns) {
  const auto& ctx = context();
  RunStore store(scratch("corrupt"));
  try {
    store.load("nope", ctx.schema);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownKey);
  }
  try {
    store.load("../escape", ctx.schema);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownKey);
  }
  const auto rec = ask(kContextualQuestion, ctx, store);
  std::ofstream(store.run_dir(rec.run_id) / "record.json") << "{ truncated";
  try {
    store.load(rec.run_id, ctx.schema);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::StoreCorrupt);
  }
  EXPECT_EQ(store.index().at(0).status, "StoreCorrupt");
}

TEST(RunStore, IdsAreNeverReused) {
  RunStore store(scratch("ids"));
  std::set<std::string> ids;
  for (int i = 0; i < 50; ++i) ids.insert(store.create_run("same question", 1));
  EXPECT_EQ(ids.size(), 50u);
  RunStore reopened(store.root());
  for (int i = 0; i < 5; ++i) EXPECT_TRUE(ids.insert(reopened.create_run("same question", 1)).second);
}

TEST(Instance, PinsConstraintsWhenNothingMatches) {
  const auto& ctx = context();
  const auto rq = parse_question(kReferenceQuestion, ctx.schema, ctx.registry.cue_table());
  const auto x = instance_for(rq, ctx.data);
  EXPECT_DOUBLE_EQ(x[*ctx.schema.index_of("Age")], 55.0);
  EXPECT_DOUBLE_EQ(x[*ctx.schema.index_of("BMI")], 18.0);
  EXPECT_DOUBLE_EQ(x[*ctx.schema.index_of("DiabetesPedigreeFunction")], 0.25);
  // unconstrained features take the dataset median
  const auto g = *ctx.schema.index_of("Glucose");
  EXPECT_DOUBLE_EQ(x[g], summarize_stats(ctx.data).per_feature_stats[g].median);
}

TEST(Instance, MatchingRowsGiveSubsetMedians) {
  const auto& ctx = context();
  const auto rq = parse_question("What is the distribution of glucose levels for patients older than 60?", ctx.schema,
                                 ctx.registry.cue_table());
  const auto x = instance_for(rq, ctx.data);
  const auto sub = filter_subset(ctx.data, rq.machine_interpretation.constraints);
  ASSERT_FALSE(sub.second.fallback_used);
  EXPECT_GT(x[*ctx.schema.index_of("Age")], 60.0);
  EXPECT_DOUBLE_EQ(x[*ctx.schema.index_of("Glucose")], sub.second.stats("Glucose").median);
}

TEST(StageEval, DecomposeReport) {
  const auto report = run_stage_eval(Stage::Decompose, context());
  EXPECT_EQ(report.at("stage"), "decompose");
  EXPECT_GE(report.at("items").get<std::size_t>(), 100u);
}

TEST(StageEval, MissingGoldCorpus) {
  auto ctx = context();
  ctx.config.gold_corpus = "/nonexistent/gold.jsonl";
  try {
    run_stage_eval(Stage::Decompose, ctx);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingFixture);
  }
}

TEST(StageEval, DelegateTableHasSixRows) {
  const auto report = run_stage_eval(Stage::Delegate, context());
  std::set<std::string> metrics;
  for (const auto& r : report.at("rows")) {
    metrics.insert(r.at("metric").get<std::string>());
    EXPECT_TRUE(r.contains("config_echo"));
    EXPECT_TRUE(std::isfinite(r.at("value").get<double>()));
  }
  EXPECT_EQ(metrics, (std::set<std::string>{"faithfulness", "monotonicity", "avg_rule_length", "fidelity", "diversity",
                                             "non_representativeness"}));
}

TEST(StageEval, UnknownStage) {
  try {
    stage_from_string("train");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::UnknownKey);
  }
}

TEST(Service, EndpointsAndStatusCodes) {
  const auto& ctx = context();
  RunStore store(scratch("service"));
  Service svc(ctx, store);
  const int port = svc.bind("127.0.0.1", 0);
  svc.start_background();
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(120);

  auto health = cli.Get("/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);

  auto res = cli.Post("/ask", json{{"question", kReferenceQuestion}, {"seed", 7}}.dump(), "application/json");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  const auto rec = json::parse(res->body);
  EXPECT_EQ(rec.at("explanation_type"), "Rationale");

  auto one = cli.Get("/runs/" + rec.at("run_id").get<std::string>());
  ASSERT_TRUE(one);
  EXPECT_EQ(one->status, 200);
  EXPECT_EQ(json::parse(one->body), rec);

  auto unsupported = cli.Post("/ask", json{{"question", kContextualQuestion}}.dump(), "application/json");
  ASSERT_TRUE(unsupported);
  EXPECT_EQ(unsupported->status, 200);
  EXPECT_EQ(json::parse(unsupported->body).at("status"), "UnsupportedExplanationType");

  auto runs = cli.Get("/runs");
  ASSERT_TRUE(runs);
  EXPECT_EQ(json::parse(runs->body).size(), 2u);

  auto missing = cli.Get("/runs/unknown-id");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);
  EXPECT_EQ(json::parse(missing->body).at("error"), "UnknownKey");

  auto bad = cli.Post("/ask", "{\"q\": 1}", "application/json");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  auto garbage = cli.Post("/ask", "not json", "application/json");
  ASSERT_TRUE(garbage);
  EXPECT_EQ(garbage->status, 400);

  auto reg = cli.Get("/registry");
  ASSERT_TRUE(reg);
  EXPECT_EQ(json::parse(reg->body), registry_to_json(ctx.registry));

  auto eval = cli.Get("/eval/decompose");
  ASSERT_TRUE(eval);
  EXPECT_EQ(eval->status, 200);
  auto no_stage = cli.Get("/eval/bogus");
  ASSERT_TRUE(no_stage);
  EXPECT_EQ(no_stage->status, 404);

  svc.stop();
}

TEST(Service, PortInUse) {
  const auto& ctx = context();
  RunStore store(scratch("port"));
  Service a(ctx, store);
  const int port = a.bind("127.0.0.1", 0);
  Service b(ctx, store);
  try {
    b.bind("127.0.0.1", port);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::PortInUse);
  }
}
