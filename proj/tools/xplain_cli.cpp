#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "xplain/pipeline.hpp"
#include "xplain/service.hpp"

using namespace xplain;

namespace {

// --config, then XPLAIN_CONFIG, then config/xplain.json; built-in defaults
// (paths relative to the working directory) when none exists.
PipelineConfig resolve_config(const std::string& flag) {
  if (!flag.empty()) return load_config(flag);
  if (const char* env = std::getenv("XPLAIN_CONFIG"); env && *env) return load_config(env);
  if (stdfs::exists("config/xplain.json")) return load_config("config/xplain.json");
  return {};
}

void print(const json& j) { std::cout << j.dump(2) << "\n"; }

json ingest_report(const PipelineConfig& cfg) {
  const auto schema = load_schema(cfg.schema.string());
  const auto raw = load_dataset(cfg.dataset.string(), schema);
  const auto imputed = impute_medians(raw);
  json zeros = json::object();
  for (std::size_t j = 0; j < schema.feature_count(); ++j) {
    if (!schema.zero_means_missing[j]) continue;
    std::size_t n = 0;
    for (const auto& r : raw.rows) n += r[j] == 0.0;
    zeros[schema.feature_names[j]] = n;
  }
  return {{"dataset", cfg.dataset.string()},
          {"rows", raw.size()},
          {"features", schema.feature_names},
          {"imputed_zero_counts", zeros},
          {"summary", summarize_stats(imputed)}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xplain: question-driven explanations for tabular classifiers"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "Config file (default: $XPLAIN_CONFIG or config/xplain.json)");

  auto* ingest = app.add_subcommand("ingest", "Load, validate and impute a dataset");
  std::string data_path, schema_path;
  ingest->add_option("--data", data_path, "CSV file");
  ingest->add_option("--schema", schema_path, "Schema JSON");

  auto* train = app.add_subcommand("train", "Train and evaluate models over the configured split seeds");
  std::string model_flag = "all";
  train->add_option("--model", model_flag)->check(CLI::IsMember({"lr", "dt", "rf", "all"}));
  std::string model_out;
  train->add_option("--out", model_out, "Write the model trained on the pipeline split to this file");

  auto* ask_cmd = app.add_subcommand("ask", "Answer one question");
  std::string question;
  std::optional<std::uint64_t> seed;
  ask_cmd->add_option("question", question)->required();
  ask_cmd->add_option("--seed", seed);

  auto* eval = app.add_subcommand("eval", "Evaluate a pipeline stage");
  std::string stage = "all";
  eval->add_option("stage", stage)->check(CLI::IsMember({"decompose", "delegate", "synthesis", "all"}));

  auto* serve = app.add_subcommand("serve", "Run the HTTP API");
  std::optional<int> port;
  std::string host = "127.0.0.1";
  serve->add_option("--port", port);
  serve->add_option("--host", host);

  auto* runs = app.add_subcommand("runs", "Inspect persisted runs");
  runs->require_subcommand(1);
  auto* runs_list = runs->add_subcommand("list", "List runs");
  auto* runs_show = runs->add_subcommand("show", "Print one run record");
  std::string run_id;
  runs_show->add_option("id", run_id)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = resolve_config(config_path);
    if (*ingest) {
      if (!data_path.empty()) cfg.dataset = data_path;
      if (!schema_path.empty()) cfg.schema = schema_path;
      print(ingest_report(cfg));
    } else if (*train) {
      const auto schema = load_schema(cfg.schema.string());
      const auto data = impute_medians(load_dataset(cfg.dataset.string(), schema));
      auto rows = reproduce_models(data, cfg.reproduction_seeds, cfg.test_fraction);
      std::optional<ModelKind> selected;
      if (model_flag == "all") {
        selected = best_kind(rows, data);
      } else {
        const auto k = model_kind_from_flag(model_flag);
        std::erase_if(rows, [&](const ReproductionRow& r) { return r.kind != k; });
        selected = k;
      }
      if (!model_out.empty()) {
        const auto tr = split(data, cfg.test_fraction, cfg.split_seed).first;
        fs::write_file_atomic(model_out, model_to_json(train_kind(*selected, tr)).dump(2) + "\n");
      }
      print(reproduction_to_json(rows, selected, cfg.reproduction_seeds));
    } else if (*ask_cmd) {
      const auto ctx = load_context(cfg);
      RunStore store(cfg.store_root);
      print(json(ask(question, ctx, store, seed)));
    } else if (*eval) {
      const auto ctx = load_context(cfg);
      if (stage == "all") {
        json all = json::object();
        for (const char* s : {"decompose", "delegate", "synthesis"}) all[s] = run_stage_eval(stage_from_string(s), ctx);
        print(all);
      } else {
        print(run_stage_eval(stage_from_string(stage), ctx));
      }
    } else if (*serve) {
      const auto ctx = load_context(cfg);
      RunStore store(cfg.store_root);
      Service svc(ctx, store);
      const int bound = svc.bind(host, port.value_or(cfg.port));
      std::cerr << "xplain listening on http://" << host << ":" << bound << "\n";
      svc.serve();
    } else if (*runs) {
      RunStore store(cfg.store_root);
      if (*runs_list) {
        print(index_to_json(store.index()));
      } else if (*runs_show) {
        print(json(store.load(run_id, load_schema(cfg.schema.string()))));
      }
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code() == ErrorCode::UnknownKey ? 3 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
