// mpoxvlm command-line pipeline: synthetic data generation, staged training,
// evaluation, module ablation, gradient checking and report printing.

#include <CLI11.hpp>

#include <chrono>
#include <iomanip>
#include <iostream>
#include <optional>

#include "mpoxvlm/mpoxvlm.hpp"

namespace mx = mpoxvlm;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file (defaults when absent)");
  cmd->add_option("--set", args.overrides, "Override a config key: --set key.path=value");
  cmd->add_option("--seed", args.seed, "Override the seed list with a single seed");
  cmd->add_option("--out", args.out, "Output directory or file");
}

mx::RunConfig make_config(const CommonArgs& args) {
  mx::ordered_json j = mx::ordered_json::object();
  if (!args.config_path.empty()) {
    try {
      j = mx::ordered_json::parse(mx::read_file(args.config_path));
    } catch (const nlohmann::json::exception& e) {
      throw mx::ValidationError("config parse error in " + args.config_path + ": " + e.what());
    }
  }
  for (const auto& o : args.overrides) mx::apply_override(j, o);
  mx::RunConfig config = mx::RunConfig::from_json(std::move(j));
  mx::apply_seed_sources(config, args.seed);
  return config;
}

std::string config_key_footer() {
  return "Config keys and defaults:\n" + mx::RunConfig::default_json().dump(2) + "\n";
}

int cmd_gen_data(const CommonArgs& args) {
  mx::RunConfig config = make_config(args);
  std::filesystem::path out = args.out.empty() ? config.data_dir : args.out;
  std::uint64_t seed = config.seeds.front();

  mx::DatasetManifest manifest = mx::generate_dataset(config.data, seed);
  mx::save_manifest(manifest, out);
  mx::Tokenizer::build_default().save(out / "vocab.txt");

  std::cout << "dataset written to " << out.string() << "\n"
            << "  total=" << manifest.records.size()
            << " positives=" << manifest.counts.positives
            << " negatives=" << manifest.counts.negatives << "\n"
            << "  train/val/test=" << manifest.counts.train << "/" << manifest.counts.val
            << "/" << manifest.counts.test << "\n"
            << "  test pos/neg=" << manifest.counts.test_positives << "/"
            << manifest.counts.test_negatives << "\n"
            << "  config_hash=" << manifest.config_hash() << " seed=" << seed << std::endl;
  return 0;
}

int cmd_train(const CommonArgs& args, const std::string& stage_arg) {
  mx::RunConfig config = make_config(args);
  std::filesystem::path data_dir = config.data_dir;
  mx::DatasetManifest manifest = mx::load_manifest(data_dir);
  mx::Tokenizer tok = mx::pipeline_tokenizer(data_dir);
  std::filesystem::path run_root = args.out.empty() ? config.run_dir : args.out;

  std::optional<mx::Stage> only;
  if (stage_arg != "all") only = mx::stage_from_name(stage_arg);

  for (std::uint64_t seed : config.seeds) {
    mx::RunContext ctx;
    ctx.run_dir = mx::seed_run_dir(run_root, seed);
    ctx.config_hash = config.hash();
    ctx.data_hash = mx::dataset_hash(manifest);
    ctx.seed = seed;

    mx::ModelBundle bundle =
        mx::ModelBundle::init(config.model, tok, mx::derive_seed(seed, "model"));
    auto t0 = std::chrono::steady_clock::now();
    mx::PipelineResult result = mx::run_pipeline(bundle, manifest, data_dir, config.flags,
                                                 config.use_llm, config.train, ctx, only);
    auto secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    mx::ordered_json stages = mx::ordered_json::array();
    for (const auto& rec : result.stages)
      stages.push_back(mx::stage_sidecar(ctx, rec.stage, rec));
    mx::ordered_json run_json{{"config_hash", ctx.config_hash},
                              {"data_hash", ctx.data_hash},
                              {"seed", seed},
                              {"config", config.to_json()},
                              {"stages", stages}};
    mx::write_file(ctx.run_dir / "run.json", run_json.dump(2) + "\n");

    std::cout << "seed " << seed << ": ";
    for (const auto& rec : result.stages) {
      std::cout << mx::stage_name(rec.stage) << "(" << rec.steps_run << " steps"
                << (rec.early_stopped ? ", early stop" : "") << ") ";
    }
    std::cout << "[" << std::fixed << std::setprecision(1) << secs << "s] -> "
              << ctx.run_dir.string() << std::endl;
  }
  return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& split_arg) {
  mx::RunConfig config = make_config(args);
  std::filesystem::path data_dir = config.data_dir;
  mx::DatasetManifest manifest = mx::load_manifest(data_dir);
  mx::Split split = mx::split_from_name(split_arg);

  mx::MetricsReport report = mx::evaluate_model(config, manifest, data_dir, config.run_dir,
                                                split, config.flags, config.use_llm);
  mx::ordered_json j =
      mx::metrics_to_json(report, config.hash(), mx::dataset_hash(manifest));

  std::filesystem::path out_path =
      args.out.empty()
          ? std::filesystem::path(config.run_dir) / ("metrics_" + split_arg + ".json")
          : std::filesystem::path(args.out);
  mx::write_file(out_path, j.dump(2) + "\n");

  auto show = [](const mx::MetricSummary& s) {
    if (!s.mean) return std::string("undefined");
    return mx::format_double(*s.mean) + " +/- " + mx::format_double(*s.stddev);
  };
  std::cout << "split=" << split_arg << " seeds=" << report.per_seed.size() << "\n"
            << "  accuracy  " << show(report.accuracy_s) << "\n"
            << "  precision " << show(report.precision_s) << "\n"
            << "  recall    " << show(report.recall_s) << "\n"
            << "  f1        " << show(report.f1_s) << "\n"
            << "  auroc     " << show(report.auroc_s) << "\n"
            << "metrics written to " << out_path.string() << std::endl;
  return 0;
}

int cmd_ablate(const CommonArgs& args) {
  mx::RunConfig config = make_config(args);
  std::filesystem::path data_dir = config.data_dir;
  mx::DatasetManifest manifest = mx::load_manifest(data_dir);
  std::filesystem::path out = args.out.empty() ? "out/ablation" : args.out;

  mx::AblationResult result = mx::run_ablation(config, manifest, data_dir, out, &std::cout);
  mx::write_file(out / "ablation.csv", mx::ablation_csv(result));
  for (const auto& row : result.rows) {
    mx::write_file(out / row.spec.name / "metrics.json",
                   mx::metrics_to_json(row.report, result.config_hash, result.data_hash)
                           .dump(2) +
                       "\n");
  }

  std::cout << "\nclassifier clip text llms | accuracy            auroc\n";
  for (const auto& row : result.rows) {
    auto mark = [](bool b) { return b ? "x" : "-"; };
    auto show = [](const mx::MetricSummary& s) {
      if (!s.mean) return std::string("undefined");
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.4f +/- %.4f", *s.mean, *s.stddev);
      return std::string(buf);
    };
    std::cout << std::setw(10) << mark(row.spec.flags.cls_token) << " "
              << std::setw(4) << mark(row.spec.flags.clip_tokens) << " "
              << std::setw(4) << mark(row.spec.flags.context) << " "
              << std::setw(4) << mark(row.spec.use_llm) << " | "
              << show(row.report.accuracy_s) << "  " << show(row.report.auroc_s) << "\n";
  }
  std::cout << "ablation artifacts in " << out.string() << std::endl;
  return 0;
}

int cmd_gradcheck(const CommonArgs& args) {
  mx::RunConfig config = make_config(args);
  std::uint64_t seed = config.seeds.front();
  auto outcomes = mx::grad_check_suite(1e-5, seed);
  bool all_pass = true;
  for (const auto& o : outcomes) {
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << std::left << std::setw(14) << o.module
              << " max_rel_err=" << std::scientific << std::setprecision(3) << o.max_rel_err
              << " threshold=" << o.threshold << std::defaultfloat << "\n";
    all_pass &= o.pass;
  }
  if (!all_pass) {
    std::cerr << "gradient check failed" << std::endl;
    return 2;
  }
  return 0;
}

int cmd_report(const CommonArgs& args) {
  mx::RunConfig config = make_config(args);
  std::filesystem::path dir = args.out.empty() ? config.run_dir : args.out;
  bool printed = false;

  for (const auto& entry : {dir / "ablation.csv"}) {
    if (std::filesystem::exists(entry)) {
      std::cout << "== " << entry.string() << "\n" << mx::read_file(entry) << "\n";
      printed = true;
    }
  }
  for (auto it = std::filesystem::recursive_directory_iterator(dir);
       it != std::filesystem::recursive_directory_iterator(); ++it) {
    if (!it->is_regular_file()) continue;
    auto name = it->path().filename().string();
    if (name.rfind("metrics", 0) == 0 && it->path().extension() == ".json") {
      auto j = mx::ordered_json::parse(mx::read_file(it->path()));
      std::cout << "== " << it->path().string() << "\n";
      std::cout << "  config=" << j.value("config", std::string("?"))
                << " split=" << j.value("split", std::string("?")) << "\n";
      auto show = [](const mx::ordered_json& s) {
        if (s.at("mean").is_null()) return std::string("undefined");
        return mx::format_double(s.at("mean").get<double>()) + " +/- " +
               mx::format_double(s.at("std").get<double>());
      };
      for (const char* metric : {"accuracy", "precision", "recall", "f1", "auroc"}) {
        std::cout << "  " << std::left << std::setw(10) << metric
                  << show(j.at("summary").at(metric)) << "\n";
      }
      printed = true;
    }
  }
  if (!printed) {
    std::cerr << "no metrics.json or ablation.csv found under " << dir.string() << std::endl;
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mpoxvlm: desk-scale dual-encoder vision-language diagnosis pipeline"};
  app.require_subcommand(1);
  app.footer(config_key_footer());

  CommonArgs gen_args, train_args, eval_args, ablate_args, grad_args, report_args;
  std::string stage = "all";
  std::string split = "test";

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  add_common(gen, gen_args);

  auto* train = app.add_subcommand("train", "Run the staged training pipeline");
  add_common(train, train_args);
  train->add_option("--stage", stage, "vl|lm|mae|cls|align|finetune|all")
      ->check(CLI::IsMember({"vl", "lm", "mae", "cls", "align", "finetune", "all"}));

  auto* eval = app.add_subcommand("eval", "Evaluate trained checkpoints");
  add_common(eval, eval_args);
  eval->add_option("--split", split, "train|val|test")
      ->check(CLI::IsMember({"train", "val", "test"}));

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the four module-ablation rows");
  add_common(ablate, ablate_args);

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  add_common(gradcheck, grad_args);

  auto* report = app.add_subcommand("report", "Print metrics and ablation artifacts");
  add_common(report, report_args);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_args);
    if (train->parsed()) return cmd_train(train_args, stage);
    if (eval->parsed()) return cmd_eval(eval_args, split);
    if (ablate->parsed()) return cmd_ablate(ablate_args);
    if (gradcheck->parsed()) return cmd_gradcheck(grad_args);
    if (report->parsed()) return cmd_report(report_args);
  } catch (const mx::ValidationError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
