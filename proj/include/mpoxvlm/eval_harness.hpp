#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mpoxvlm/config.hpp"
#include "mpoxvlm/metrics.hpp"
#include "mpoxvlm/pipeline.hpp"
#include "mpoxvlm/trainer.hpp"

namespace mpoxvlm {

inline std::string dataset_hash(const DatasetManifest& m) {
  return hex64(fnv1a64(manifest_to_jsonl(m), fnv1a64(m.config.to_json().dump())));
}

// ---------------------------------------------------------------------------
// Ablation rows, in the order of the module-ablation table
// ---------------------------------------------------------------------------

struct AblationRowSpec {
  std::string name;
  IncludeFlags flags;
  bool use_llm = true;
};

inline const std::vector<AblationRowSpec>& ablation_rows() {
  static const std::vector<AblationRowSpec> rows = {
      {"classifier_only", flags_from(false, true, false), false},
      {"clip_llm", flags_from(true, false, false), true},
      {"clip_text_llm", flags_from(true, false, true), true},
      {"full", flags_from(true, true, true), true},
  };
  return rows;
}

inline void validate_ablation_config(const IncludeFlags& flags, bool use_llm) {
  if (!use_llm) {
    require(flags.cls_token && !flags.clip_tokens && !flags.context,
            "use_llm=false is only valid for the classifier-only row");
  }
}

// ---------------------------------------------------------------------------
// Evaluation of one trained bundle
// ---------------------------------------------------------------------------

inline EvalOutcome evaluate_bundle(const ModelBundle& bundle, const DatasetManifest& manifest,
                                   const std::filesystem::path& data_dir, Split split,
                                   const IncludeFlags& flags, bool use_llm, int max_new) {
  FeatureCache feats = build_feature_cache(bundle, manifest, data_dir);
  if (!use_llm) return evaluate_classifier_only(bundle, manifest, feats, split);
  return evaluate_vlm(bundle, manifest, feats, split, flags, max_new);
}

// The tokenizer the whole pipeline uses: the dataset-dir copy when present
// (the gen-data artifact), otherwise the deterministic default build.
inline Tokenizer pipeline_tokenizer(const std::filesystem::path& data_dir) {
  auto vocab_path = data_dir / "vocab.txt";
  if (!data_dir.empty() && std::filesystem::exists(vocab_path))
    return Tokenizer::load(vocab_path);
  return Tokenizer::build_default();
}

inline std::filesystem::path seed_run_dir(const std::filesystem::path& root,
                                          std::uint64_t seed) {
  return root / ("seed" + std::to_string(seed));
}

// Loads the final-stage checkpoint of one seed's run into a fresh bundle.
inline ModelBundle load_trained_bundle(const RunConfig& config,
                                       const std::filesystem::path& run_dir,
                                       const Tokenizer& tok, std::uint64_t seed,
                                       const IncludeFlags& flags, bool use_llm) {
  ModelBundle bundle = ModelBundle::init(config.model, tok, derive_seed(seed, "model"));
  auto sequence = stage_sequence(flags, use_llm);
  Stage last = sequence.back();
  auto ckpt = run_dir / ("ckpt_" + std::string(stage_name(last)) + ".bin");
  if (!std::filesystem::exists(ckpt))
    throw ValidationError("missing checkpoint: " + ckpt.string());
  auto views = bundle.all_views();
  load_checkpoint_into(ckpt, views);
  return bundle;
}

// evaluate_model: per-seed predictions -> per-seed metrics -> mean ± std.
inline MetricsReport evaluate_model(const RunConfig& config, const DatasetManifest& manifest,
                                    const std::filesystem::path& data_dir,
                                    const std::filesystem::path& run_root, Split split,
                                    const IncludeFlags& flags, bool use_llm) {
  Tokenizer tok = pipeline_tokenizer(data_dir);
  MetricsReport report;
  report.config_descriptor = config.hash();
  report.split = std::string(split_name(split));
  for (std::uint64_t seed : config.seeds) {
    ModelBundle bundle = load_trained_bundle(config, seed_run_dir(run_root, seed), tok,
                                             seed, flags, use_llm);
    EvalOutcome outcome =
        evaluate_bundle(bundle, manifest, data_dir, split, flags, use_llm, config.train.max_new);
    SeedMetrics sm = seed_metrics(seed, outcome.preds);
    sm.score_answer_disagreements = outcome.score_answer_disagreements;
    report.per_seed.push_back(sm);
  }
  report.summarize_all();
  return report;
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

inline ordered_json metrics_to_json(const MetricsReport& report, const std::string& config_hash,
                                    const std::string& data_hash_v) {
  auto opt = [](const std::optional<double>& v) -> ordered_json {
    if (!v) return nullptr;
    return *v;
  };
  ordered_json per_seed = ordered_json::array();
  for (const auto& m : report.per_seed) {
    per_seed.push_back(ordered_json{
        {"seed", m.seed},
        {"accuracy", m.accuracy_v},
        {"precision", opt(m.precision_v)},
        {"recall", opt(m.recall_v)},
        {"f1", opt(m.f1_v)},
        {"auroc", m.auroc_v},
        {"confusion", ordered_json{{"tp", m.conf.tp}, {"fp", m.conf.fp},
                                   {"tn", m.conf.tn}, {"fn", m.conf.fn}}},
        {"score_answer_disagreements", m.score_answer_disagreements}});
  }
  auto summary = [&](const MetricSummary& s) {
    return ordered_json{{"mean", opt(s.mean)},
                        {"std", opt(s.stddev)},
                        {"single_seed", s.single_seed}};
  };
  return ordered_json{{"config", report.config_descriptor},
                      {"config_hash", config_hash},
                      {"data_hash", data_hash_v},
                      {"split", report.split},
                      {"per_seed", per_seed},
                      {"summary", ordered_json{{"accuracy", summary(report.accuracy_s)},
                                               {"precision", summary(report.precision_s)},
                                               {"recall", summary(report.recall_s)},
                                               {"f1", summary(report.f1_s)},
                                               {"auroc", summary(report.auroc_s)}}}};
}

// ---------------------------------------------------------------------------
// Ablation runner: trains and evaluates the four rows under identical
// seeds and data.
// ---------------------------------------------------------------------------

struct AblationRowResult {
  AblationRowSpec spec;
  MetricsReport report;
};

struct AblationResult {
  std::vector<AblationRowResult> rows;
  std::string data_hash;
  std::string config_hash;
};

inline AblationResult run_ablation(const RunConfig& config, const DatasetManifest& manifest,
                                   const std::filesystem::path& data_dir,
                                   const std::filesystem::path& out_dir,
                                   std::ostream* progress = nullptr) {
  Tokenizer tok = pipeline_tokenizer(data_dir);
  AblationResult result;
  result.data_hash = dataset_hash(manifest);
  result.config_hash = config.hash();

  for (const auto& row : ablation_rows()) {
    validate_ablation_config(row.flags, row.use_llm);
    MetricsReport report;
    report.config_descriptor = row.name;
    report.split = "test";
    for (std::uint64_t seed : config.seeds) {
      if (progress)
        (*progress) << "[ablate] row=" << row.name << " seed=" << seed << std::endl;
      RunContext ctx;
      ctx.run_dir = seed_run_dir(out_dir / row.name, seed);
      ctx.config_hash = result.config_hash;
      ctx.data_hash = result.data_hash;
      ctx.seed = seed;
      ModelBundle bundle = ModelBundle::init(config.model, tok, derive_seed(seed, "model"));
      run_pipeline(bundle, manifest, data_dir, row.flags, row.use_llm, config.train, ctx);
      EvalOutcome outcome = evaluate_bundle(bundle, manifest, data_dir, Split::test,
                                            row.flags, row.use_llm, config.train.max_new);
      SeedMetrics sm = seed_metrics(seed, outcome.preds);
      sm.score_answer_disagreements = outcome.score_answer_disagreements;
      report.per_seed.push_back(sm);
    }
    report.summarize_all();
    result.rows.push_back({row, report});
  }
  return result;
}

inline std::string ablation_csv(const AblationResult& result) {
  auto fmt = [](const std::optional<double>& v) {
    return v ? format_double(*v) : std::string("undefined");
  };
  std::string out =
      "classifier,clip,text,llms,accuracy_mean,accuracy_std,auroc_mean,auroc_std\n";
  for (const auto& row : result.rows) {
    out += std::string(row.spec.flags.cls_token ? "yes" : "no") + "," +
           (row.spec.flags.clip_tokens ? "yes" : "no") + "," +
           (row.spec.flags.context ? "yes" : "no") + "," +
           (row.spec.use_llm ? "yes" : "no") + "," + fmt(row.report.accuracy_s.mean) + "," +
           fmt(row.report.accuracy_s.stddev) + "," + fmt(row.report.auroc_s.mean) + "," +
           fmt(row.report.auroc_s.stddev) + "\n";
  }
  return out;
}

}  // namespace mpoxvlm
