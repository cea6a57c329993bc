#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpoxvlm/checkpoint.hpp"
#include "mpoxvlm/pipeline.hpp"

namespace mpoxvlm {

// ---------------------------------------------------------------------------
// Cosine annealing
// ---------------------------------------------------------------------------

inline double cosine_lr(std::int64_t step, std::int64_t total, double base, double floor) {
  if (total <= 0) throw ValidationError("cosine_lr: total must be positive");
  require(step >= 0 && step <= total, "cosine_lr: step outside [0,total]");
  return floor + 0.5 * (base - floor) *
                     (1.0 + std::cos(M_PI * static_cast<double>(step) / static_cast<double>(total)));
}

// ---------------------------------------------------------------------------
// AdamW with decoupled (multiplicative) weight decay
// ---------------------------------------------------------------------------

struct OptimConfig {
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

class AdamW {
 public:
  AdamW() = default;
  AdamW(const OptimConfig& cfg, const std::vector<ParamView>& params) : cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const auto& p : params) {
      m_.emplace_back(static_cast<size_t>(p.size()), 0.0);
      v_.emplace_back(static_cast<size_t>(p.size()), 0.0);
    }
  }

  std::int64_t steps_taken() const { return t_; }

  // Applies one update. `params` and `grads` must be the aligned registries
  // the optimizer was built for.
  void step(std::vector<ParamView>& params, const std::vector<ParamView>& grads,
            double lr) {
    require(params.size() == grads.size() && params.size() == m_.size(),
            "optimizer registry mismatch");

    double norm_sq = 0.0;
    for (size_t i = 0; i < grads.size(); ++i) {
      require(grads[i].size() == params[i].size(), "grad shape mismatch for " + params[i].name);
      for (Eigen::Index j = 0; j < grads[i].size(); ++j) {
        double g = grads[i].data[j];
        if (!std::isfinite(g))
          throw RuntimeFailure("non-finite gradient in parameter group " + params[i].name);
        norm_sq += g * g;
      }
    }
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double norm = std::sqrt(norm_sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }

    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      double* w = params[i].data;
      const double* g0 = grads[i].data;
      auto& m = m_[i];
      auto& v = v_[i];
      for (Eigen::Index j = 0; j < params[i].size(); ++j) {
        double g = g0[j] * scale;
        // Decoupled decay multiplies the weight directly.
        w[j] *= (1.0 - lr * cfg_.weight_decay);
        m[static_cast<size_t>(j)] = cfg_.beta1 * m[static_cast<size_t>(j)] + (1.0 - cfg_.beta1) * g;
        v[static_cast<size_t>(j)] = cfg_.beta2 * v[static_cast<size_t>(j)] + (1.0 - cfg_.beta2) * g * g;
        double mhat = m[static_cast<size_t>(j)] / bc1;
        double vhat = v[static_cast<size_t>(j)] / bc2;
        w[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

 private:
  OptimConfig cfg_;
  std::int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// ---------------------------------------------------------------------------
// Early stopping: stop after `patience` consecutive evaluations without an
// improvement greater than min_delta; the best snapshot is retained.
// ---------------------------------------------------------------------------

class EarlyStopper {
 public:
  EarlyStopper(int patience, double min_delta) : patience_(patience), min_delta_(min_delta) {
    require(patience >= 1, "patience must be >= 1");
  }

  // Returns true when training should stop; `index` identifies the evaluation.
  bool observe(double value, int index) {
    if (value < best_ - min_delta_) {
      best_ = value;
      best_index_ = index;
      since_ = 0;
    } else {
      ++since_;
    }
    return since_ >= patience_;
  }

  double best() const { return best_; }
  int best_index() const { return best_index_; }

 private:
  int patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_index_ = -1;
  int since_ = 0;
};

// ---------------------------------------------------------------------------
// Stage plan
// ---------------------------------------------------------------------------

enum class Stage : std::uint8_t { vl = 0, lm, mae, cls, align, finetune };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::vl: return "vl";
    case Stage::lm: return "lm";
    case Stage::mae: return "mae";
    case Stage::cls: return "cls";
    case Stage::align: return "align";
    default: return "finetune";
  }
}

inline Stage stage_from_name(std::string_view name) {
  for (Stage s : {Stage::vl, Stage::lm, Stage::mae, Stage::cls, Stage::align, Stage::finetune})
    if (name == stage_name(s)) return s;
  throw ValidationError("unknown stage: " + std::string(name));
}

// Stage order for a model configuration. The two backbone stand-ins run
// first (contrastive VL encoder, then format-level LM pretraining), so the
// shared patch tokenizer and the base LM are fixed before anything depends
// on them. The lm stage trains next-token prediction on text-only sequences
// whose answer is a coin-flipped option: the LM learns the template language
// and the answer format but carries no diagnostic signal into later stages.
inline std::vector<Stage> stage_sequence(const IncludeFlags& flags, bool use_llm) {
  std::vector<Stage> seq = {Stage::vl};
  if (use_llm) seq.push_back(Stage::lm);
  seq.push_back(Stage::mae);
  if (flags.cls_token) seq.push_back(Stage::cls);
  if (use_llm) {
    seq.push_back(Stage::align);
    seq.push_back(Stage::finetune);
  }
  return seq;
}

inline std::vector<ParamGroup> trainable_groups(Stage stage, const IncludeFlags& flags) {
  switch (stage) {
    case Stage::vl:
      return {ParamGroup::tokenizer, ParamGroup::clip, ParamGroup::vl_head};
    case Stage::lm:
      return {ParamGroup::lm};
    case Stage::mae:
      return {ParamGroup::vit, ParamGroup::mae_decoder};
    case Stage::cls:
      return {ParamGroup::vit, ParamGroup::vit_head};
    case Stage::align: {
      std::vector<ParamGroup> g;
      if (flags.clip_tokens) g.push_back(ParamGroup::adapter_clip);
      if (flags.cls_token) g.push_back(ParamGroup::adapter_cls);
      return g;
    }
    default:
      return {ParamGroup::lora};
  }
}

struct TrainSettings {
  std::map<std::string, int> steps = {{"vl", 500},   {"lm", 800},      {"mae", 500},
                                      {"cls", 2000}, {"align", 800},   {"finetune", 1500}};
  std::map<std::string, double> lr = {{"vl", 3e-3},  {"lm", 3e-3},     {"mae", 3e-3},
                                      {"cls", 3e-3}, {"align", 3e-3},  {"finetune", 3e-3}};
  double floor_lr = 0.0;
  double warmup_frac = 0.05;  // linear LR warmup over the first fraction of a stage
  int batch = 8;
  OptimConfig optim;
  int eval_every = 200;
  int patience = 5;
  double min_delta = 0.0;
  int val_subset = 64;
  int max_new = 12;

  int stage_steps(Stage s) const { return steps.at(stage_name(s)); }
  double stage_lr(Stage s) const { return lr.at(stage_name(s)); }
};

struct StepLog {
  int step = 0;
  Stage stage = Stage::vl;
  double loss = 0.0;
  double lr = 0.0;
};

struct StageRecord {
  Stage stage = Stage::vl;
  int steps_run = 0;
  bool early_stopped = false;
  double best_val = 0.0;
  int best_eval_index = -1;
  double init_monitor = 0.0;
  double final_monitor = 0.0;
};

// ---------------------------------------------------------------------------
// Stage runner
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<size_t> split_indices(const DatasetManifest& m, Split s) {
  std::vector<size_t> idx;
  for (size_t i = 0; i < m.records.size(); ++i)
    if (m.records[i].split == s) idx.push_back(i);
  return idx;
}

// Deterministic epoch-reshuffled batch iterator.
class BatchIterator {
 public:
  BatchIterator(std::vector<size_t> indices, int batch, std::uint64_t seed,
                const std::string& label)
      : indices_(std::move(indices)), batch_(batch), seed_(seed), label_(label) {
    require(!indices_.empty(), "no samples in training split");
    reshuffle();
  }

  std::vector<size_t> next() {
    if (cursor_ + static_cast<size_t>(batch_) > indices_.size()) reshuffle();
    size_t take = std::min(static_cast<size_t>(batch_), indices_.size());
    std::vector<size_t> out(indices_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                            indices_.begin() + static_cast<std::ptrdiff_t>(cursor_ + take));
    cursor_ += take;
    return out;
  }

 private:
  void reshuffle() {
    Rng rng(derive_seed(seed_, label_ + "-order", static_cast<std::uint64_t>(epoch_)));
    rng.shuffle(indices_);
    cursor_ = 0;
    ++epoch_;
  }

  std::vector<size_t> indices_;
  int batch_;
  std::uint64_t seed_;
  std::string label_;
  size_t cursor_ = 0;
  int epoch_ = 0;
};

inline std::vector<ParamView> views_for_groups(ModelBundle& bundle,
                                               const std::vector<ParamGroup>& groups) {
  std::vector<ParamView> out;
  for (ParamGroup g : groups) {
    auto v = bundle.group_views(g);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

inline void scale_views(std::vector<ParamView>& views, double s) {
  for (auto& v : views)
    for (Eigen::Index j = 0; j < v.size(); ++j) v.data[j] *= s;
}

}  // namespace detail

// Runs one training stage in place. Only the stage's trainable groups change;
// the best-validation weights are restored before returning.
inline StageRecord run_stage(ModelBundle& bundle, Stage stage,
                             const DatasetManifest& manifest,
                             const std::filesystem::path& data_dir,
                             const IncludeFlags& flags, const TrainSettings& settings,
                             std::uint64_t seed, std::vector<StepLog>& logs) {
  StageRecord record;
  record.stage = stage;
  const std::string name = stage_name(stage);
  const int total_steps = settings.stage_steps(stage);
  const double base_lr = settings.stage_lr(stage);
  require(total_steps >= 1, "stage " + name + " has no step budget");

  auto train_idx = detail::split_indices(manifest, Split::train);
  auto val_idx = detail::split_indices(manifest, Split::val);
  if (static_cast<int>(val_idx.size()) > settings.val_subset)
    val_idx.resize(static_cast<size_t>(settings.val_subset));

  int batch = std::min<int>(settings.batch, static_cast<int>(train_idx.size()));
  detail::BatchIterator batches(train_idx, batch, seed, name);

  auto groups = trainable_groups(stage, flags);
  require(!groups.empty(), "stage " + name + " has no trainable groups for these flags");
  auto params = detail::views_for_groups(bundle, groups);
  AdamW optim(settings.optim, params);

  // Preprocessed images for the encoder-training stages; frozen features for
  // the adapter/LoRA stages; neither for text-only LM pretraining.
  const bool needs_images = stage == Stage::vl || stage == Stage::mae || stage == Stage::cls;
  const bool needs_features = stage == Stage::align || stage == Stage::finetune;
  std::map<size_t, Image> image_cache;
  auto get_image = [&](size_t i) -> const Image& {
    auto it = image_cache.find(i);
    if (it == image_cache.end()) {
      it = image_cache
               .emplace(i, preprocessed_image(bundle, manifest, manifest.records[i], data_dir))
               .first;
    }
    return it->second;
  };

  FeatureCache feats;
  if (needs_features) feats = build_feature_cache(bundle, manifest, data_dir);

  // Monitor: masked reconstruction loss for mae, classification loss for cls,
  // answer NLL for align/finetune. The backbone stand-in stages (vl, lm) run
  // fixed budgets.
  auto monitor = [&]() -> double {
    double total = 0.0;
    switch (stage) {
      case Stage::vl:
      case Stage::lm:
        return 0.0;
      case Stage::mae: {
        for (size_t j = 0; j < val_idx.size(); ++j) {
          size_t i = val_idx[j];
          Rng mask_rng(derive_seed(seed, "mae-val-mask", static_cast<std::uint64_t>(j)));
          auto masked = sample_mask(bundle.tok.tokens(), bundle.dims.mae.mask_ratio, mask_rng);
          total += mae_step(bundle.tok, bundle.vit, bundle.mae_dec, get_image(i), masked,
                            nullptr, nullptr);
        }
        return total / static_cast<double>(val_idx.size());
      }
      case Stage::cls: {
        for (size_t i : val_idx)
          total += classifier_step(bundle, get_image(i), manifest.records[i].vqa.label, nullptr);
        return total / static_cast<double>(val_idx.size());
      }
      default: {
        for (size_t i : val_idx)
          total += qa_loss(bundle, feats.per_record[i], manifest.records[i].vqa, flags);
        return total / static_cast<double>(val_idx.size());
      }
    }
  };

  const bool has_monitor = stage != Stage::vl && stage != Stage::lm && !val_idx.empty();
  record.init_monitor = has_monitor ? monitor() : 0.0;

  EarlyStopper stopper(settings.patience, settings.min_delta);
  std::string best_bytes;
  double best_val = std::numeric_limits<double>::infinity();
  auto snapshot = [&]() { return serialize_views(params); };
  auto restore = [&](const std::string& bytes) {
    size_t off = 0;
    for (auto& v : params) {
      std::memcpy(v.data, bytes.data() + off, static_cast<size_t>(v.size()) * sizeof(double));
      off += static_cast<size_t>(v.size()) * sizeof(double);
    }
  };

  int eval_index = 0;
  const int warmup_steps =
      std::max(1, static_cast<int>(std::lround(settings.warmup_frac * total_steps)));
  for (int step = 0; step < total_steps; ++step) {
    auto batch_idx = batches.next();
    double lr = cosine_lr(step, total_steps, base_lr, settings.floor_lr);
    if (settings.warmup_frac > 0.0 && step < warmup_steps)
      lr *= static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    double loss = 0.0;

    // Grad accumulators for this stage's graph.
    VlBatchGrads vl_grads;
    VitClassifierGrad vit_grads;
    MaeDecoderGrad mae_grads;
    AdapterGrad g_clip, g_cls;
    LmGrad g_lm;
    LmLoraGrad g_lora;
    std::vector<ParamView> grad_views;

    switch (stage) {
      case Stage::vl: {
        vl_grads.zero_like(bundle);
        std::vector<Image> images;
        std::vector<std::string> captions;
        for (size_t i : batch_idx) {
          const auto& rec = manifest.records[i];
          images.push_back(get_image(i));
          RenderLatents lat =
              render_latents(rec.attrs, rec.gen_seed, manifest.config.image_size);
          captions.push_back(render_caption(rec.attrs, lat));
        }
        loss = vl_contrastive_step(bundle, images, captions, &vl_grads);
        vl_grads.tok.collect("tok", grad_views);
        vl_grads.clip.collect("clip", grad_views);
        vl_grads.head.collect("vlhead", grad_views);
        break;
      }
      case Stage::lm: {
        g_lm.zero_like(bundle.lm);
        for (size_t bi = 0; bi < batch_idx.size(); ++bi) {
          size_t i = batch_idx[bi];
          Rng coin(derive_seed(seed, "lm-pretrain",
                               static_cast<std::uint64_t>(step) * 1000 + bi));
          VqaInstance text = manifest.records[i].vqa;
          text.answer = coin.bernoulli(0.5) ? text.options[0] : text.options[1];
          IncludeFlags text_flags = flags_from(false, false, coin.bernoulli(0.5));
          AssembledSequence seq = assemble_sequence(Mat(), Mat(), text, bundle.text_tok,
                                                    bundle.lm.token_embed, text_flags, true);
          // Plain causal LM objective: every position after BOS is a target.
          for (size_t t = 1; t < seq.loss_mask.size(); ++t) seq.loss_mask[t] = true;
          loss += answer_nll(bundle.lm, nullptr, seq, true, &g_lm, nullptr).loss;
        }
        loss /= static_cast<double>(batch_idx.size());
        g_lm.collect("lm", grad_views);
        break;
      }
      case Stage::mae: {
        vit_grads.zero_like(bundle.vit);
        mae_grads.zero_like(bundle.mae_dec);
        for (size_t bi = 0; bi < batch_idx.size(); ++bi) {
          size_t i = batch_idx[bi];
          Rng mask_rng(derive_seed(seed, "mae-mask",
                                   static_cast<std::uint64_t>(step) * 1000 + bi));
          auto masked =
              sample_mask(bundle.tok.tokens(), bundle.dims.mae.mask_ratio, mask_rng);
          loss += mae_step(bundle.tok, bundle.vit, bundle.mae_dec, get_image(i), masked,
                           &vit_grads, &mae_grads);
        }
        loss /= static_cast<double>(batch_idx.size());
        vit_grads.collect("vit", grad_views);
        mae_grads.collect("maedec", grad_views);
        break;
      }
      case Stage::cls: {
        vit_grads.zero_like(bundle.vit);
        for (size_t i : batch_idx)
          loss += classifier_step(bundle, get_image(i), manifest.records[i].vqa.label,
                                  &vit_grads);
        loss /= static_cast<double>(batch_idx.size());
        vit_grads.collect("vit", grad_views);
        vit_grads.collect_head("vit_head", grad_views);
        break;
      }
      default: {
        g_clip.zero_like(bundle.adapter_clip);
        g_cls.zero_like(bundle.adapter_cls);
        g_lm.zero_like(bundle.lm);
        g_lora.zero_like(bundle.lora);
        for (size_t i : batch_idx) {
          QaForward f = qa_forward(bundle, feats.per_record[i], manifest.records[i].vqa,
                                   flags, /*include_answer=*/true);
          loss += qa_loss_backward(bundle, f, flags, &g_clip, &g_cls, &g_lm, &g_lora);
        }
        loss /= static_cast<double>(batch_idx.size());
        if (stage == Stage::align) {
          if (flags.clip_tokens) g_clip.collect("w_clip", grad_views);
          if (flags.cls_token) g_cls.collect("w_v", grad_views);
        } else {
          g_lora.collect("lora", grad_views);
        }
        break;
      }
    }

    if (!std::isfinite(loss)) {
      logs.push_back({step, stage, loss, lr});
      throw RuntimeFailure("non-finite loss at step " + std::to_string(step) +
                           " of stage " + name);
    }

    // Per-sample grads were accumulated raw; rescale to the batch mean. The
    // contrastive loss already normalizes inside the batch step.
    if (stage != Stage::vl)
      detail::scale_views(grad_views, 1.0 / static_cast<double>(batch_idx.size()));

    optim.step(params, grad_views, lr);
    logs.push_back({step, stage, loss, lr});
    record.steps_run = step + 1;

    if (has_monitor && settings.eval_every > 0 && (step + 1) % settings.eval_every == 0) {
      double val = monitor();
      bool stop = stopper.observe(val, eval_index);
      if (val < best_val) {
        best_val = val;
        best_bytes = snapshot();
        record.best_eval_index = eval_index;
      }
      ++eval_index;
      if (stop) {
        record.early_stopped = true;
        break;
      }
    }
  }

  if (!best_bytes.empty()) restore(best_bytes);
  record.best_val = best_val;
  record.final_monitor = has_monitor ? monitor() : 0.0;
  return record;
}

// ---------------------------------------------------------------------------
// Multi-stage pipeline with stage-granular checkpoints and resume
// ---------------------------------------------------------------------------

struct PipelineResult {
  std::vector<StageRecord> stages;
  std::vector<StepLog> logs;
  std::vector<Stage> skipped;
};

inline std::string losses_csv(const std::vector<StepLog>& logs) {
  std::string out = "step,stage,loss,lr\n";
  for (const auto& l : logs) {
    out += std::to_string(l.step) + "," + stage_name(l.stage) + "," +
           format_double(l.loss) + "," + format_double(l.lr) + "\n";
  }
  return out;
}

struct RunContext {
  std::filesystem::path run_dir;
  std::string config_hash;
  std::string data_hash;
  std::uint64_t seed = 0;
};

inline ordered_json stage_sidecar(const RunContext& ctx, Stage stage,
                                  const StageRecord& rec) {
  ordered_json j{{"stage", stage_name(stage)},
                 {"config_hash", ctx.config_hash},
                 {"data_hash", ctx.data_hash},
                 {"seed", ctx.seed},
                 {"steps_run", rec.steps_run},
                 {"early_stopped", rec.early_stopped},
                 {"init_monitor", rec.init_monitor},
                 {"final_monitor", rec.final_monitor}};
  if (std::isfinite(rec.best_val)) j["best_val"] = rec.best_val;
  else j["best_val"] = nullptr;
  return j;
}

inline std::filesystem::path stage_ckpt_path(const RunContext& ctx, Stage stage) {
  return ctx.run_dir / ("ckpt_" + std::string(stage_name(stage)) + ".bin");
}

// A stage checkpoint is reusable when its sidecar matches this run exactly.
inline bool stage_complete(const RunContext& ctx, Stage stage) {
  auto bin = stage_ckpt_path(ctx, stage);
  auto side = bin;
  side.replace_extension(".json");
  if (!std::filesystem::exists(bin) || !std::filesystem::exists(side)) return false;
  ordered_json j;
  try {
    j = ordered_json::parse(read_file(side));
  } catch (const nlohmann::json::exception&) {
    return false;
  }
  return j.value("config_hash", "") == ctx.config_hash &&
         j.value("data_hash", "") == ctx.data_hash &&
         j.value("seed", std::uint64_t{0}) == ctx.seed;
}

inline StageRecord stage_record_from_sidecar(const RunContext& ctx, Stage stage) {
  auto side = stage_ckpt_path(ctx, stage);
  side.replace_extension(".json");
  ordered_json j = ordered_json::parse(read_file(side));
  StageRecord rec;
  rec.stage = stage;
  rec.steps_run = j.value("steps_run", 0);
  rec.early_stopped = j.value("early_stopped", false);
  rec.best_val = j.at("best_val").is_number() ? j.at("best_val").get<double>()
                                              : std::numeric_limits<double>::infinity();
  rec.init_monitor = j.value("init_monitor", 0.0);
  rec.final_monitor = j.value("final_monitor", 0.0);
  return rec;
}

// Runs (or resumes) the staged pipeline for one model configuration. When
// `only_stage` is set, its prerequisites must already be checkpointed.
inline PipelineResult run_pipeline(ModelBundle& bundle, const DatasetManifest& manifest,
                                   const std::filesystem::path& data_dir,
                                   const IncludeFlags& flags, bool use_llm,
                                   const TrainSettings& settings, const RunContext& ctx,
                                   std::optional<Stage> only_stage = std::nullopt) {
  std::filesystem::create_directories(ctx.run_dir);
  auto sequence = stage_sequence(flags, use_llm);
  if (only_stage) {
    bool in_seq = false;
    for (Stage s : sequence) in_seq |= (s == *only_stage);
    require(in_seq, std::string("stage ") + stage_name(*only_stage) +
                        " is not part of this model configuration");
    // Every prerequisite stage must already be checkpointed.
    for (Stage s : sequence) {
      if (s == *only_stage) break;
      if (!stage_complete(ctx, s))
        throw ValidationError(std::string("missing prerequisite checkpoint for stage ") +
                              stage_name(*only_stage) + ": stage " + stage_name(s) +
                              " has not been trained (expected " +
                              stage_ckpt_path(ctx, s).string() + ")");
    }
  }

  PipelineResult result;

  // Load any previously written logs for stages we are about to skip.
  std::vector<StepLog> existing;
  auto losses_path = ctx.run_dir / "losses.csv";
  if (std::filesystem::exists(losses_path)) {
    std::string content = read_file(losses_path);
    size_t pos = content.find('\n');  // header
    while (pos != std::string::npos && pos + 1 < content.size()) {
      size_t end = content.find('\n', pos + 1);
      std::string line = content.substr(pos + 1, end == std::string::npos
                                                     ? std::string::npos
                                                     : end - pos - 1);
      pos = end;
      if (line.empty()) continue;
      StepLog log;
      size_t c1 = line.find(','), c2 = line.find(',', c1 + 1), c3 = line.find(',', c2 + 1);
      if (c1 == std::string::npos || c2 == std::string::npos || c3 == std::string::npos)
        continue;
      log.step = std::stoi(line.substr(0, c1));
      log.stage = stage_from_name(line.substr(c1 + 1, c2 - c1 - 1));
      log.loss = std::stod(line.substr(c2 + 1, c3 - c2 - 1));
      log.lr = std::stod(line.substr(c3 + 1));
      existing.push_back(log);
    }
  }

  for (size_t si = 0; si < sequence.size(); ++si) {
    Stage stage = sequence[si];
    bool requested = !only_stage || *only_stage == stage;

    if (stage_complete(ctx, stage) && !(only_stage && *only_stage == stage)) {
      auto views = bundle.all_views();
      load_checkpoint_into(stage_ckpt_path(ctx, stage), views);
      result.stages.push_back(stage_record_from_sidecar(ctx, stage));
      result.skipped.push_back(stage);
      for (const auto& l : existing)
        if (l.stage == stage) result.logs.push_back(l);
      continue;
    }

    if (!requested) continue;

    StageRecord rec =
        run_stage(bundle, stage, manifest, data_dir, flags, settings, ctx.seed, result.logs);
    result.stages.push_back(rec);

    auto views = bundle.all_views();
    save_checkpoint(stage_ckpt_path(ctx, stage), views);
    auto side = stage_ckpt_path(ctx, stage);
    side.replace_extension(".json");
    write_file(side, stage_sidecar(ctx, stage, rec).dump(2) + "\n");

    if (only_stage && stage == *only_stage) break;
  }

  write_file(losses_path, losses_csv(result.logs));
  return result;
}

}  // namespace mpoxvlm
