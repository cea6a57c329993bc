#pragma once

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpoxvlm/common.hpp"
#include "mpoxvlm/data_synth.hpp"
#include "mpoxvlm/pipeline.hpp"
#include "mpoxvlm/trainer.hpp"

namespace mpoxvlm {

// One JSON config drives every subcommand. Every key has a default; unknown
// keys are rejected; `--set a.b.c=value` overrides individual keys and the
// MPOXVLM_SEED environment variable overrides the seed list.

struct RunConfig {
  GeneratorConfig data;
  ModelDims model;
  IncludeFlags flags;
  bool use_llm = true;
  TrainSettings train;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string data_dir = "out/data";
  std::string run_dir = "out/runs";

  static ordered_json default_json() {
    RunConfig c;
    return c.to_json();
  }

  ordered_json to_json() const {
    ordered_json j;
    j["data"] = data.to_json();
    j["model"] = ordered_json{{"image_target", model.image_target},
                              {"patch", model.patch},
                              {"d_v", model.d_v},
                              {"enc_depth", model.enc_depth},
                              {"enc_heads", model.enc_heads},
                              {"d_h", model.d_h},
                              {"lm_depth", model.lm_depth},
                              {"lm_heads", model.lm_heads},
                              {"adapter_hidden", model.adapter_hidden},
                              {"mlp_ratio", model.mlp_ratio},
                              {"max_len", model.max_len},
                              {"lora_rank", model.lora_rank},
                              {"lora_alpha", model.lora_alpha},
                              {"contrastive_dim", model.contrastive_dim},
                              {"mae_mask_ratio", model.mae.mask_ratio},
                              {"mae_decoder_depth", model.mae.decoder_depth},
                              {"mae_decoder_dim", model.mae.decoder_dim}};
    j["flags"] = ordered_json{{"use_classifier_token", flags.cls_token},
                              {"use_clip_tokens", flags.clip_tokens},
                              {"use_text_context", flags.context},
                              {"use_llm", use_llm}};
    j["train"] = ordered_json{{"steps", train.steps},
                              {"lr", train.lr},
                              {"floor_lr", train.floor_lr},
                              {"warmup_frac", train.warmup_frac},
                              {"batch", train.batch},
                              {"weight_decay", train.optim.weight_decay},
                              {"beta1", train.optim.beta1},
                              {"beta2", train.optim.beta2},
                              {"eps", train.optim.eps},
                              {"clip_norm", train.optim.clip_norm},
                              {"eval_every", train.eval_every},
                              {"patience", train.patience},
                              {"min_delta", train.min_delta},
                              {"val_subset", train.val_subset},
                              {"max_new", train.max_new}};
    j["seeds"] = seeds;
    j["data_dir"] = data_dir;
    j["run_dir"] = run_dir;
    return j;
  }

  static void reject_unknown(const ordered_json& given, const ordered_json& defaults,
                             const std::string& path) {
    for (auto it = given.begin(); it != given.end(); ++it) {
      std::string key_path = path.empty() ? it.key() : path + "." + it.key();
      if (!defaults.contains(it.key()))
        throw ValidationError("unknown config key: " + key_path);
      if (it->is_object() && defaults.at(it.key()).is_object())
        reject_unknown(*it, defaults.at(it.key()), key_path);
    }
  }

  static RunConfig from_json(ordered_json j) {
    ordered_json defaults = default_json();
    reject_unknown(j, defaults, "");

    // Overlay the given keys on the defaults.
    std::function<void(ordered_json&, const ordered_json&)> merge =
        [&](ordered_json& base, const ordered_json& over) {
          for (auto it = over.begin(); it != over.end(); ++it) {
            if (it->is_object() && base.at(it.key()).is_object())
              merge(base.at(it.key()), *it);
            else
              base[it.key()] = *it;
          }
        };
    merge(defaults, j);
    const ordered_json& m = defaults;

    RunConfig c;
    c.data = GeneratorConfig::from_json(m.at("data"));
    const auto& mm = m.at("model");
    c.model.image_target = mm.at("image_target").get<int>();
    c.model.patch = mm.at("patch").get<int>();
    c.model.d_v = mm.at("d_v").get<Eigen::Index>();
    c.model.enc_depth = mm.at("enc_depth").get<int>();
    c.model.enc_heads = mm.at("enc_heads").get<int>();
    c.model.d_h = mm.at("d_h").get<Eigen::Index>();
    c.model.lm_depth = mm.at("lm_depth").get<int>();
    c.model.lm_heads = mm.at("lm_heads").get<int>();
    c.model.adapter_hidden = mm.at("adapter_hidden").get<Eigen::Index>();
    c.model.mlp_ratio = mm.at("mlp_ratio").get<int>();
    c.model.max_len = mm.at("max_len").get<Eigen::Index>();
    c.model.lora_rank = mm.at("lora_rank").get<int>();
    c.model.lora_alpha = mm.at("lora_alpha").get<double>();
    c.model.contrastive_dim = mm.at("contrastive_dim").get<Eigen::Index>();
    c.model.mae.mask_ratio = mm.at("mae_mask_ratio").get<double>();
    c.model.mae.decoder_depth = mm.at("mae_decoder_depth").get<int>();
    c.model.mae.decoder_dim = mm.at("mae_decoder_dim").get<Eigen::Index>();

    const auto& mf = m.at("flags");
    c.flags.cls_token = mf.at("use_classifier_token").get<bool>();
    c.flags.clip_tokens = mf.at("use_clip_tokens").get<bool>();
    c.flags.context = mf.at("use_text_context").get<bool>();
    c.use_llm = mf.at("use_llm").get<bool>();
    require(c.use_llm || (c.flags.cls_token && !c.flags.clip_tokens && !c.flags.context),
            "use_llm=false is only valid for the classifier-only configuration");

    const auto& mt = m.at("train");
    c.train.steps = mt.at("steps").get<std::map<std::string, int>>();
    c.train.lr = mt.at("lr").get<std::map<std::string, double>>();
    c.train.floor_lr = mt.at("floor_lr").get<double>();
    c.train.warmup_frac = mt.at("warmup_frac").get<double>();
    c.train.batch = mt.at("batch").get<int>();
    c.train.optim.weight_decay = mt.at("weight_decay").get<double>();
    c.train.optim.beta1 = mt.at("beta1").get<double>();
    c.train.optim.beta2 = mt.at("beta2").get<double>();
    c.train.optim.eps = mt.at("eps").get<double>();
    c.train.optim.clip_norm = mt.at("clip_norm").get<double>();
    c.train.eval_every = mt.at("eval_every").get<int>();
    c.train.patience = mt.at("patience").get<int>();
    c.train.min_delta = mt.at("min_delta").get<double>();
    c.train.val_subset = mt.at("val_subset").get<int>();
    c.train.max_new = mt.at("max_new").get<int>();
    for (const char* s : {"vl", "lm", "mae", "cls", "align", "finetune"}) {
      require(c.train.steps.count(s) == 1, std::string("train.steps missing stage ") + s);
      require(c.train.lr.count(s) == 1, std::string("train.lr missing stage ") + s);
    }

    c.seeds = m.at("seeds").get<std::vector<std::uint64_t>>();
    require(!c.seeds.empty(), "seed list must be non-empty");
    c.data_dir = m.at("data_dir").get<std::string>();
    c.run_dir = m.at("run_dir").get<std::string>();

    c.data.validate();
    c.model.validate();
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    ordered_json j;
    try {
      j = ordered_json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("config parse error in " + path.string() + ": " + e.what());
    }
    return from_json(std::move(j));
  }

  std::string hash() const { return hex64(fnv1a64(to_json().dump())); }
};

// Applies one `--set key.path=value` override onto a JSON tree. Values parse
// as JSON when possible, otherwise as strings.
inline void apply_override(ordered_json& j, const std::string& assignment) {
  size_t eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0,
          "--set expects key.path=value, got: " + assignment);
  std::string key = assignment.substr(0, eq);
  std::string value = assignment.substr(eq + 1);

  ordered_json parsed;
  try {
    parsed = ordered_json::parse(value);
  } catch (const nlohmann::json::exception&) {
    parsed = value;  // plain string
  }

  ordered_json* node = &j;
  size_t pos = 0;
  while (true) {
    size_t dot = key.find('.', pos);
    std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    require(!part.empty(), "empty key segment in --set " + assignment);
    if (dot == std::string::npos) {
      (*node)[part] = parsed;
      break;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

// Seed precedence: --seed flag > MPOXVLM_SEED > config seeds list.
inline void apply_seed_sources(RunConfig& config, std::optional<std::uint64_t> cli_seed) {
  if (const char* env = std::getenv("MPOXVLM_SEED")) {
    try {
      config.seeds = {static_cast<std::uint64_t>(std::stoull(env))};
    } catch (const std::exception&) {
      throw ValidationError(std::string("MPOXVLM_SEED is not an integer: ") + env);
    }
  }
  if (cli_seed) config.seeds = {*cli_seed};
}

}  // namespace mpoxvlm
