#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mpoxvlm/data_synth.hpp"
#include "mpoxvlm/encoders.hpp"
#include "mpoxvlm/fusion.hpp"
#include "mpoxvlm/metrics.hpp"
#include "mpoxvlm/tokenizer.hpp"

namespace mpoxvlm {

// ---------------------------------------------------------------------------
// Model dimensions (desk scale)
// ---------------------------------------------------------------------------

struct ModelDims {
  int image_target = 32;
  int patch = 8;
  Eigen::Index d_v = 64;
  int enc_depth = 3;
  int enc_heads = 4;
  Eigen::Index d_h = 64;
  int lm_depth = 2;
  int lm_heads = 4;
  Eigen::Index adapter_hidden = 64;
  int mlp_ratio = 4;
  Eigen::Index max_len = 160;
  int lora_rank = 4;
  double lora_alpha = 8.0;
  Eigen::Index contrastive_dim = 64;
  MaeConfig mae;

  int visual_tokens() const {
    return (image_target / patch) * (image_target / patch);
  }

  void validate() const {
    require(image_target > 0 && patch > 0 && image_target % patch == 0,
            "image_target must be divisible by patch");
    require(d_v % enc_heads == 0, "d_v must be divisible by enc_heads");
    require(d_h % lm_heads == 0, "d_h must be divisible by lm_heads");
    require(lora_rank >= 1, "lora_rank must be >= 1");
    mae.validate();
  }
};

// Parameter groups of the bundle; stages freeze and train whole groups.
enum class ParamGroup {
  tokenizer,
  clip,
  vit,
  vit_head,
  mae_decoder,
  vl_head,
  adapter_clip,
  adapter_cls,
  lm,
  lora,
};

inline const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::tokenizer: return "tok";
    case ParamGroup::clip: return "clip";
    case ParamGroup::vit: return "vit";
    case ParamGroup::vit_head: return "vit_head";
    case ParamGroup::mae_decoder: return "maedec";
    case ParamGroup::vl_head: return "vlhead";
    case ParamGroup::adapter_clip: return "w_clip";
    case ParamGroup::adapter_cls: return "w_v";
    case ParamGroup::lm: return "lm";
    default: return "lora";
  }
}

inline const std::vector<ParamGroup>& all_groups() {
  static const std::vector<ParamGroup> groups = {
      ParamGroup::tokenizer,  ParamGroup::clip,         ParamGroup::vit,
      ParamGroup::vit_head,   ParamGroup::mae_decoder,  ParamGroup::vl_head,
      ParamGroup::adapter_clip, ParamGroup::adapter_cls, ParamGroup::lm,
      ParamGroup::lora};
  return groups;
}

// ---------------------------------------------------------------------------
// ModelBundle: one complete parameter set
// ---------------------------------------------------------------------------

struct ModelBundle {
  ModelDims dims;
  Tokenizer text_tok;
  PatchTokenizer tok;
  VlEncoder clip;
  VitClassifier vit;
  MaeDecoder mae_dec;
  VlContrastiveHead vl_head;
  AdapterMlp adapter_clip;
  AdapterMlp adapter_cls;
  DecoderLm lm;
  LmLora lora;

  static ModelBundle init(const ModelDims& dims, const Tokenizer& text_tok,
                          std::uint64_t seed) {
    dims.validate();
    ModelBundle b;
    b.dims = dims;
    b.text_tok = text_tok;
    Rng r_tok(derive_seed(seed, "init-tok"));
    b.tok.init(r_tok, dims.patch, dims.image_target, dims.d_v);
    Rng r_clip(derive_seed(seed, "init-clip"));
    b.clip.init(r_clip, dims.d_v, dims.enc_depth, dims.enc_heads);
    Rng r_vit(derive_seed(seed, "init-vit"));
    b.vit.init(r_vit, dims.d_v, dims.enc_depth, dims.enc_heads);
    Rng r_mae(derive_seed(seed, "init-maedec"));
    b.mae_dec.init(r_mae, dims.mae, dims.d_v, b.tok.tokens(), dims.patch, dims.enc_heads);
    Rng r_head(derive_seed(seed, "init-vlhead"));
    b.vl_head.init(r_head, dims.d_v, dims.contrastive_dim, text_tok.vocab_size());
    Rng r_wc(derive_seed(seed, "init-wclip"));
    b.adapter_clip.init(r_wc, dims.d_v, dims.adapter_hidden, dims.d_h);
    Rng r_wv(derive_seed(seed, "init-wv"));
    b.adapter_cls.init(r_wv, dims.d_v, dims.adapter_hidden, dims.d_h);
    Rng r_lm(derive_seed(seed, "init-lm"));
    b.lm.init(r_lm, text_tok.vocab_size(), dims.d_h, dims.lm_depth, dims.lm_heads,
              dims.max_len);
    Rng r_lora(derive_seed(seed, "init-lora"));
    b.lora.init(r_lora, b.lm, dims.lora_rank, dims.lora_alpha);
    return b;
  }

  std::vector<ParamView> group_views(ParamGroup g) {
    std::vector<ParamView> out;
    std::string p = group_name(g);
    switch (g) {
      case ParamGroup::tokenizer: tok.collect(p, out); break;
      case ParamGroup::clip: clip.collect(p, out); break;
      case ParamGroup::vit: vit.collect(p, out); break;
      case ParamGroup::vit_head: vit.collect_head(p, out); break;
      case ParamGroup::mae_decoder: mae_dec.collect(p, out); break;
      case ParamGroup::vl_head: vl_head.collect(p, out); break;
      case ParamGroup::adapter_clip: adapter_clip.collect(p, out); break;
      case ParamGroup::adapter_cls: adapter_cls.collect(p, out); break;
      case ParamGroup::lm: lm.collect(p, out); break;
      case ParamGroup::lora: lora.collect(p, out); break;
    }
    return out;
  }

  std::vector<ParamView> all_views() {
    std::vector<ParamView> out;
    for (ParamGroup g : all_groups()) {
      auto views = group_views(g);
      out.insert(out.end(), views.begin(), views.end());
    }
    return out;
  }

  std::string group_bytes(ParamGroup g) {
    return serialize_views(group_views(g));
  }
};

// ---------------------------------------------------------------------------
// Frozen-feature cache used by stages that never touch encoder weights
// ---------------------------------------------------------------------------

struct SampleFeatures {
  Mat clip_features;  // (k, d_v)
  Vec cls_feature;    // (d_v)
};

struct FeatureCache {
  std::vector<SampleFeatures> per_record;
};

inline Image preprocessed_image(const ModelBundle& bundle, const DatasetManifest& manifest,
                                const SampleRecord& rec, const std::filesystem::path& dir) {
  Image raw = load_sample_image(manifest, rec, dir);
  return preprocess(raw, bundle.dims.image_target);
}

inline FeatureCache build_feature_cache(const ModelBundle& bundle,
                                        const DatasetManifest& manifest,
                                        const std::filesystem::path& dir) {
  FeatureCache cache;
  cache.per_record.resize(manifest.records.size());
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    Image img = preprocessed_image(bundle, manifest, manifest.records[i], dir);
    Mat tokens = bundle.tok.tokenize(img);
    cache.per_record[i].clip_features = encode_vl(bundle.clip, tokens);
    cache.per_record[i].cls_feature = encode_classifier(bundle.vit, tokens).cls_feature;
  }
  return cache;
}

// ---------------------------------------------------------------------------
// QA forward (adapters + assembly) on frozen features
// ---------------------------------------------------------------------------

struct QaForward {
  AdapterCache clip_cache, cls_cache;
  AssembledSequence seq;
  Eigen::Index z_clip_cols = 0;
};

inline QaForward qa_forward(const ModelBundle& bundle, const SampleFeatures& feats,
                            const VqaInstance& vqa, IncludeFlags flags,
                            bool include_answer) {
  QaForward f;
  Mat z_clip, z_v;
  if (flags.clip_tokens) {
    z_clip = project_clip(bundle.adapter_clip, feats.clip_features, f.clip_cache);
    f.z_clip_cols = z_clip.cols();
  }
  if (flags.cls_token) z_v = project_cls(bundle.adapter_cls, feats.cls_feature, f.cls_cache);
  f.seq = assemble_sequence(z_clip, z_v, vqa, bundle.text_tok, bundle.lm.token_embed,
                            flags, include_answer);
  return f;
}

// Loss + gradients for the align/finetune objective on one sample. Adapter
// and LoRA grads accumulate; encoder weights are frozen by stage design.
inline double qa_loss_backward(const ModelBundle& bundle, const QaForward& f,
                               IncludeFlags flags, AdapterGrad* g_clip, AdapterGrad* g_cls,
                               LmGrad* g_lm, LmLoraGrad* g_lora) {
  NllResult r = answer_nll(bundle.lm, &bundle.lora, f.seq, /*backward=*/true, g_lm, g_lora);
  Eigen::Index pos = 0;
  if (flags.clip_tokens) {
    Mat dz = r.dembed.middleRows(0, f.z_clip_cols);  // rows = projected tokens
    if (g_clip) g_clip->backward(bundle.adapter_clip, f.clip_cache, dz);
    pos += f.z_clip_cols;
  }
  if (flags.cls_token) {
    Mat dz = r.dembed.middleRows(pos, 1);
    if (g_cls) g_cls->backward(bundle.adapter_cls, f.cls_cache, dz);
  }
  return r.loss;
}

inline double qa_loss(const ModelBundle& bundle, const SampleFeatures& feats,
                      const VqaInstance& vqa, IncludeFlags flags) {
  QaForward f = qa_forward(bundle, feats, vqa, flags, /*include_answer=*/true);
  return answer_nll(bundle.lm, &bundle.lora, f.seq).loss;
}

// ---------------------------------------------------------------------------
// Contrastive (vl) batch step
// ---------------------------------------------------------------------------

struct VlBatchGrads {
  PatchTokenizerGrad tok;
  BlockStackGrad clip;
  VlContrastiveHeadGrad head;

  void zero_like(const ModelBundle& b) {
    tok.zero_like(b.tok);
    clip.zero_like(b.clip.stack);
    head.zero_like(b.vl_head);
  }
};

// Symmetric InfoNCE over one batch of (image, caption) pairs.
inline double vl_contrastive_step(const ModelBundle& bundle,
                                  const std::vector<Image>& images,
                                  const std::vector<std::string>& captions,
                                  VlBatchGrads* grads) {
  size_t n = images.size();
  require(n >= 2 && captions.size() == n, "contrastive batch needs >= 2 pairs");
  Eigen::Index d_e = bundle.vl_head.img_proj.w.cols();

  struct PerSample {
    Mat patches, tokens;
    BlockStackCache enc_cache;
    Mat feats;
    Vec pooled, proj;
    std::vector<int> txt_ids;
    Vec txt_sum;
  };
  std::vector<PerSample> ps(n);
  Mat img_emb(static_cast<Eigen::Index>(n), d_e), txt_emb(static_cast<Eigen::Index>(n), d_e);

  for (size_t i = 0; i < n; ++i) {
    auto& s = ps[i];
    s.patches = bundle.tok.extract_patches(images[i]);
    s.tokens = bundle.tok.proj.forward(s.patches) + bundle.tok.pos;
    s.feats = stack_forward(bundle.clip.stack, s.tokens, false, s.enc_cache);
    s.pooled = s.feats.colwise().mean().transpose();
    s.proj = bundle.vl_head.img_proj.forward(s.pooled.transpose()).transpose();
    img_emb.row(static_cast<Eigen::Index>(i)) = l2_normalize(s.proj).transpose();

    s.txt_ids = bundle.text_tok.encode(captions[i]);
    require(!s.txt_ids.empty(), "empty caption");
    s.txt_sum = Vec::Zero(d_e);
    for (int id : s.txt_ids) s.txt_sum += bundle.vl_head.txt_embed.row(id).transpose();
    s.txt_sum /= static_cast<double>(s.txt_ids.size());
    txt_emb.row(static_cast<Eigen::Index>(i)) = l2_normalize(s.txt_sum).transpose();
  }

  double inv_t = 1.0 / bundle.vl_head.temperature;
  Mat logits = img_emb * txt_emb.transpose() * inv_t;

  Mat probs_r = logits;
  softmax_rows(probs_r);
  Mat probs_c = logits.transpose();
  softmax_rows(probs_c);

  double loss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    auto ii = static_cast<Eigen::Index>(i);
    loss -= 0.5 * (std::log(probs_r(ii, ii)) + std::log(probs_c(ii, ii)));
  }
  loss /= static_cast<double>(n);

  if (!grads) return loss;

  Mat dlogits = probs_r;
  for (size_t i = 0; i < n; ++i) dlogits(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) -= 1.0;
  Mat dlogits_c = probs_c;
  for (size_t i = 0; i < n; ++i) dlogits_c(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) -= 1.0;
  dlogits = 0.5 / static_cast<double>(n) * (dlogits + dlogits_c.transpose());

  Mat dimg = dlogits * txt_emb * inv_t;
  Mat dtxt = dlogits.transpose() * img_emb * inv_t;

  for (size_t i = 0; i < n; ++i) {
    auto& s = ps[i];
    auto ii = static_cast<Eigen::Index>(i);
    Vec dproj = l2_normalize_backward(s.proj, dimg.row(ii).transpose());
    Mat dpooled = grads->head.img_proj.backward(bundle.vl_head.img_proj,
                                                s.pooled.transpose(), dproj.transpose());
    Mat dfeats = Mat::Zero(s.feats.rows(), s.feats.cols());
    dfeats.rowwise() += dpooled.row(0) / static_cast<double>(s.feats.rows());
    Mat dtokens = grads->clip.backward(bundle.clip.stack, s.enc_cache, dfeats);
    grads->tok.backward(bundle.tok, s.patches, dtokens);

    Vec dsum = l2_normalize_backward(s.txt_sum, dtxt.row(ii).transpose());
    dsum /= static_cast<double>(s.txt_ids.size());
    for (int id : s.txt_ids) grads->head.txt_embed.row(id) += dsum.transpose();
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Supervised classifier step (binary cross-entropy on the CLS state)
// ---------------------------------------------------------------------------

inline double classifier_step(const ModelBundle& bundle, const Image& img, bool label,
                              VitClassifierGrad* grads) {
  Mat tokens = bundle.tok.tokenize(img);
  ClassifierStates st = encode_classifier(bundle.vit, tokens);
  Eigen::Vector2d logits = classify_head(bundle.vit, st.cls_feature);

  double m = logits.maxCoeff();
  Eigen::Vector2d p = (logits.array() - m).exp();
  p /= p.sum();
  int target = label ? 1 : 0;
  double loss = -std::log(p(target));

  if (!grads) return loss;
  Eigen::Vector2d dlogits = p;
  dlogits(target) -= 1.0;
  Mat dcls_row = grads->head.backward(bundle.vit.head, st.cls_feature.transpose(),
                                      dlogits.transpose());
  Mat dpatches = Mat::Zero(st.patch_features.rows(), st.patch_features.cols());
  grads->backward(bundle.vit, st, dcls_row.row(0).transpose(), dpatches);
  return loss;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalOutcome {
  PredictionSet preds;
  std::int64_t score_answer_disagreements = 0;
};

inline IncludeFlags flags_from(bool use_clip, bool use_cls, bool use_text) {
  IncludeFlags f;
  f.clip_tokens = use_clip;
  f.cls_token = use_cls;
  f.context = use_text;
  return f;
}

// Classifier-only predictions: head score, argmax prediction, no LM involved.
inline EvalOutcome evaluate_classifier_only(const ModelBundle& bundle,
                                            const DatasetManifest& manifest,
                                            const FeatureCache& feats, Split split) {
  EvalOutcome out;
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& rec = manifest.records[i];
    if (rec.split != split) continue;
    Eigen::Vector2d logits = classify_head(bundle.vit, feats.per_record[i].cls_feature);
    Prediction p;
    p.id = static_cast<std::int64_t>(i);
    p.label = rec.vqa.label;
    p.predicted = classifier_predict(logits);
    p.score = classifier_score(logits);
    out.preds.items.push_back(p);
  }
  return out;
}

// VLM predictions: greedy answer string for the label, option-likelihood
// softmax for the score. Disagreements between the two rules are counted.
inline EvalOutcome evaluate_vlm(const ModelBundle& bundle, const DatasetManifest& manifest,
                                const FeatureCache& feats, Split split, IncludeFlags flags,
                                int max_new) {
  EvalOutcome out;
  for (size_t i = 0; i < manifest.records.size(); ++i) {
    const auto& rec = manifest.records[i];
    if (rec.split != split) continue;
    QaForward f = qa_forward(bundle, feats.per_record[i], rec.vqa, flags,
                             /*include_answer=*/false);
    double score = mpox_score(bundle.lm, &bundle.lora, f.seq, bundle.text_tok, rec.vqa);
    std::string answer =
        generate_answer(bundle.lm, &bundle.lora, f.seq, bundle.text_tok, max_new);
    bool predicted = answer == rec.vqa.options[0];
    bool score_pred = score > 0.5;
    if (predicted != score_pred) ++out.score_answer_disagreements;

    Prediction p;
    p.id = static_cast<std::int64_t>(i);
    p.label = rec.vqa.label;
    p.predicted = predicted;
    p.score = score;
    out.preds.items.push_back(p);
  }
  return out;
}

}  // namespace mpoxvlm
