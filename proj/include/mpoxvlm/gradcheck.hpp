#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mpoxvlm/fusion.hpp"
#include "mpoxvlm/pipeline.hpp"

namespace mpoxvlm {

// Central finite differences against analytic gradients at 64-bit precision.

struct GradCheckOutcome {
  std::string module;
  double max_rel_err = 0.0;
  double threshold = 1e-4;
  bool pass = false;
};

namespace detail {

// Compares every element of every view: (f(x+h) - f(x-h)) / 2h vs analytic.
inline double max_rel_error(const std::function<double()>& loss,
                            std::vector<ParamView>& params,
                            const std::vector<ParamView>& analytic, double eps) {
  require(eps > 0.0, "finite-difference eps must be positive");
  double worst = 0.0;
  for (size_t vi = 0; vi < params.size(); ++vi) {
    for (Eigen::Index j = 0; j < params[vi].size(); ++j) {
      double& theta = params[vi].data[j];
      double old = theta;
      double h = eps * std::max(1.0, std::abs(old));
      theta = old + h;
      double fp = loss();
      theta = old - h;
      double fm = loss();
      theta = old;
      double fd = (fp - fm) / (2.0 * h);
      double g = analytic[vi].data[j];
      double diff = std::abs(fd - g);
      // Differences below the finite-difference noise floor (cancellation in
      // fp - fm) carry no signal; everything above it is judged relatively.
      if (diff <= 1e-7) continue;
      worst = std::max(worst, diff / std::max(std::abs(fd), std::abs(g)));
    }
  }
  return worst;
}

}  // namespace detail

// One named module check on toy dimensions. `corrupt` perturbs the first
// analytic gradient entry (negative-control fixture).
inline GradCheckOutcome grad_check(const std::string& module_id, double eps,
                                   std::uint64_t seed, bool corrupt = false) {
  require(eps > 0.0, "finite-difference eps must be positive");
  Rng rng(derive_seed(seed, "gradcheck-" + module_id));
  GradCheckOutcome out;
  out.module = module_id;

  auto finish = [&](std::vector<ParamView> params, std::vector<ParamView> analytic,
                    const std::function<double()>& loss, double threshold) {
    if (corrupt && !analytic.empty() && analytic[0].size() > 0) analytic[0].data[0] += 1e-3;
    out.threshold = threshold;
    out.max_rel_err = detail::max_rel_error(loss, params, analytic, eps);
    out.pass = out.max_rel_err < threshold;
    return out;
  };

  if (module_id == "linear") {
    Linear lin;
    lin.init(rng, 3, 2);
    Mat x = Mat::NullaryExpr(4, 3, [&]() { return rng.normal(); });
    LinearGrad grad;
    auto loss = [&]() { return 0.5 * lin.forward(x).squaredNorm(); };
    grad.zero_like(lin);
    Mat y = lin.forward(x);
    grad.backward(lin, x, y);
    std::vector<ParamView> params, analytic;
    lin.collect("lin", params);
    grad.collect("lin", analytic);
    return finish(params, analytic, loss, 1e-8);
  }

  if (module_id == "patch_embed") {
    PatchTokenizer tok;
    tok.init(rng, 2, 4, 6);
    Image img(4, 4);
    for (double& v : img.data) v = rng.uniform();
    PatchTokenizerGrad grad;
    grad.zero_like(tok);
    auto loss = [&]() { return 0.5 * tok.tokenize(img).squaredNorm(); };
    Mat patches = tok.extract_patches(img);
    Mat tokens = tok.tokenize(img);
    grad.backward(tok, patches, tokens);
    std::vector<ParamView> params, analytic;
    tok.collect("tok", params);
    grad.collect("tok", analytic);
    return finish(params, analytic, loss, 1e-8);
  }

  if (module_id == "layernorm") {
    LayerNorm ln;
    ln.init(6);
    Rng r2(derive_seed(seed, "ln-init"));
    for (Eigen::Index i = 0; i < 6; ++i) {
      ln.g(i) = 1.0 + 0.2 * r2.normal();
      ln.b(i) = 0.1 * r2.normal();
    }
    Mat x = Mat::NullaryExpr(4, 6, [&]() { return rng.normal(); });
    Mat r = Mat::NullaryExpr(4, 6, [&]() { return rng.normal(); });
    auto loss = [&]() {
      LayerNormCache c;
      return layernorm_forward(ln, x, c).cwiseProduct(r).sum();
    };
    LayerNormGrad grad;
    grad.zero_like(ln);
    LayerNormCache c;
    layernorm_forward(ln, x, c);
    grad.backward(ln, c, r);
    std::vector<ParamView> params, analytic;
    ln.collect("ln", params);
    grad.collect("ln", analytic);
    return finish(params, analytic, loss, 1e-4);
  }

  if (module_id == "attention") {
    Attention attn;
    attn.init(rng, 8, 2);
    Mat x = Mat::NullaryExpr(5, 8, [&]() { return rng.normal(); });
    Mat r = Mat::NullaryExpr(5, 8, [&]() { return rng.normal(); });
    auto loss = [&]() {
      AttentionCache c;
      return attention_forward(attn, x, true, c).cwiseProduct(r).sum();
    };
    AttentionGrad grad;
    grad.zero_like(attn);
    AttentionCache c;
    attention_forward(attn, x, true, c);
    grad.backward(attn, c, r);
    std::vector<ParamView> params, analytic;
    attn.collect("attn", params);
    grad.collect("attn", analytic);
    return finish(params, analytic, loss, 1e-4);
  }

  if (module_id == "mlp_block") {
    Block block;
    block.init(rng, 8, 2);
    Mat x = Mat::NullaryExpr(5, 8, [&]() { return rng.normal(); });
    Mat r = Mat::NullaryExpr(5, 8, [&]() { return rng.normal(); });
    auto loss = [&]() {
      BlockCache c;
      return block_forward(block, x, false, c).cwiseProduct(r).sum();
    };
    BlockGrad grad;
    grad.zero_like(block);
    BlockCache c;
    block_forward(block, x, false, c);
    grad.backward(block, c, r);
    std::vector<ParamView> params, analytic;
    block.collect("block", params);
    grad.collect("block", analytic);
    return finish(params, analytic, loss, 1e-4);
  }

  if (module_id == "mae_decoder") {
    PatchTokenizer tok;
    tok.init(rng, 2, 4, 8);
    VitClassifier vit;
    vit.init(rng, 8, 1, 2);
    MaeConfig mc;
    mc.mask_ratio = 0.5;
    mc.decoder_depth = 1;
    mc.decoder_dim = 8;
    MaeDecoder dec;
    dec.init(rng, mc, 8, tok.tokens(), 2, 2);
    Image img(4, 4);
    for (double& v : img.data) v = rng.uniform();
    Rng mask_rng(derive_seed(seed, "mask"));
    auto masked = sample_mask(tok.tokens(), mc.mask_ratio, mask_rng);

    auto loss = [&]() {
      return mae_step(tok, vit, dec, img, masked, nullptr, nullptr);
    };
    VitClassifierGrad vg;
    MaeDecoderGrad dg;
    vg.zero_like(vit);
    dg.zero_like(dec);
    mae_step(tok, vit, dec, img, masked, &vg, &dg);
    std::vector<ParamView> params, analytic;
    vit.collect("vit", params);
    dec.collect("dec", params);
    vg.collect("vit", analytic);
    dg.collect("dec", analytic);
    return finish(params, analytic, loss, 1e-4);
  }

  if (module_id == "adapter_clip" || module_id == "adapter_cls") {
    AdapterMlp ad;
    ad.init(rng, 4, 5, 6);
    Mat feats = Mat::NullaryExpr(3, 4, [&]() { return rng.normal(); });
    Vec cls = Vec::NullaryExpr(4, [&]() { return rng.normal(); });
    bool clip = module_id == "adapter_clip";
    auto loss = [&]() {
      AdapterCache c;
      Mat z = clip ? project_clip(ad, feats, c) : project_cls(ad, cls, c);
      return 0.5 * z.squaredNorm();
    };
    AdapterGrad grad;
    grad.zero_like(ad);
    AdapterCache c;
    Mat z = clip ? project_clip(ad, feats, c) : project_cls(ad, cls, c);
    grad.backward(ad, c, z.transpose());
    std::vector<ParamView> params, analytic;
    ad.collect("ad", params);
    grad.collect("ad", analytic);
    return finish(params, analytic, loss, 1e-4);
  }

  if (module_id == "classify_head") {
    VitClassifier vit;
    vit.init(rng, 6, 0, 2);
    Vec cls = Vec::NullaryExpr(6, [&]() { return rng.normal(); });
    auto loss = [&]() {
      Eigen::Vector2d logits = classify_head(vit, cls);
      double m = logits.maxCoeff();
      Eigen::Vector2d p = (logits.array() - m).exp();
      p /= p.sum();
      return -std::log(p(1));
    };
    LinearGrad grad;
    grad.zero_like(vit.head);
    Eigen::Vector2d logits = classify_head(vit, cls);
    double m = logits.maxCoeff();
    Eigen::Vector2d p = (logits.array() - m).exp();
    p /= p.sum();
    Eigen::Vector2d dl = p;
    dl(1) -= 1.0;
    grad.backward(vit.head, cls.transpose(), dl.transpose());
    std::vector<ParamView> params, analytic;
    vit.head.collect("head", params);
    grad.collect("head", analytic);
    return finish(params, analytic, loss, 1e-4);
  }

  if (module_id == "lm_block" || module_id == "full_stack") {
    // A tiny end-to-end fixture: adapters + 1-block LoRA-adapted LM, loss =
    // masked answer NLL on a real assembled instance.
    Tokenizer text_tok = Tokenizer::build_default();
    ModelDims dims;
    dims.image_target = 4;
    dims.patch = 2;
    dims.d_v = 6;
    dims.enc_depth = 1;
    dims.enc_heads = 2;
    dims.d_h = 8;
    dims.lm_depth = 1;
    dims.lm_heads = 2;
    dims.adapter_hidden = 6;
    dims.max_len = 128;
    dims.lora_rank = 2;
    dims.mae.decoder_dim = 6;
    ModelBundle b = ModelBundle::init(dims, text_tok, derive_seed(seed, "bundle"));
    // Non-zero LoRA B so its gradient path is exercised.
    for (auto& lp : b.lora.q)
      lp.b = Mat::NullaryExpr(lp.b.rows(), lp.b.cols(), [&]() { return rng.normal(0, 0.05); });
    for (auto& lp : b.lora.v)
      lp.b = Mat::NullaryExpr(lp.b.rows(), lp.b.cols(), [&]() { return rng.normal(0, 0.05); });

    ClinicalAttributes attrs;
    attrs.patient_id = 1;
    attrs.fitzpatrick = 3;
    attrs.body_part = 7;
    attrs.age_group = AgeGroup::adult;
    attrs.gender = GenderPresentation::female;
    attrs.disease_id = kMpoxDiseaseId;
    attrs.stage = 2;
    VqaInstance vqa = build_vqa(attrs);

    SampleFeatures feats;
    feats.clip_features = Mat::NullaryExpr(4, dims.d_v, [&]() { return rng.normal(); });
    feats.cls_feature = Vec::NullaryExpr(dims.d_v, [&]() { return rng.normal(); });

    IncludeFlags flags;
    auto loss = [&]() {
      QaForward f = qa_forward(b, feats, vqa, flags, true);
      return answer_nll(b.lm, &b.lora, f.seq).loss;
    };
    AdapterGrad g_clip, g_cls;
    LmGrad g_lm;
    LmLoraGrad g_lora;
    g_clip.zero_like(b.adapter_clip);
    g_cls.zero_like(b.adapter_cls);
    g_lm.zero_like(b.lm);
    g_lora.zero_like(b.lora);
    QaForward f = qa_forward(b, feats, vqa, flags, true);
    qa_loss_backward(b, f, flags, &g_clip, &g_cls, &g_lm, &g_lora);

    std::vector<ParamView> params, analytic;
    if (module_id == "lm_block") {
      b.lm.collect("lm", params);
      b.lora.collect("lora", params);
      g_lm.collect("lm", analytic);
      g_lora.collect("lora", analytic);
    } else {
      b.adapter_clip.collect("w_clip", params);
      b.adapter_cls.collect("w_v", params);
      b.lora.collect("lora", params);
      g_clip.collect("w_clip", analytic);
      g_cls.collect("w_v", analytic);
      g_lora.collect("lora", analytic);
    }
    return finish(params, analytic, loss, 1e-4);
  }

  throw ValidationError("unknown gradcheck module: " + module_id);
}

inline const std::vector<std::string>& grad_check_modules() {
  static const std::vector<std::string> mods = {
      "linear",      "patch_embed", "layernorm",   "attention", "mlp_block",
      "mae_decoder", "adapter_clip", "adapter_cls", "classify_head",
      "lm_block",    "full_stack"};
  return mods;
}

inline std::vector<GradCheckOutcome> grad_check_suite(double eps, std::uint64_t seed,
                                                      const std::string& corrupt_module = "") {
  std::vector<GradCheckOutcome> out;
  for (const auto& m : grad_check_modules())
    out.push_back(grad_check(m, eps, seed, m == corrupt_module));
  return out;
}

}  // namespace mpoxvlm
