#pragma once

#include <vector>

#include "mpoxvlm/common.hpp"
#include "mpoxvlm/image.hpp"
#include "mpoxvlm/nn.hpp"

namespace mpoxvlm {

// ---------------------------------------------------------------------------
// Patch tokenizer. One set of weights, shared by both encoders: the
// classifier path reuses the visual-language tokenizer frozen.
// ---------------------------------------------------------------------------

struct PatchTokenizer {
  int patch_size = 8;
  int image_size = 32;
  Linear proj;  // (3*p*p, d_v)
  Mat pos;      // (k, d_v)

  int tokens() const { return (image_size / patch_size) * (image_size / patch_size); }
  Eigen::Index dim() const { return proj.w.cols(); }

  void init(Rng& rng, int patch, int img_size, Eigen::Index d_v) {
    require(patch > 0 && img_size > 0, "patch and image size must be positive");
    require(img_size % patch == 0, "image size " + std::to_string(img_size) +
                                       " not divisible by patch size " + std::to_string(patch));
    patch_size = patch;
    image_size = img_size;
    proj.init(rng, 3 * patch * patch, d_v);
    pos = Mat::NullaryExpr(tokens(), d_v, [&]() { return rng.normal(0.0, 0.02); });
  }

  // Row-major patch scan; row i of the result is patch i flattened (y, x, c).
  Mat extract_patches(const Image& img) const {
    require(img.height == image_size && img.width == image_size,
            "image size " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                " does not match tokenizer size " + std::to_string(image_size));
    int n = image_size / patch_size;
    Mat patches(n * n, 3 * patch_size * patch_size);
    for (int py = 0; py < n; ++py) {
      for (int px = 0; px < n; ++px) {
        Eigen::Index row = py * n + px;
        Eigen::Index col = 0;
        for (int y = 0; y < patch_size; ++y)
          for (int x = 0; x < patch_size; ++x)
            for (int c = 0; c < 3; ++c)
              patches(row, col++) = img.at(py * patch_size + y, px * patch_size + x, c);
      }
    }
    return patches;
  }

  Mat tokenize(const Image& img, bool add_pos = true) const {
    Mat t = proj.forward(extract_patches(img));
    if (add_pos) t += pos;
    return t;
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    proj.collect(prefix + ".proj", out);
    add_view(out, prefix + ".pos", pos);
  }
};

struct PatchTokenizerGrad {
  LinearGrad proj;
  Mat pos;

  void zero_like(const PatchTokenizer& p) {
    proj.zero_like(p.proj);
    pos = Mat::Zero(p.pos.rows(), p.pos.cols());
  }

  void backward(const PatchTokenizer& p, const Mat& patches, const Mat& dtokens) {
    pos += dtokens;
    proj.backward(p.proj, patches, dtokens);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    proj.collect(prefix + ".proj", out);
    add_view(out, prefix + ".pos", pos);
  }
};

// ---------------------------------------------------------------------------
// Visual-language encoder f_CLIP: bidirectional blocks over the k patch
// tokens. Frozen after its contrastive pretraining stage.
// ---------------------------------------------------------------------------

struct VlEncoder {
  BlockStack stack;

  void init(Rng& rng, Eigen::Index d_v, int depth, int heads) {
    stack.init(rng, d_v, depth, heads);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    stack.collect(prefix, out);
  }
};

inline Mat encode_vl(const VlEncoder& p, const Mat& tokens, BlockStackCache& cache) {
  return stack_forward(p.stack, tokens, /*causal=*/false, cache);
}

inline Mat encode_vl(const VlEncoder& p, const Mat& tokens) {
  BlockStackCache cache;
  return encode_vl(p, tokens, cache);
}

// ---------------------------------------------------------------------------
// ViT classifier f_V: CLS token + patch tokens, bidirectional blocks, and a
// binary head on the final-layer CLS state.
// ---------------------------------------------------------------------------

struct VitClassifier {
  Vec cls_token, cls_pos;
  BlockStack stack;
  Linear head;  // (d_v, 2); logit 0 = non-mpox, logit 1 = mpox

  void init(Rng& rng, Eigen::Index d_v, int depth, int heads) {
    cls_token = Vec::NullaryExpr(d_v, [&]() { return rng.normal(0.0, 0.02); });
    cls_pos = Vec::NullaryExpr(d_v, [&]() { return rng.normal(0.0, 0.02); });
    stack.init(rng, d_v, depth, heads);
    head.init(rng, d_v, 2);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    add_view(out, prefix + ".cls_token", cls_token);
    add_view(out, prefix + ".cls_pos", cls_pos);
    stack.collect(prefix, out);
  }

  void collect_head(const std::string& prefix, std::vector<ParamView>& out) {
    head.collect(prefix, out);
  }
};

struct ClassifierStates {
  Vec cls_feature;     // (d_v)
  Mat patch_features;  // (k, d_v)
  BlockStackCache cache;
};

inline ClassifierStates encode_classifier(const VitClassifier& p, const Mat& tokens) {
  require(tokens.cols() == p.cls_token.size(), "token width does not match classifier width");
  Mat with_cls(tokens.rows() + 1, tokens.cols());
  with_cls.row(0) = (p.cls_token + p.cls_pos).transpose();
  with_cls.bottomRows(tokens.rows()) = tokens;
  ClassifierStates out;
  Mat enc = stack_forward(p.stack, with_cls, /*causal=*/false, out.cache);
  out.cls_feature = enc.row(0).transpose();
  out.patch_features = enc.bottomRows(tokens.rows());
  return out;
}

inline Eigen::Vector2d classify_head(const VitClassifier& p, const Vec& cls_feature) {
  require(cls_feature.size() == p.head.w.rows(), "cls feature width mismatch");
  return (cls_feature.transpose() * p.head.w).transpose() + p.head.b;
}

// Mpox probability from the binary head; ties in argmax resolve to non-mpox.
inline double classifier_score(const Eigen::Vector2d& logits) {
  double m = logits.maxCoeff();
  double e0 = std::exp(logits(0) - m), e1 = std::exp(logits(1) - m);
  return e1 / (e0 + e1);
}

inline bool classifier_predict(const Eigen::Vector2d& logits) {
  return logits(1) > logits(0);
}

struct VitClassifierGrad {
  Vec cls_token, cls_pos;
  BlockStackGrad stack;
  LinearGrad head;

  void zero_like(const VitClassifier& p) {
    cls_token = Vec::Zero(p.cls_token.size());
    cls_pos = Vec::Zero(p.cls_pos.size());
    stack.zero_like(p.stack);
    head.zero_like(p.head);
  }

  // dcls/dpatches flow back through the stack; returns grad w.r.t. the
  // (positioned) patch tokens.
  Mat backward(const VitClassifier& p, const ClassifierStates& st, const Vec& dcls,
               const Mat& dpatches) {
    Mat denc(dpatches.rows() + 1, dpatches.cols());
    denc.row(0) = dcls.transpose();
    denc.bottomRows(dpatches.rows()) = dpatches;
    Mat din = stack.backward(p.stack, st.cache, denc);
    cls_token += din.row(0).transpose();
    cls_pos += din.row(0).transpose();
    return din.bottomRows(dpatches.rows());
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    add_view(out, prefix + ".cls_token", cls_token);
    add_view(out, prefix + ".cls_pos", cls_pos);
    stack.collect(prefix, out);
  }

  void collect_head(const std::string& prefix, std::vector<ParamView>& out) {
    head.collect(prefix, out);
  }
};

// ---------------------------------------------------------------------------
// Masked autoencoder pretraining of the classifier encoder
// ---------------------------------------------------------------------------

struct MaeConfig {
  double mask_ratio = 0.75;
  int decoder_depth = 2;
  Eigen::Index decoder_dim = 64;

  void validate() const {
    require(mask_ratio >= 0.0 && mask_ratio < 1.0, "mask_ratio must be in [0,1)");
    require(decoder_depth >= 0 && decoder_dim > 0, "invalid MAE decoder config");
  }
};

struct MaeDecoder {
  Linear enc2dec;  // (d_v, d_dec)
  Vec mask_token;  // (d_dec)
  Mat dec_pos;     // (k, d_dec)
  BlockStack stack;
  Linear pixel_head;  // (d_dec, 3*p*p)

  void init(Rng& rng, const MaeConfig& cfg, Eigen::Index d_v, int k, int patch, int heads) {
    cfg.validate();
    enc2dec.init(rng, d_v, cfg.decoder_dim);
    mask_token = Vec::NullaryExpr(cfg.decoder_dim, [&]() { return rng.normal(0.0, 0.02); });
    dec_pos = Mat::NullaryExpr(k, cfg.decoder_dim, [&]() { return rng.normal(0.0, 0.02); });
    stack.init(rng, cfg.decoder_dim, cfg.decoder_depth, heads);
    pixel_head.init(rng, cfg.decoder_dim, 3 * patch * patch);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    enc2dec.collect(prefix + ".enc2dec", out);
    add_view(out, prefix + ".mask_token", mask_token);
    add_view(out, prefix + ".dec_pos", dec_pos);
    stack.collect(prefix + ".dec", out);
    pixel_head.collect(prefix + ".pixel_head", out);
  }
};

struct MaeDecoderGrad {
  LinearGrad enc2dec;
  Vec mask_token;
  Mat dec_pos;
  BlockStackGrad stack;
  LinearGrad pixel_head;

  void zero_like(const MaeDecoder& p) {
    enc2dec.zero_like(p.enc2dec);
    mask_token = Vec::Zero(p.mask_token.size());
    dec_pos = Mat::Zero(p.dec_pos.rows(), p.dec_pos.cols());
    stack.zero_like(p.stack);
    pixel_head.zero_like(p.pixel_head);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    enc2dec.collect(prefix + ".enc2dec", out);
    add_view(out, prefix + ".mask_token", mask_token);
    add_view(out, prefix + ".dec_pos", dec_pos);
    stack.collect(prefix + ".dec", out);
    pixel_head.collect(prefix + ".pixel_head", out);
  }
};

// Mean squared pixel error over masked patch rows only; reconstructions at
// visible positions never enter the loss.
inline double masked_mse(const Mat& pred, const Mat& pixels, const std::vector<int>& masked) {
  if (masked.empty()) return 0.0;
  double denom = static_cast<double>(masked.size()) * static_cast<double>(pixels.cols());
  double loss = 0.0;
  for (int j : masked) loss += (pred.row(j) - pixels.row(j)).squaredNorm();
  return loss / denom;
}

// Masked-patch index set: round(mask_ratio * k) indices without replacement.
inline std::vector<int> sample_mask(int k, double mask_ratio, Rng& rng) {
  require(mask_ratio >= 0.0 && mask_ratio < 1.0, "mask_ratio must be in [0,1)");
  int m = static_cast<int>(std::lround(mask_ratio * k));
  std::vector<int> idx(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) idx[static_cast<size_t>(i)] = i;
  rng.shuffle(idx);
  idx.resize(static_cast<size_t>(m));
  std::sort(idx.begin(), idx.end());
  return idx;
}

// One MAE forward/backward on one image. Loss is the mean squared pixel
// error over masked patches only (0 when the mask is empty); gradients
// accumulate into the encoder and decoder grads. The patch tokenizer is a
// frozen input here.
inline double mae_step(const PatchTokenizer& tok, const VitClassifier& vit,
                       const MaeDecoder& dec, const Image& img,
                       const std::vector<int>& masked, VitClassifierGrad* vit_grad,
                       MaeDecoderGrad* dec_grad) {
  int k = tok.tokens();
  Mat pixels = tok.extract_patches(img);
  Mat tokens = tok.proj.forward(pixels) + tok.pos;

  std::vector<char> is_masked(static_cast<size_t>(k), 0);
  for (int j : masked) is_masked[static_cast<size_t>(j)] = 1;
  std::vector<int> visible;
  for (int j = 0; j < k; ++j)
    if (!is_masked[static_cast<size_t>(j)]) visible.push_back(j);
  require(!visible.empty() || !vit.stack.blocks.empty() || true,
          "unreachable");  // CLS keeps encoder input non-empty

  // Encode CLS + visible tokens.
  Mat enc_in(1 + static_cast<Eigen::Index>(visible.size()), tok.dim());
  enc_in.row(0) = (vit.cls_token + vit.cls_pos).transpose();
  for (size_t i = 0; i < visible.size(); ++i)
    enc_in.row(1 + static_cast<Eigen::Index>(i)) = tokens.row(visible[i]);
  BlockStackCache enc_cache;
  Mat enc_out = stack_forward(vit.stack, enc_in, /*causal=*/false, enc_cache);

  // Decode the full patch grid: encoded states at visible slots, the shared
  // mask token at masked slots, plus decoder positions.
  Mat dec_in(k, dec.mask_token.size());
  for (int j = 0; j < k; ++j) dec_in.row(j) = dec.mask_token.transpose();
  Mat visible_enc(static_cast<Eigen::Index>(visible.size()), tok.dim());
  for (size_t i = 0; i < visible.size(); ++i)
    visible_enc.row(static_cast<Eigen::Index>(i)) = enc_out.row(1 + static_cast<Eigen::Index>(i));
  Mat visible_dec = dec.enc2dec.forward(visible_enc);
  for (size_t i = 0; i < visible.size(); ++i)
    dec_in.row(visible[i]) = visible_dec.row(static_cast<Eigen::Index>(i));
  dec_in += dec.dec_pos;

  BlockStackCache dec_cache;
  Mat dec_out = stack_forward(dec.stack, dec_in, /*causal=*/false, dec_cache);
  Mat pred = dec.pixel_head.forward(dec_out);

  if (masked.empty()) return 0.0;

  double loss = masked_mse(pred, pixels, masked);
  double denom = static_cast<double>(masked.size()) * static_cast<double>(pixels.cols());
  Mat dpred = Mat::Zero(pred.rows(), pred.cols());
  for (int j : masked) dpred.row(j) = 2.0 * (pred.row(j) - pixels.row(j)) / denom;

  if (!vit_grad || !dec_grad) return loss;

  Mat ddec_out = dec_grad->pixel_head.backward(dec.pixel_head, dec_out, dpred);
  Mat ddec_in = dec_grad->stack.backward(dec.stack, dec_cache, ddec_out);
  dec_grad->dec_pos += ddec_in;

  Mat dvisible_dec(static_cast<Eigen::Index>(visible.size()), dec.mask_token.size());
  for (size_t i = 0; i < visible.size(); ++i) {
    dvisible_dec.row(static_cast<Eigen::Index>(i)) = ddec_in.row(visible[i]);
  }
  for (int j : masked) dec_grad->mask_token += ddec_in.row(j).transpose();

  Mat dvisible_enc = dec_grad->enc2dec.backward(dec.enc2dec, visible_enc, dvisible_dec);
  Mat denc_out = Mat::Zero(enc_out.rows(), enc_out.cols());
  for (size_t i = 0; i < visible.size(); ++i)
    denc_out.row(1 + static_cast<Eigen::Index>(i)) = dvisible_enc.row(static_cast<Eigen::Index>(i));

  Mat denc_in = vit_grad->stack.backward(vit.stack, enc_cache, denc_out);
  vit_grad->cls_token += denc_in.row(0).transpose();
  vit_grad->cls_pos += denc_in.row(0).transpose();
  return loss;
}

// ---------------------------------------------------------------------------
// Contrastive head for the desk-scale CLIP stand-in: pooled image features
// and bag-of-words caption embeddings in one space, symmetric InfoNCE.
// ---------------------------------------------------------------------------

struct VlContrastiveHead {
  Linear img_proj;  // (d_v, d_e)
  Mat txt_embed;    // (vocab, d_e)
  double temperature = 0.07;

  void init(Rng& rng, Eigen::Index d_v, Eigen::Index d_e, int vocab) {
    img_proj.init(rng, d_v, d_e);
    txt_embed = Mat::NullaryExpr(vocab, d_e, [&]() { return rng.normal(0.0, 0.02); });
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    img_proj.collect(prefix + ".img_proj", out);
    add_view(out, prefix + ".txt_embed", txt_embed);
  }
};

struct VlContrastiveHeadGrad {
  LinearGrad img_proj;
  Mat txt_embed;

  void zero_like(const VlContrastiveHead& p) {
    img_proj.zero_like(p.img_proj);
    txt_embed = Mat::Zero(p.txt_embed.rows(), p.txt_embed.cols());
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    img_proj.collect(prefix + ".img_proj", out);
    add_view(out, prefix + ".txt_embed", txt_embed);
  }
};

inline Vec l2_normalize(const Vec& x) {
  double n = x.norm();
  return n > 0.0 ? Vec(x / n) : x;
}

// d/dx of x/||x|| applied to upstream grad.
inline Vec l2_normalize_backward(const Vec& x, const Vec& dy) {
  double n = x.norm();
  if (n == 0.0) return dy;
  Vec xhat = x / n;
  return (dy - xhat * xhat.dot(dy)) / n;
}

}  // namespace mpoxvlm
