#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mpoxvlm/common.hpp"
#include "mpoxvlm/data_synth.hpp"
#include "mpoxvlm/nn.hpp"
#include "mpoxvlm/tokenizer.hpp"

namespace mpoxvlm {

// ---------------------------------------------------------------------------
// Projection adapters: one 2-layer MLP per encoder path (SiLU between the
// layers), mapping d_v features into the LM embedding space d_h.
// ---------------------------------------------------------------------------

struct AdapterMlp {
  Linear fc1, fc2;

  void init(Rng& rng, Eigen::Index d_v, Eigen::Index hidden, Eigen::Index d_h) {
    fc1.init(rng, d_v, hidden);
    fc2.init(rng, hidden, d_h);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

struct AdapterCache {
  Mat x, h;  // input and pre-activation hidden
};

// Rows of x are feature vectors; rows of the result are projected tokens.
inline Mat adapter_forward(const AdapterMlp& p, const Mat& x, AdapterCache& cache) {
  cache.x = x;
  cache.h = p.fc1.forward(x);
  Mat act = cache.h.unaryExpr([](double v) { return silu(v); });
  return p.fc2.forward(act);
}

struct AdapterGrad {
  LinearGrad fc1, fc2;

  void zero_like(const AdapterMlp& p) {
    fc1.zero_like(p.fc1);
    fc2.zero_like(p.fc2);
  }

  Mat backward(const AdapterMlp& p, const AdapterCache& cache, const Mat& dy) {
    Mat act = cache.h.unaryExpr([](double v) { return silu(v); });
    Mat dact = fc2.backward(p.fc2, act, dy);
    Mat dh = dact.cwiseProduct(cache.h.unaryExpr([](double v) { return silu_grad(v); }));
    return fc1.backward(p.fc1, cache.x, dh);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

// Z_CLIP = W_CLIP(features): features arrive as (k, d_v), output is (d_h, k).
inline Mat project_clip(const AdapterMlp& p, const Mat& features, AdapterCache& cache) {
  require(features.cols() == p.fc1.w.rows(),
          "feature width " + std::to_string(features.cols()) +
              " does not match adapter input " + std::to_string(p.fc1.w.rows()));
  return adapter_forward(p, features, cache).transpose();
}

inline Mat project_clip(const AdapterMlp& p, const Mat& features) {
  AdapterCache cache;
  return project_clip(p, features, cache);
}

// Z_V = W_V(cls_feature): (d_v) vector in, (d_h, 1) out.
inline Mat project_cls(const AdapterMlp& p, const Vec& cls_feature, AdapterCache& cache) {
  require(cls_feature.size() == p.fc1.w.rows(), "cls feature width mismatch");
  return adapter_forward(p, cls_feature.transpose(), cache).transpose();
}

inline Mat project_cls(const AdapterMlp& p, const Vec& cls_feature) {
  AdapterCache cache;
  return project_cls(p, cls_feature, cache);
}

// ---------------------------------------------------------------------------
// Assembled multimodal sequence
// ---------------------------------------------------------------------------

enum class Segment : std::uint8_t { z_clip, z_v, x_c, x_q, x_o, y };

inline const char* segment_name(Segment s) {
  switch (s) {
    case Segment::z_clip: return "Z_CLIP";
    case Segment::z_v: return "Z_V";
    case Segment::x_c: return "X_c";
    case Segment::x_q: return "X_q";
    case Segment::x_o: return "X_o";
    default: return "Y";
  }
}

struct IncludeFlags {
  bool clip_tokens = true;
  bool cls_token = true;
  bool context = true;
};

struct AssembledSequence {
  Mat embed;                  // (L, d_h)
  std::vector<Segment> segments;
  std::vector<int> token_ids;    // -1 at visual positions
  std::vector<bool> loss_mask;   // true at answer tokens + final EOS

  Eigen::Index length() const { return embed.rows(); }

  std::int64_t mask_count() const {
    std::int64_t n = 0;
    for (bool b : loss_mask) n += b ? 1 : 0;
    return n;
  }
};

// Concatenates (Z_CLIP ⊕ Z_V), X_c, X_q, X_o, Y in that order. BOS precedes
// the first textual segment, SEP terminates each non-answer textual segment,
// EOS terminates the answer and carries the Y label. Flags drop Z_V, Z_CLIP
// or X_c for the ablation rows.
inline AssembledSequence assemble_sequence(const Mat& z_clip, const Mat& z_v,
                                           const VqaInstance& instance,
                                           const Tokenizer& tokenizer,
                                           const Mat& token_embed,
                                           IncludeFlags flags = {},
                                           bool include_answer = true) {
  require(!instance.options[0].empty() && !instance.options[1].empty(),
          "instance has empty options");
  Eigen::Index d_h = token_embed.cols();
  if (flags.clip_tokens) require(z_clip.rows() == d_h, "Z_CLIP must be (d_h, k)");
  if (flags.cls_token)
    require(z_v.rows() == d_h && z_v.cols() == 1, "Z_V must be (d_h, 1)");

  struct TextSeg {
    Segment seg;
    std::vector<int> ids;
    bool terminator_sep;  // SEP for context/question/options, EOS for answer
  };
  std::vector<TextSeg> text;
  if (flags.context)
    text.push_back({Segment::x_c, tokenizer.encode(instance.context_text), true});
  text.push_back({Segment::x_q, tokenizer.encode(instance.question_text), true});
  text.push_back({Segment::x_o,
                  tokenizer.encode(render_options_text(instance.options[0], instance.options[1])),
                  true});
  if (include_answer)
    text.push_back({Segment::y, tokenizer.encode(instance.answer), false});

  Eigen::Index n_visual = (flags.clip_tokens ? z_clip.cols() : 0) + (flags.cls_token ? 1 : 0);
  Eigen::Index n_text = 1;  // BOS
  for (const auto& t : text) n_text += static_cast<Eigen::Index>(t.ids.size()) + 1;

  AssembledSequence seq;
  seq.embed.resize(n_visual + n_text, d_h);
  seq.segments.reserve(static_cast<size_t>(n_visual + n_text));
  seq.token_ids.reserve(static_cast<size_t>(n_visual + n_text));
  seq.loss_mask.assign(static_cast<size_t>(n_visual + n_text), false);

  Eigen::Index pos = 0;
  if (flags.clip_tokens) {
    for (Eigen::Index i = 0; i < z_clip.cols(); ++i) {
      seq.embed.row(pos) = z_clip.col(i).transpose();
      seq.segments.push_back(Segment::z_clip);
      seq.token_ids.push_back(-1);
      ++pos;
    }
  }
  if (flags.cls_token) {
    seq.embed.row(pos) = z_v.col(0).transpose();
    seq.segments.push_back(Segment::z_v);
    seq.token_ids.push_back(-1);
    ++pos;
  }

  auto put_token = [&](int id, Segment seg, bool masked) {
    require(id >= 0 && id < token_embed.rows(), "token id outside embedding table");
    seq.embed.row(pos) = token_embed.row(id);
    seq.segments.push_back(seg);
    seq.token_ids.push_back(id);
    seq.loss_mask[static_cast<size_t>(pos)] = masked;
    ++pos;
  };

  put_token(Tokenizer::kBos, text.front().seg, false);
  for (const auto& t : text) {
    bool is_answer = t.seg == Segment::y;
    for (int id : t.ids) put_token(id, t.seg, is_answer);
    if (t.terminator_sep) {
      put_token(Tokenizer::kSep, t.seg, false);
    } else {
      put_token(Tokenizer::kEos, Segment::y, true);
    }
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Decoder-only language model
// ---------------------------------------------------------------------------

struct DecoderLm {
  Mat token_embed;  // (V, d_h)
  Mat pos_embed;    // (max_len, d_h)
  BlockStack stack;
  Linear out_proj;  // (d_h, V), untied

  Eigen::Index vocab() const { return token_embed.rows(); }
  Eigen::Index width() const { return token_embed.cols(); }
  Eigen::Index max_len() const { return pos_embed.rows(); }

  void init(Rng& rng, int vocab_size, Eigen::Index d_h, int depth, int heads,
            Eigen::Index max_length) {
    token_embed = Mat::NullaryExpr(vocab_size, d_h, [&]() { return rng.normal(0.0, 0.02); });
    pos_embed = Mat::NullaryExpr(max_length, d_h, [&]() { return rng.normal(0.0, 0.02); });
    stack.init(rng, d_h, depth, heads);
    out_proj.init(rng, d_h, vocab_size);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    add_view(out, prefix + ".token_embed", token_embed);
    add_view(out, prefix + ".pos_embed", pos_embed);
    stack.collect(prefix, out);
    out_proj.collect(prefix + ".out_proj", out);
  }
};

// LoRA adapters for the LM attention query/value projections, one pair per block.
struct LmLora {
  std::vector<LoraPair> q, v;
  bool merged = false;

  void init(Rng& rng, const DecoderLm& lm, int rank, double alpha) {
    require(rank >= 1, "LoRA rank must be >= 1");
    Eigen::Index d = lm.width();
    q.resize(lm.stack.blocks.size());
    v.resize(lm.stack.blocks.size());
    for (size_t i = 0; i < q.size(); ++i) {
      q[i].init(rng, d, d, rank, alpha);
      v[i].init(rng, d, d, rank, alpha);
    }
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    for (size_t i = 0; i < q.size(); ++i) {
      q[i].collect(prefix + ".block" + std::to_string(i) + ".q", out);
      v[i].collect(prefix + ".block" + std::to_string(i) + ".v", out);
    }
  }
};

struct LmLoraGrad {
  std::vector<LoraGrad> q, v;

  void zero_like(const LmLora& p) {
    q.resize(p.q.size());
    v.resize(p.v.size());
    for (size_t i = 0; i < p.q.size(); ++i) {
      q[i].zero_like(p.q[i]);
      v[i].zero_like(p.v[i]);
    }
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    for (size_t i = 0; i < q.size(); ++i) {
      q[i].collect(prefix + ".block" + std::to_string(i) + ".q", out);
      v[i].collect(prefix + ".block" + std::to_string(i) + ".v", out);
    }
  }
};

struct LmCache {
  Mat x_in;  // embeddings + positions
  std::vector<BlockCache> blocks;
  LayerNormCache final_ln;
  Mat hidden;  // post final-LN states
};

// Runs the causal trunk and returns the last hidden states (pre-logits).
inline Mat lm_trunk(const DecoderLm& lm, const LmLora* lora, const Mat& embed,
                    LmCache& cache) {
  Eigen::Index L = embed.rows();
  require(L <= lm.max_len(), "sequence length " + std::to_string(L) +
                                 " exceeds model maximum " + std::to_string(lm.max_len()));
  cache.x_in = embed + lm.pos_embed.topRows(L);
  cache.blocks.resize(lm.stack.blocks.size());
  Mat h = cache.x_in;
  for (size_t i = 0; i < lm.stack.blocks.size(); ++i) {
    const LoraPair* lq = lora ? &lora->q[i] : nullptr;
    const LoraPair* lv = lora ? &lora->v[i] : nullptr;
    h = block_forward(lm.stack.blocks[i], h, /*causal=*/true, cache.blocks[i], lq, lv);
  }
  if (!lm.stack.blocks.empty()) h = layernorm_forward(lm.stack.final_ln, h, cache.final_ln);
  cache.hidden = h;
  return h;
}

// Full logits over the vocabulary at every position.
inline Mat lm_forward(const DecoderLm& lm, const LmLora* lora, const AssembledSequence& seq) {
  LmCache cache;
  Mat h = lm_trunk(lm, lora, seq.embed, cache);
  return lm.out_proj.forward(h);
}

struct LmGrad {
  Mat token_embed, pos_embed;
  BlockStackGrad stack;
  LinearGrad out_proj;

  void zero_like(const DecoderLm& lm) {
    token_embed = Mat::Zero(lm.token_embed.rows(), lm.token_embed.cols());
    pos_embed = Mat::Zero(lm.pos_embed.rows(), lm.pos_embed.cols());
    stack.zero_like(lm.stack);
    out_proj.zero_like(lm.out_proj);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    add_view(out, prefix + ".token_embed", token_embed);
    add_view(out, prefix + ".pos_embed", pos_embed);
    stack.collect(prefix, out);
    out_proj.collect(prefix + ".out_proj", out);
  }
};

// Backward through the trunk given grads at the hidden states; returns grads
// w.r.t. the assembled embeddings.
inline Mat lm_trunk_backward(const DecoderLm& lm, const LmLora* lora, const LmCache& cache,
                             const Mat& dhidden, LmGrad* grad, LmLoraGrad* lora_grad) {
  Mat d = dhidden;
  if (!lm.stack.blocks.empty())
    d = grad->stack.final_ln.backward(lm.stack.final_ln, cache.final_ln, d);
  for (size_t i = lm.stack.blocks.size(); i-- > 0;) {
    const LoraPair* lq = lora ? &lora->q[i] : nullptr;
    const LoraPair* lv = lora ? &lora->v[i] : nullptr;
    LoraGrad* gq = lora_grad ? &lora_grad->q[i] : nullptr;
    LoraGrad* gv = lora_grad ? &lora_grad->v[i] : nullptr;
    d = grad->stack.blocks[i].backward(lm.stack.blocks[i], cache.blocks[i], d, lq, lv, gq, gv);
  }
  grad->pos_embed.topRows(d.rows()) += d;
  return d;
}

inline double log_softmax_at(const Eigen::RowVectorXd& logits, int target) {
  double m = logits.maxCoeff();
  double lse = m + std::log((logits.array() - m).exp().sum());
  return logits(target) - lse;
}

// Masked answer NLL of one assembled sequence:
//   loss = -(1/|mask|) * sum over answer positions t of log p(token_t | <t).
// When grads are requested, they flow into the adapters through `dembed`.
struct NllResult {
  double loss = 0.0;
  Mat dembed;  // (L, d_h); empty unless backward requested
};

inline NllResult answer_nll(const DecoderLm& lm, const LmLora* lora,
                            const AssembledSequence& seq, bool backward = false,
                            LmGrad* grad = nullptr, LmLoraGrad* lora_grad = nullptr) {
  std::int64_t n_mask = seq.mask_count();
  require(n_mask > 0, "answer_nll requires a non-empty loss mask");

  LmCache cache;
  Mat h = lm_trunk(lm, lora, seq.embed, cache);

  // Positions whose logits are needed: predecessors of masked positions.
  std::vector<Eigen::Index> rows;
  std::vector<int> targets;
  for (Eigen::Index t = 0; t < seq.length(); ++t) {
    if (!seq.loss_mask[static_cast<size_t>(t)]) continue;
    require(t > 0, "masked position cannot be first");
    rows.push_back(t - 1);
    targets.push_back(seq.token_ids[static_cast<size_t>(t)]);
  }

  Mat h_sel(static_cast<Eigen::Index>(rows.size()), h.cols());
  for (size_t i = 0; i < rows.size(); ++i) h_sel.row(static_cast<Eigen::Index>(i)) = h.row(rows[i]);
  Mat logits = lm.out_proj.forward(h_sel);

  NllResult res;
  for (size_t i = 0; i < rows.size(); ++i) {
    res.loss -= log_softmax_at(logits.row(static_cast<Eigen::Index>(i)), targets[i]);
  }
  res.loss /= static_cast<double>(n_mask);

  if (!backward) return res;
  require(grad != nullptr, "backward pass needs an LmGrad accumulator");

  Mat dlogits(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::RowVectorXd p = logits.row(i);
    double m = p.maxCoeff();
    p = (p.array() - m).exp();
    p /= p.sum();
    p(targets[static_cast<size_t>(i)]) -= 1.0;
    dlogits.row(i) = p / static_cast<double>(n_mask);
  }
  Mat dh_sel = grad->out_proj.backward(lm.out_proj, h_sel, dlogits);
  Mat dh = Mat::Zero(h.rows(), h.cols());
  for (size_t i = 0; i < rows.size(); ++i)
    dh.row(rows[i]) += dh_sel.row(static_cast<Eigen::Index>(i));

  res.dembed = lm_trunk_backward(lm, lora, cache, dh, grad, lora_grad);

  // Token-embedding grads for text positions (frozen in every stage of this
  // pipeline, but kept exact for gradient checks).
  for (Eigen::Index t = 0; t < seq.length(); ++t) {
    int id = seq.token_ids[static_cast<size_t>(t)];
    if (id >= 0) grad->token_embed.row(id) += res.dembed.row(t);
  }
  return res;
}

// Greedy decoding from an answer-free prefix until EOS or max_new tokens.
inline std::string generate_answer(const DecoderLm& lm, const LmLora* lora,
                                   const AssembledSequence& prefix,
                                   const Tokenizer& tokenizer, int max_new) {
  require(max_new >= 1, "max_new must be >= 1");
  AssembledSequence seq = prefix;
  std::vector<int> generated;
  for (int step = 0; step < max_new; ++step) {
    if (seq.length() >= lm.max_len()) break;
    LmCache cache;
    Mat h = lm_trunk(lm, lora, seq.embed, cache);
    Eigen::RowVectorXd logits =
        (h.row(h.rows() - 1) * lm.out_proj.w) + lm.out_proj.b.transpose();
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    int id = static_cast<int>(best);
    if (id == Tokenizer::kEos) break;
    generated.push_back(id);

    Mat embed(seq.embed.rows() + 1, seq.embed.cols());
    embed.topRows(seq.embed.rows()) = seq.embed;
    embed.row(embed.rows() - 1) = lm.token_embed.row(id);
    seq.embed = std::move(embed);
    seq.segments.push_back(Segment::y);
    seq.token_ids.push_back(id);
    seq.loss_mask.push_back(false);
  }
  return tokenizer.decode(generated);
}

// Length-normalized option log-likelihood in the answer slot.
inline double option_loglik(const DecoderLm& lm, const LmLora* lora,
                            const AssembledSequence& prefix, const Tokenizer& tokenizer,
                            const std::string& option) {
  std::vector<int> ids = tokenizer.encode(option);
  ids.push_back(Tokenizer::kEos);

  AssembledSequence seq = prefix;
  Eigen::Index base = prefix.length();
  Mat embed(base + static_cast<Eigen::Index>(ids.size()), prefix.embed.cols());
  embed.topRows(base) = prefix.embed;
  for (size_t i = 0; i < ids.size(); ++i) {
    embed.row(base + static_cast<Eigen::Index>(i)) = lm.token_embed.row(ids[i]);
    seq.segments.push_back(Segment::y);
    seq.token_ids.push_back(ids[i]);
    seq.loss_mask.push_back(true);
  }
  seq.embed = std::move(embed);

  NllResult r = answer_nll(lm, lora, seq);
  return -r.loss;  // mean log-likelihood per answer token
}

// score = exp(l_mpox) / (exp(l_mpox) + exp(l_non)) over length-normalized
// option log-likelihoods.
inline double mpox_score(const DecoderLm& lm, const LmLora* lora,
                         const AssembledSequence& prefix, const Tokenizer& tokenizer,
                         const VqaInstance& instance) {
  double l_mpox = option_loglik(lm, lora, prefix, tokenizer, instance.options[0]);
  double l_non = option_loglik(lm, lora, prefix, tokenizer, instance.options[1]);
  double m = std::max(l_mpox, l_non);
  double e1 = std::exp(l_mpox - m), e0 = std::exp(l_non - m);
  return e1 / (e1 + e0);
}

// Folds the LoRA deltas into the base weights: W <- W + (alpha/r) * B * A.
// A second merge of the same adapters is rejected.
inline DecoderLm lora_merge(const DecoderLm& lm, LmLora& lora) {
  require(!lora.merged, "LoRA adapters already merged");
  require(lora.q.size() == lm.stack.blocks.size(), "LoRA/block count mismatch");
  DecoderLm merged = lm;
  for (size_t i = 0; i < lora.q.size(); ++i) {
    require(lora.q[i].rank() >= 1 && lora.v[i].rank() >= 1, "LoRA rank must be >= 1");
    merged.stack.blocks[i].attn.wq.w +=
        lora.q[i].scale() * (lora.q[i].a.transpose() * lora.q[i].b.transpose());
    merged.stack.blocks[i].attn.wv.w +=
        lora.v[i].scale() * (lora.v[i].a.transpose() * lora.v[i].b.transpose());
  }
  lora.merged = true;
  return merged;
}

}  // namespace mpoxvlm
