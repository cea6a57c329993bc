#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <vector>

#include "mpoxvlm/common.hpp"

namespace mpoxvlm {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Flat view over one named parameter tensor; the optimizer, the checkpoint
// writer and the freeze checks all operate on these.
struct ParamView {
  std::string name;
  double* data = nullptr;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index size() const { return rows * cols; }
};

inline void add_view(std::vector<ParamView>& out, const std::string& name, Mat& m) {
  out.push_back({name, m.data(), m.rows(), m.cols()});
}
inline void add_view(std::vector<ParamView>& out, const std::string& name, Vec& v) {
  out.push_back({name, v.data(), v.size(), 1});
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.3989422804014327;
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double silu(double x) {
  double s = 1.0 / (1.0 + std::exp(-x));
  return x * s;
}

inline double silu_grad(double x) {
  double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

inline void softmax_rows(Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    double mx = m.row(i).maxCoeff();
    m.row(i) = (m.row(i).array() - mx).exp();
    m.row(i) /= m.row(i).sum();
  }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

struct Linear {
  Mat w;  // (d_in, d_out)
  Vec b;

  // Fan-in-scaled init keeps activation magnitudes dimension-independent.
  void init(Rng& rng, Eigen::Index d_in, Eigen::Index d_out, double std_dev = -1.0) {
    if (std_dev < 0.0) std_dev = 1.0 / std::sqrt(static_cast<double>(d_in));
    w = Mat::NullaryExpr(d_in, d_out, [&]() { return rng.normal(0.0, std_dev); });
    b = Vec::Zero(d_out);
  }

  Mat forward(const Mat& x) const {
    require(x.cols() == w.rows(), "linear dimension mismatch: " + std::to_string(x.cols()) +
                                      " vs " + std::to_string(w.rows()));
    return (x * w).rowwise() + b.transpose();
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    add_view(out, prefix + ".w", w);
    add_view(out, prefix + ".b", b);
  }
};

struct LinearGrad {
  Mat w;
  Vec b;

  void zero_like(const Linear& p) {
    w = Mat::Zero(p.w.rows(), p.w.cols());
    b = Vec::Zero(p.b.size());
  }

  // Accumulates parameter grads and returns the input grad.
  Mat backward(const Linear& p, const Mat& x, const Mat& dy) {
    w.noalias() += x.transpose() * dy;
    b.noalias() += dy.colwise().sum().transpose();
    return dy * p.w.transpose();
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    add_view(out, prefix + ".w", w);
    add_view(out, prefix + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

struct LayerNorm {
  Vec g, b;
  static constexpr double eps = 1e-5;

  void init(Eigen::Index d) {
    g = Vec::Ones(d);
    b = Vec::Zero(d);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    add_view(out, prefix + ".g", g);
    add_view(out, prefix + ".b", b);
  }
};

struct LayerNormCache {
  Mat xhat;
  Vec rstd;
};

inline Mat layernorm_forward(const LayerNorm& p, const Mat& x, LayerNormCache& cache) {
  Eigen::Index n = x.rows(), d = x.cols();
  cache.xhat.resize(n, d);
  cache.rstd.resize(n);
  Mat y(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mu = x.row(i).mean();
    double var = (x.row(i).array() - mu).square().mean();
    double rstd = 1.0 / std::sqrt(var + LayerNorm::eps);
    cache.rstd(i) = rstd;
    cache.xhat.row(i) = (x.row(i).array() - mu) * rstd;
    y.row(i) = cache.xhat.row(i).cwiseProduct(p.g.transpose()) + p.b.transpose();
  }
  return y;
}

struct LayerNormGrad {
  Vec g, b;

  void zero_like(const LayerNorm& p) {
    g = Vec::Zero(p.g.size());
    b = Vec::Zero(p.b.size());
  }

  Mat backward(const LayerNorm& p, const LayerNormCache& cache, const Mat& dy) {
    Eigen::Index n = dy.rows(), d = dy.cols();
    Mat dx(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(p.g.transpose());
      double m1 = dxhat.mean();
      double m2 = dxhat.cwiseProduct(cache.xhat.row(i)).mean();
      dx.row(i) =
          cache.rstd(i) * (dxhat.array() - m1 - cache.xhat.row(i).array() * m2);
      g += dy.row(i).cwiseProduct(cache.xhat.row(i)).transpose();
      b += dy.row(i).transpose();
    }
    return dx;
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    add_view(out, prefix + ".g", g);
    add_view(out, prefix + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// LoRA pair for one linear projection: delta W = (alpha/r) * B * A.
// At the standard B = 0 initialization the adapted map equals the base map.
// ---------------------------------------------------------------------------

struct LoraPair {
  Mat a;  // (r, d_in)
  Mat b;  // (d_out, r)
  double alpha = 8.0;

  int rank() const { return static_cast<int>(a.rows()); }
  double scale() const { return alpha / static_cast<double>(rank()); }

  void init(Rng& rng, Eigen::Index d_in, Eigen::Index d_out, int r, double alpha_in) {
    require(r >= 1, "LoRA rank must be >= 1");
    a = Mat::NullaryExpr(r, d_in, [&]() { return rng.normal(0.0, 0.02); });
    b = Mat::Zero(d_out, r);
    alpha = alpha_in;
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    add_view(out, prefix + ".a", a);
    add_view(out, prefix + ".b", b);
  }
};

struct LoraGrad {
  Mat a, b;

  void zero_like(const LoraPair& p) {
    a = Mat::Zero(p.a.rows(), p.a.cols());
    b = Mat::Zero(p.b.rows(), p.b.cols());
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    add_view(out, prefix + ".a", a);
    add_view(out, prefix + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// Multi-head attention (optionally causal, optionally LoRA-adapted q/v)
// ---------------------------------------------------------------------------

struct Attention {
  Linear wq, wk, wv, wo;
  int heads = 1;

  void init(Rng& rng, Eigen::Index d, int n_heads) {
    require(d % n_heads == 0, "model width must be divisible by head count");
    heads = n_heads;
    wq.init(rng, d, d);
    wk.init(rng, d, d);
    wv.init(rng, d, d);
    wo.init(rng, d, d);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
  }
};

struct AttentionCache {
  Mat x, q, k, v;
  Mat uq, uv;  // LoRA intermediates x*A^T
  std::vector<Mat> probs;  // per head, (L, L)
  Mat concat;
};

inline Mat attention_forward(const Attention& p, const Mat& x, bool causal,
                             AttentionCache& cache, const LoraPair* lora_q = nullptr,
                             const LoraPair* lora_v = nullptr) {
  Eigen::Index L = x.rows(), d = x.cols();
  cache.x = x;
  cache.q = p.wq.forward(x);
  cache.k = p.wk.forward(x);
  cache.v = p.wv.forward(x);
  if (lora_q) {
    cache.uq = x * lora_q->a.transpose();
    cache.q.noalias() += lora_q->scale() * cache.uq * lora_q->b.transpose();
  }
  if (lora_v) {
    cache.uv = x * lora_v->a.transpose();
    cache.v.noalias() += lora_v->scale() * cache.uv * lora_v->b.transpose();
  }

  Eigen::Index hd = d / p.heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  cache.probs.assign(static_cast<size_t>(p.heads), Mat());
  cache.concat.resize(L, d);
  for (int h = 0; h < p.heads; ++h) {
    auto qh = cache.q.middleCols(h * hd, hd);
    auto kh = cache.k.middleCols(h * hd, hd);
    auto vh = cache.v.middleCols(h * hd, hd);
    Mat s = qh * kh.transpose() * scale;
    if (causal) {
      for (Eigen::Index i = 0; i < L; ++i)
        for (Eigen::Index j = i + 1; j < L; ++j) s(i, j) = -1e30;
    }
    softmax_rows(s);
    cache.probs[static_cast<size_t>(h)] = s;
    cache.concat.middleCols(h * hd, hd).noalias() = s * vh;
  }
  return p.wo.forward(cache.concat);
}

struct AttentionGrad {
  LinearGrad wq, wk, wv, wo;

  void zero_like(const Attention& p) {
    wq.zero_like(p.wq);
    wk.zero_like(p.wk);
    wv.zero_like(p.wv);
    wo.zero_like(p.wo);
  }

  Mat backward(const Attention& p, const AttentionCache& cache, const Mat& dy,
               const LoraPair* lora_q = nullptr, const LoraPair* lora_v = nullptr,
               LoraGrad* lg_q = nullptr, LoraGrad* lg_v = nullptr) {
    Eigen::Index L = cache.x.rows(), d = cache.x.cols();
    Eigen::Index hd = d / p.heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Mat dconcat = wo.backward(p.wo, cache.concat, dy);
    Mat dq = Mat::Zero(L, d), dk = Mat::Zero(L, d), dv = Mat::Zero(L, d);
    for (int h = 0; h < p.heads; ++h) {
      const Mat& probs = cache.probs[static_cast<size_t>(h)];
      auto qh = cache.q.middleCols(h * hd, hd);
      auto kh = cache.k.middleCols(h * hd, hd);
      auto vh = cache.v.middleCols(h * hd, hd);
      auto doh = dconcat.middleCols(h * hd, hd);

      Mat dprobs = doh * vh.transpose();
      dv.middleCols(h * hd, hd).noalias() = probs.transpose() * doh;

      Mat ds(L, L);
      for (Eigen::Index i = 0; i < L; ++i) {
        double dot = probs.row(i).dot(dprobs.row(i));
        ds.row(i) = probs.row(i).array() * (dprobs.row(i).array() - dot);
      }
      dq.middleCols(h * hd, hd).noalias() = ds * kh * scale;
      dk.middleCols(h * hd, hd).noalias() = ds.transpose() * qh * scale;
    }

    Mat dx = wq.backward(p.wq, cache.x, dq);
    dx.noalias() += wk.backward(p.wk, cache.x, dk);
    dx.noalias() += wv.backward(p.wv, cache.x, dv);
    if (lora_q) {
      double s = lora_q->scale();
      Mat du = s * dq * lora_q->b;  // (L, r)
      if (lg_q) {
        lg_q->b.noalias() += s * dq.transpose() * cache.uq;
        lg_q->a.noalias() += du.transpose() * cache.x;
      }
      dx.noalias() += du * lora_q->a;
    }
    if (lora_v) {
      double s = lora_v->scale();
      Mat du = s * dv * lora_v->b;
      if (lg_v) {
        lg_v->b.noalias() += s * dv.transpose() * cache.uv;
        lg_v->a.noalias() += du.transpose() * cache.x;
      }
      dx.noalias() += du * lora_v->a;
    }
    return dx;
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    wq.collect(prefix + ".wq", out);
    wk.collect(prefix + ".wk", out);
    wv.collect(prefix + ".wv", out);
    wo.collect(prefix + ".wo", out);
  }
};

// ---------------------------------------------------------------------------
// Pre-LN transformer block: x + attn(ln1(x)), then + mlp(ln2(.))
// ---------------------------------------------------------------------------

struct Block {
  LayerNorm ln1, ln2;
  Attention attn;
  Linear fc1, fc2;

  void init(Rng& rng, Eigen::Index d, int heads, int mlp_ratio = 4) {
    ln1.init(d);
    ln2.init(d);
    attn.init(rng, d, heads);
    fc1.init(rng, d, d * mlp_ratio);
    fc2.init(rng, d * mlp_ratio, d);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    ln1.collect(prefix + ".ln1", out);
    attn.collect(prefix + ".attn", out);
    ln2.collect(prefix + ".ln2", out);
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

struct BlockCache {
  Mat x;
  LayerNormCache ln1c, ln2c;
  Mat n1;
  AttentionCache attnc;
  Mat a;  // x + attention
  Mat n2, h, act;
};

inline Mat block_forward(const Block& p, const Mat& x, bool causal, BlockCache& cache,
                         const LoraPair* lora_q = nullptr, const LoraPair* lora_v = nullptr) {
  cache.x = x;
  cache.n1 = layernorm_forward(p.ln1, x, cache.ln1c);
  Mat att = attention_forward(p.attn, cache.n1, causal, cache.attnc, lora_q, lora_v);
  cache.a = x + att;
  cache.n2 = layernorm_forward(p.ln2, cache.a, cache.ln2c);
  cache.h = p.fc1.forward(cache.n2);
  cache.act = cache.h.unaryExpr([](double v) { return gelu(v); });
  return cache.a + p.fc2.forward(cache.act);
}

struct BlockGrad {
  LayerNormGrad ln1, ln2;
  AttentionGrad attn;
  LinearGrad fc1, fc2;

  void zero_like(const Block& p) {
    ln1.zero_like(p.ln1);
    ln2.zero_like(p.ln2);
    attn.zero_like(p.attn);
    fc1.zero_like(p.fc1);
    fc2.zero_like(p.fc2);
  }

  Mat backward(const Block& p, const BlockCache& cache, const Mat& dy,
               const LoraPair* lora_q = nullptr, const LoraPair* lora_v = nullptr,
               LoraGrad* lg_q = nullptr, LoraGrad* lg_v = nullptr) {
    Mat dact = fc2.backward(p.fc2, cache.act, dy);
    Mat dh = dact.cwiseProduct(cache.h.unaryExpr([](double v) { return gelu_grad(v); }));
    Mat dn2 = fc1.backward(p.fc1, cache.n2, dh);
    Mat da = dy + ln2.backward(p.ln2, cache.ln2c, dn2);
    Mat dn1 = attn.backward(p.attn, cache.attnc, da, lora_q, lora_v, lg_q, lg_v);
    return da + ln1.backward(p.ln1, cache.ln1c, dn1);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    ln1.collect(prefix + ".ln1", out);
    attn.collect(prefix + ".attn", out);
    ln2.collect(prefix + ".ln2", out);
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

// ---------------------------------------------------------------------------
// Block stack with final LayerNorm. A zero-depth stack is the identity
// (degenerate configuration used by shape/identity tests).
// ---------------------------------------------------------------------------

struct BlockStack {
  std::vector<Block> blocks;
  LayerNorm final_ln;

  void init(Rng& rng, Eigen::Index d, int depth, int heads, int mlp_ratio = 4) {
    blocks.resize(static_cast<size_t>(depth));
    for (auto& b : blocks) b.init(rng, d, heads, mlp_ratio);
    final_ln.init(d);
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    final_ln.collect(prefix + ".final_ln", out);
  }
};

struct BlockStackCache {
  std::vector<BlockCache> blocks;
  LayerNormCache final_ln;
};

inline Mat stack_forward(const BlockStack& p, const Mat& x, bool causal,
                         BlockStackCache& cache) {
  if (p.blocks.empty()) return x;
  cache.blocks.resize(p.blocks.size());
  Mat h = x;
  for (size_t i = 0; i < p.blocks.size(); ++i)
    h = block_forward(p.blocks[i], h, causal, cache.blocks[i]);
  return layernorm_forward(p.final_ln, h, cache.final_ln);
}

struct BlockStackGrad {
  std::vector<BlockGrad> blocks;
  LayerNormGrad final_ln;

  void zero_like(const BlockStack& p) {
    blocks.resize(p.blocks.size());
    for (size_t i = 0; i < p.blocks.size(); ++i) blocks[i].zero_like(p.blocks[i]);
    final_ln.zero_like(p.final_ln);
  }

  Mat backward(const BlockStack& p, const BlockStackCache& cache, const Mat& dy) {
    if (p.blocks.empty()) return dy;
    Mat d = final_ln.backward(p.final_ln, cache.final_ln, dy);
    for (size_t i = p.blocks.size(); i-- > 0;)
      d = blocks[i].backward(p.blocks[i], cache.blocks[i], d);
    return d;
  }

  void collect(const std::string& prefix, std::vector<ParamView>& out) {
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].collect(prefix + ".block" + std::to_string(i), out);
    final_ln.collect(prefix + ".final_ln", out);
  }
};

// ---------------------------------------------------------------------------
// Registry helpers
// ---------------------------------------------------------------------------

inline Eigen::Index total_size(const std::vector<ParamView>& views) {
  Eigen::Index n = 0;
  for (const auto& v : views) n += v.size();
  return n;
}

inline std::string serialize_views(const std::vector<ParamView>& views) {
  std::string bytes;
  for (const auto& v : views) {
    bytes.append(reinterpret_cast<const char*>(v.data),
                 static_cast<size_t>(v.size()) * sizeof(double));
  }
  return bytes;
}

}  // namespace mpoxvlm
