#pragma once

// Toy pre-norm transformer encoder with an LM head.
//
//   x   = E[token] + Pos[position]
//   per block:
//     h   = x + Attn(LN1(x)) W_O + b_O        (attn_out site: input of W_O)
//     out = h + GELU(LN2(h) W_up + b_up) W_down + b_down   (ffn_down site)
//   logits = LN_f(x) W_lm + b_lm
//
// Heads occupy contiguous head_dim-wide column blocks of W_Q/W_K/W_V and the
// matching row blocks of W_O, so pruning a head is a block deletion.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prunekit/errors.hpp"
#include "prunekit/linalg.hpp"
#include "prunekit/rng.hpp"
#include "prunekit/tensorio.hpp"

namespace prunekit {

enum class Site { attn_out, ffn_down };

inline const char* site_name(Site s) { return s == Site::attn_out ? "attn_out" : "ffn_down"; }

inline Site parse_site(const std::string& s) {
  if (s == "attn_out") return Site::attn_out;
  if (s == "ffn_down") return Site::ffn_down;
  throw ValidationError("unknown site '" + s + "'");
}

struct ModelConfig {
  std::size_t vocab = 32;
  std::size_t embed_dim = 32;
  std::size_t heads = 4;
  std::size_t head_dim = 8;
  std::size_t ffn_dim = 128;
  std::size_t layers = 2;
  std::size_t max_seq = 32;
  bool causal = false;

  void validate() const {
    if (vocab < 2) throw ValidationError("vocab must be >= 2");
    if (heads == 0 || head_dim == 0) throw ValidationError("heads and head_dim must be >= 1");
    if (embed_dim != heads * head_dim) throw ValidationError("embed_dim must equal heads * head_dim");
    if (ffn_dim == 0 || layers == 0 || max_seq == 0)
      throw ValidationError("ffn_dim, layers and max_seq must be >= 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerNorm {
  std::vector<double> gamma;
  std::vector<double> beta;
};

struct Linear {
  Matrix weight;  // in x out
  std::vector<double> bias;

  Matrix apply(const Matrix& x) const { return add_row(matmul(x, weight), bias); }
};

struct Block {
  LayerNorm ln1;
  Linear q, k, v, o;
  LayerNorm ln2;
  Linear up, down;
  std::size_t heads = 0;

  std::size_t ffn_width() const { return up.weight.cols(); }
};

struct ToyTransformer {
  ModelConfig config;
  Matrix token_embedding;  // V x C
  Matrix pos_embedding;    // max_seq x C
  std::vector<Block> blocks;
  LayerNorm final_norm;
  Linear lm_head;  // C x V
};

/// N sequences of T token ids; `targets` is either empty or the same shape.
struct TokenBatch {
  std::size_t n = 0;
  std::size_t t = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;

  std::size_t token_count() const { return n * t; }

  void validate(const ModelConfig& cfg, bool need_targets) const {
    if (n == 0 || t == 0) throw ValidationError("token batch is empty");
    if (tokens.size() != n * t) throw ValidationError("token count != N*T");
    if (t > cfg.max_seq) throw ValidationError("sequence length exceeds max_seq");
    for (auto id : tokens)
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab)
        throw ValidationError("token id " + std::to_string(id) + " out of range");
    if (need_targets && targets.size() != n * t) throw ValidationError("targets missing or mis-shaped");
    for (auto id : targets)
      if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab)
        throw ValidationError("target id " + std::to_string(id) + " out of range");
  }

  // First `count` sequences.
  TokenBatch head(std::size_t count) const {
    count = std::min(count, n);
    TokenBatch out{count, t, {tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(count * t)}, {}};
    if (!targets.empty())
      out.targets.assign(targets.begin(), targets.begin() + static_cast<std::ptrdiff_t>(count * t));
    return out;
  }
};

/// Inputs consumed by W_O and W_down at every layer, plus the final block output.
struct HiddenTrace {
  std::vector<Batch3> attn_in;
  std::vector<Batch3> ffn_in;
  Batch3 final_hidden;

  const Batch3& at(std::size_t layer, Site site) const {
    return site == Site::attn_out ? attn_in.at(layer) : ffn_in.at(layer);
  }
};

struct ForwardResult {
  Batch3 logits;
  HiddenTrace trace;
};

/// Keep/drop flags over the input channels of W_O (heads) or W_down (neurons).
struct ChannelMask {
  std::size_t layer = 0;
  Site site = Site::ffn_down;
  std::size_t group_size = 1;
  std::vector<bool> keep;

  std::size_t group_count() const { return group_size == 0 ? 0 : keep.size() / group_size; }
  bool group_kept(std::size_t g) const { return keep[g * group_size]; }

  std::vector<std::size_t> kept_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (keep[i]) idx.push_back(i);
    return idx;
  }
  std::vector<std::size_t> dropped_indices() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (!keep[i]) idx.push_back(i);
    return idx;
  }
  std::size_t kept_groups() const {
    std::size_t n = 0;
    for (std::size_t g = 0; g < group_count(); ++g) n += group_kept(g) ? 1 : 0;
    return n;
  }

  static ChannelMask all_keep(std::size_t layer, Site site, std::size_t channels, std::size_t group_size) {
    return {layer, site, group_size, std::vector<bool>(channels, true)};
  }

  void validate(std::size_t expected_channels) const {
    if (group_size == 0) throw ValidationError("mask group_size must be >= 1");
    if (keep.size() != expected_channels)
      throw ValidationError("mask length " + std::to_string(keep.size()) + " != channel count " +
                            std::to_string(expected_channels));
    if (keep.size() % group_size != 0) throw ValidationError("mask length not a multiple of group size");
    for (std::size_t g = 0; g < group_count(); ++g)
      for (std::size_t i = 1; i < group_size; ++i)
        if (keep[g * group_size + i] != keep[g * group_size])
          throw ValidationError("mask not constant within group " + std::to_string(g));
    if (kept_groups() == 0) throw ValidationError("all channels pruned");
  }
};

/// Multiplicative per-group gate on a site's input channels (SNIP's c).
struct ChannelGate {
  std::size_t layer = 0;
  Site site = Site::ffn_down;
  std::size_t group_size = 1;
  std::vector<double> values;
};

inline const Linear& site_linear(const ToyTransformer& m, std::size_t layer, Site site) {
  const Block& b = m.blocks.at(layer);
  return site == Site::attn_out ? b.o : b.down;
}

inline std::size_t site_group_size(const ToyTransformer& m, Site site) {
  return site == Site::attn_out ? m.config.head_dim : 1;
}

inline std::size_t site_channels(const ToyTransformer& m, std::size_t layer, Site site) {
  return site_linear(m, layer, site).weight.rows();
}

namespace detail {

inline constexpr double kLayerNormEps = 1e-5;

struct LnCache {
  Matrix xhat;
  std::vector<double> inv_std;
};

inline Matrix layer_norm(const Matrix& x, const LayerNorm& ln, LnCache* cache) {
  const std::size_t c = x.cols();
  Matrix y(x.rows(), c);
  Matrix xhat(x.rows(), c);
  std::vector<double> inv_std(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (r[j] - mean) * is;
      y(i, j) = ln.gamma[j] * xhat(i, j) + ln.beta[j];
    }
  }
  if (cache) *cache = {std::move(xhat), std::move(inv_std)};
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const LayerNorm& ln, const LnCache& cache) {
  const std::size_t c = dy.cols();
  Matrix dx(dy.rows(), c);
  std::vector<double> dxhat(c);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    double mean_d = 0.0;
    double mean_dx = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      dxhat[j] = dy(i, j) * ln.gamma[j];
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * cache.xhat(i, j);
    }
    mean_d /= static_cast<double>(c);
    mean_dx /= static_cast<double>(c);
    for (std::size_t j = 0; j < c; ++j)
      dx(i, j) = cache.inv_std[i] * (dxhat[j] - mean_d - cache.xhat(i, j) * mean_dx);
  }
  return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

struct BlockCache {
  LnCache ln1;
  Matrix q, k, v;
  std::vector<double> probs;  // [seq][head][query][key]
  Matrix concat;              // ungated input of W_O
  LnCache ln2;
  Matrix u;  // pre-GELU
  Matrix g;  // ungated input of W_down
};

struct ForwardCache {
  std::vector<BlockCache> blocks;
  LnCache final_ln;
};

// Multi-head attention core: softmax(q k^T / sqrt(d)) v per sequence and head.
inline Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t n, std::size_t t,
                        std::size_t heads, std::size_t d, bool causal, std::vector<double>* probs_out) {
  Matrix out(n * t, heads * d);
  std::vector<double> probs(n * heads * t * t, 0.0);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> scores(t);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* p = probs.data() + ((s * heads + h) * t) * t;
      for (std::size_t i = 0; i < t; ++i) {
        const std::size_t limit = causal ? i + 1 : t;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < limit; ++j) {
          double acc = 0.0;
          for (std::size_t e = 0; e < d; ++e) acc += q(s * t + i, h * d + e) * k(s * t + j, h * d + e);
          scores[j] = acc * inv_sqrt;
          mx = std::max(mx, scores[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < limit; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        for (std::size_t j = 0; j < limit; ++j) p[i * t + j] = scores[j] / z;
        for (std::size_t e = 0; e < d; ++e) {
          double acc = 0.0;
          for (std::size_t j = 0; j < limit; ++j) acc += p[i * t + j] * v(s * t + j, h * d + e);
          out(s * t + i, h * d + e) = acc;
        }
      }
    }
  }
  if (probs_out) *probs_out = std::move(probs);
  return out;
}

inline void attention_backward(const BlockCache& c, const Matrix& dconcat, std::size_t n, std::size_t t,
                               std::size_t heads, std::size_t d, Matrix& dq, Matrix& dk, Matrix& dv) {
  dq = Matrix(n * t, heads * d);
  dk = Matrix(n * t, heads * d);
  dv = Matrix(n * t, heads * d);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> dp(t * t);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t h = 0; h < heads; ++h) {
      const double* p = c.probs.data() + ((s * heads + h) * t) * t;
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t j = 0; j < t; ++j) {
          double acc = 0.0;
          for (std::size_t e = 0; e < d; ++e)
            acc += dconcat(s * t + i, h * d + e) * c.v(s * t + j, h * d + e);
          dp[i * t + j] = acc;
        }
      }
      for (std::size_t j = 0; j < t; ++j)
        for (std::size_t e = 0; e < d; ++e) {
          double acc = 0.0;
          for (std::size_t i = 0; i < t; ++i) acc += p[i * t + j] * dconcat(s * t + i, h * d + e);
          dv(s * t + j, h * d + e) = acc;
        }
      for (std::size_t i = 0; i < t; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < t; ++j) dot += p[i * t + j] * dp[i * t + j];
        for (std::size_t j = 0; j < t; ++j) {
          const double ds = p[i * t + j] * (dp[i * t + j] - dot) * inv_sqrt;
          if (ds == 0.0) continue;
          for (std::size_t e = 0; e < d; ++e) {
            dq(s * t + i, h * d + e) += ds * c.k(s * t + j, h * d + e);
            dk(s * t + j, h * d + e) += ds * c.q(s * t + i, h * d + e);
          }
        }
      }
    }
  }
}

inline void apply_gate(Matrix& x, const ChannelGate* gate, std::size_t layer, Site site) {
  if (!gate || gate->layer != layer || gate->site != site) return;
  if (gate->values.size() * gate->group_size != x.cols()) throw ValidationError("gate size mismatch");
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) x(i, j) *= gate->values[j / gate->group_size];
}

inline Matrix forward_impl(const ToyTransformer& model, const TokenBatch& batch, const ChannelGate* gate,
                           HiddenTrace* trace, ForwardCache* cache) {
  const auto& cfg = model.config;
  batch.validate(cfg, false);
  const std::size_t n = batch.n, t = batch.t, c = cfg.embed_dim;

  Matrix x(n * t, c);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < t; ++j) {
      const auto id = static_cast<std::size_t>(batch.tokens[s * t + j]);
      for (std::size_t e = 0; e < c; ++e)
        x(s * t + j, e) = model.token_embedding(id, e) + model.pos_embedding(j, e);
    }

  if (trace) {
    trace->attn_in.clear();
    trace->ffn_in.clear();
  }
  if (cache) cache->blocks.assign(model.blocks.size(), {});

  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    const Block& b = model.blocks[l];
    BlockCache local;
    BlockCache& bc = cache ? cache->blocks[l] : local;

    const Matrix a1 = layer_norm(x, b.ln1, &bc.ln1);
    bc.q = b.q.apply(a1);
    bc.k = b.k.apply(a1);
    bc.v = b.v.apply(a1);
    bc.concat = attention(bc.q, bc.k, bc.v, n, t, b.heads, cfg.head_dim, cfg.causal, cache ? &bc.probs : nullptr);
    Matrix attn_in = bc.concat;
    apply_gate(attn_in, gate, l, Site::attn_out);
    const Matrix h = add(x, b.o.apply(attn_in));
    if (trace) trace->attn_in.push_back(Batch3::from_matrix(n, t, attn_in));

    const Matrix a2 = layer_norm(h, b.ln2, &bc.ln2);
    bc.u = b.up.apply(a2);
    bc.g = bc.u;
    for (double& val : bc.g.data()) val = gelu(val);
    Matrix ffn_in = bc.g;
    apply_gate(ffn_in, gate, l, Site::ffn_down);
    x = add(h, b.down.apply(ffn_in));
    if (trace) trace->ffn_in.push_back(Batch3::from_matrix(n, t, ffn_in));
  }
  if (trace) trace->final_hidden = Batch3::from_matrix(n, t, x);

  const Matrix z = layer_norm(x, model.final_norm, cache ? &cache->final_ln : nullptr);
  return model.lm_head.apply(z);
}

}  // namespace detail

inline void validate_model(const ToyTransformer& m) {
  m.config.validate();
  const auto& cfg = m.config;
  const std::size_t c = cfg.embed_dim;
  auto check = [](bool ok, const std::string& what) {
    if (!ok) throw ValidationError("model shape: " + what);
  };
  check(m.token_embedding.rows() == cfg.vocab && m.token_embedding.cols() == c, "token embedding");
  check(m.pos_embedding.rows() == cfg.max_seq && m.pos_embedding.cols() == c, "position embedding");
  check(m.blocks.size() == cfg.layers, "layer count");
  auto check_ln = [&](const LayerNorm& ln, const std::string& what) {
    check(ln.gamma.size() == c && ln.beta.size() == c, what);
  };
  auto check_lin = [&](const Linear& lin, std::size_t in, std::size_t out, const std::string& what) {
    check(lin.weight.rows() == in && lin.weight.cols() == out && lin.bias.size() == out, what);
  };
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const Block& b = m.blocks[l];
    const std::string p = "layer " + std::to_string(l) + " ";
    check(b.heads >= 1 && b.heads <= cfg.heads, p + "head count");
    const std::size_t hd = b.heads * cfg.head_dim;
    check_ln(b.ln1, p + "ln1");
    check_ln(b.ln2, p + "ln2");
    check_lin(b.q, c, hd, p + "W_Q");
    check_lin(b.k, c, hd, p + "W_K");
    check_lin(b.v, c, hd, p + "W_V");
    check_lin(b.o, hd, c, p + "W_O");
    check(b.ffn_width() >= 1, p + "ffn width");
    check_lin(b.up, c, b.ffn_width(), p + "W_up");
    check_lin(b.down, b.ffn_width(), c, p + "W_down");
  }
  check_ln(m.final_norm, "final norm");
  check_lin(m.lm_head, c, cfg.vocab, "lm head");
}

/// Runs the model; the trace holds exactly what W_O and W_down consumed.
inline ForwardResult forward(const ToyTransformer& model, const TokenBatch& batch,
                             const ChannelGate* gate = nullptr) {
  ForwardResult r;
  const Matrix logits = detail::forward_impl(model, batch, gate, &r.trace, nullptr);
  r.logits = Batch3::from_matrix(batch.n, batch.t, logits);
  return r;
}

inline Matrix forward_logits(const ToyTransformer& model, const TokenBatch& batch,
                             const ChannelGate* gate = nullptr) {
  return detail::forward_impl(model, batch, gate, nullptr, nullptr);
}

// Mean token cross-entropy; optionally writes dL/dlogits.
inline double cross_entropy(const Matrix& logits, std::span<const std::int32_t> targets,
                            Matrix* dlogits = nullptr) {
  if (targets.size() != logits.rows()) throw ShapeError("targets length != logits rows");
  const double inv = 1.0 / static_cast<double>(logits.rows());
  if (dlogits) *dlogits = Matrix(logits.rows(), logits.cols());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double v : r) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    const auto tgt = static_cast<std::size_t>(targets[i]);
    total += lse - r[tgt];
    if (dlogits) {
      for (std::size_t j = 0; j < r.size(); ++j) (*dlogits)(i, j) = std::exp(r[j] - lse) * inv;
      (*dlogits)(i, tgt) -= inv;
    }
  }
  return total * inv;
}

inline double model_loss(const ToyTransformer& model, const TokenBatch& batch,
                         const ChannelGate* gate = nullptr) {
  batch.validate(model.config, true);
  return cross_entropy(forward_logits(model, batch, gate), batch.targets);
}

struct GateGradients {
  double loss = 0.0;
  std::vector<double> grads;  // one per channel group of the site
};

/// Loss and dL/dc_k for a unit gate c on each channel group of the site matrix
/// (heads for attn_out, neurons for ffn_down), by reverse-mode through every
/// downstream layer.
inline GateGradients loss_and_mask_grads(const ToyTransformer& model, const TokenBatch& batch, Site site,
                                         std::size_t layer) {
  if (layer >= model.blocks.size()) throw ValidationError("layer " + std::to_string(layer) + " out of range");
  batch.validate(model.config, true);
  const auto& cfg = model.config;
  const std::size_t n = batch.n, t = batch.t;

  detail::ForwardCache cache;
  const Matrix logits = detail::forward_impl(model, batch, nullptr, nullptr, &cache);
  GateGradients out;
  Matrix dlogits;
  out.loss = cross_entropy(logits, batch.targets, &dlogits);

  Matrix dx = detail::layer_norm_backward(matmul_nt(dlogits, model.lm_head.weight), model.final_norm,
                                          cache.final_ln);

  auto reduce = [&](const Matrix& x, const Matrix& dx_site, std::size_t group_size) {
    std::vector<double> g(x.cols() / group_size, 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < x.cols(); ++j) g[j / group_size] += x(i, j) * dx_site(i, j);
    return g;
  };

  for (std::size_t l = model.blocks.size(); l-- > layer;) {
    const Block& b = model.blocks[l];
    const detail::BlockCache& bc = cache.blocks[l];

    Matrix dh = dx;
    const Matrix dg = matmul_nt(dx, b.down.weight);
    if (l == layer && site == Site::ffn_down) {
      out.grads = reduce(bc.g, dg, 1);
      return out;
    }
    Matrix du = dg;
    for (std::size_t i = 0; i < du.size(); ++i) du.data()[i] *= detail::gelu_grad(bc.u.data()[i]);
    dh = add(dh, detail::layer_norm_backward(matmul_nt(du, b.up.weight), b.ln2, bc.ln2));

    const Matrix dconcat = matmul_nt(dh, b.o.weight);
    if (l == layer && site == Site::attn_out) {
      out.grads = reduce(bc.concat, dconcat, cfg.head_dim);
      return out;
    }
    Matrix dq, dk, dv;
    detail::attention_backward(bc, dconcat, n, t, b.heads, cfg.head_dim, dq, dk, dv);
    Matrix da1 = matmul_nt(dq, b.q.weight);
    da1 = add(da1, matmul_nt(dk, b.k.weight));
    da1 = add(da1, matmul_nt(dv, b.v.weight));
    dx = add(dh, detail::layer_norm_backward(da1, b.ln1, bc.ln1));
  }
  throw ValidationError("unreachable gate site");  // loop always returns at `layer`
}

/// Deletes the dropped groups: producer columns (W_Q/W_K/W_V or W_up and
/// their biases) and consumer rows (W_O or W_down). Kept order is preserved.
inline ToyTransformer apply_surgery(const ToyTransformer& model, const ChannelMask& mask) {
  if (mask.layer >= model.blocks.size()) throw ValidationError("mask layer out of range");
  const std::size_t expected_group = site_group_size(model, mask.site);
  if (mask.group_size != expected_group)
    throw ValidationError("mask group size " + std::to_string(mask.group_size) + " != " +
                          std::to_string(expected_group) + " for " + site_name(mask.site));
  mask.validate(site_channels(model, mask.layer, mask.site));

  ToyTransformer out = model;
  Block& b = out.blocks[mask.layer];
  const auto kept = mask.kept_indices();
  auto keep_cols = [&](Linear& lin) {
    lin.weight = select_columns(lin.weight, kept);
    std::vector<double> bias;
    for (auto i : kept) bias.push_back(lin.bias[i]);
    lin.bias = std::move(bias);
  };
  if (mask.site == Site::attn_out) {
    keep_cols(b.q);
    keep_cols(b.k);
    keep_cols(b.v);
    b.o.weight = select_rows(b.o.weight, kept);
    b.heads = mask.kept_groups();
  } else {
    keep_cols(b.up);
    b.down.weight = select_rows(b.down.weight, kept);
  }
  return out;
}

// Replaces the site matrix and its bias (shape of the weight must match).
inline void install_weights(ToyTransformer& model, std::size_t layer, Site site, const Matrix& weight,
                            std::span<const double> bias) {
  Block& b = model.blocks.at(layer);
  Linear& lin = site == Site::attn_out ? b.o : b.down;
  if (weight.rows() != lin.weight.rows() || weight.cols() != lin.weight.cols() || bias.size() != lin.bias.size())
    throw ShapeError("installed weights do not match layer " + std::to_string(layer) + " " + site_name(site));
  lin.weight = weight;
  lin.bias.assign(bias.begin(), bias.end());
}

inline std::size_t param_count(const ToyTransformer& m) {
  auto lin = [](const Linear& l) { return l.weight.size() + l.bias.size(); };
  auto ln = [](const LayerNorm& n) { return n.gamma.size() + n.beta.size(); };
  std::size_t total = m.token_embedding.size() + m.pos_embedding.size() + ln(m.final_norm) + lin(m.lm_head);
  for (const Block& b : m.blocks)
    total += ln(b.ln1) + ln(b.ln2) + lin(b.q) + lin(b.k) + lin(b.v) + lin(b.o) + lin(b.up) + lin(b.down);
  return total;
}

// ---------------------------------------------------------------------------
// Synthetic assets

struct GenConfig {
  ModelConfig model;
  std::size_t calib_n = 16;
  std::size_t calib_t = 32;
  std::size_t eval_n = 16;
  std::size_t eval_t = 32;
  double markov_temperature = 2.0;

  void validate() const {
    model.validate();
    if (calib_n == 0 || calib_t == 0 || eval_n == 0 || eval_t == 0)
      throw ValidationError("calibration and eval batches must be non-empty");
    if (calib_t > model.max_seq || eval_t > model.max_seq)
      throw ValidationError("sequence length exceeds max_seq");
    if (!(markov_temperature > 0.0)) throw ValidationError("markov_temperature must be > 0");
  }

  static GenConfig from_json(const nlohmann::json& j) {
    GenConfig g;
    if (!j.is_object()) throw ValidationError("gen config must be a JSON object");
    static const std::set<std::string> known{"vocab",   "embed_dim", "heads",   "head_dim", "ffn_dim",
                                             "layers",  "max_seq",   "causal",  "calib_n",  "calib_t",
                                             "eval_n",  "eval_t",    "markov_temperature"};
    for (const auto& [key, value] : j.items())
      if (!known.contains(key)) throw ValidationError("gen config: unknown key '" + key + "'");
    try {
      auto& m = g.model;
      m.vocab = j.value("vocab", m.vocab);
      m.embed_dim = j.value("embed_dim", m.embed_dim);
      m.heads = j.value("heads", m.heads);
      m.head_dim = j.value("head_dim", m.head_dim);
      m.ffn_dim = j.value("ffn_dim", m.ffn_dim);
      m.layers = j.value("layers", m.layers);
      m.max_seq = j.value("max_seq", m.max_seq);
      m.causal = j.value("causal", m.causal);
      g.calib_n = j.value("calib_n", g.calib_n);
      g.calib_t = j.value("calib_t", g.calib_t);
      g.eval_n = j.value("eval_n", g.eval_n);
      g.eval_t = j.value("eval_t", g.eval_t);
      g.markov_temperature = j.value("markov_temperature", g.markov_temperature);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("gen config: ") + e.what());
    }
    g.validate();
    return g;
  }
};

struct SyntheticAssets {
  ToyTransformer model;
  TokenBatch calib;
  TokenBatch eval;
};

// Independent RNG streams per asset so resizing one batch leaves the others
// (and the weights) unchanged.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline ToyTransformer random_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t c = cfg.embed_dim, f = cfg.ffn_dim;
  auto normal_matrix = [&](std::size_t r, std::size_t cols, double sd) {
    Matrix m(r, cols);
    for (double& v : m.data()) v = rng.normal(0.0, sd);
    return m;
  };
  auto normal_vec = [&](std::size_t len, double mean, double sd) {
    std::vector<double> v(len);
    for (double& x : v) x = rng.normal(mean, sd);
    return v;
  };
  auto linear = [&](std::size_t in, std::size_t out, double bias_sd) {
    Linear l;
    l.weight = normal_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)));
    l.bias = normal_vec(out, 0.0, bias_sd);
    return l;
  };
  auto norm = [&] { return LayerNorm{normal_vec(c, 1.0, 0.1), normal_vec(c, 0.0, 0.1)}; };

  ToyTransformer m;
  m.config = cfg;
  m.token_embedding = normal_matrix(cfg.vocab, c, 1.0);
  m.pos_embedding = normal_matrix(cfg.max_seq, c, 0.5);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    Block b;
    b.ln1 = norm();
    b.q = linear(c, c, 0.1);
    b.k = linear(c, c, 0.1);
    b.v = linear(c, c, 0.1);
    b.o = linear(c, c, 0.1);
    b.ln2 = norm();
    b.up = linear(c, f, 0.5);
    b.down = linear(f, c, 0.1);
    b.heads = cfg.heads;
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = norm();
  m.lm_head = linear(c, cfg.vocab, 0.1);
  return m;
}

/// Row-stochastic transition matrix with softmax(temperature * N(0,1)) rows.
inline Matrix markov_transitions(std::size_t vocab, double temperature, std::uint64_t seed) {
  Rng rng(seed);
  Matrix p(vocab, vocab);
  for (std::size_t i = 0; i < vocab; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      p(i, j) = std::exp(temperature * rng.normal());
      z += p(i, j);
    }
    for (std::size_t j = 0; j < vocab; ++j) p(i, j) /= z;
  }
  return p;
}

// Sequences of t+1 Markov states; inputs are the first t, targets the last t.
inline TokenBatch sample_markov(const Matrix& transitions, std::size_t n, std::size_t t, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t v = transitions.rows();
  TokenBatch b{n, t, {}, {}};
  b.tokens.reserve(n * t);
  b.targets.reserve(n * t);
  for (std::size_t s = 0; s < n; ++s) {
    auto state = static_cast<std::size_t>(rng.below(v));
    for (std::size_t j = 0; j < t; ++j) {
      b.tokens.push_back(static_cast<std::int32_t>(state));
      const double u = rng.uniform();
      double acc = 0.0;
      std::size_t next = v - 1;
      for (std::size_t k = 0; k < v; ++k) {
        acc += transitions(state, k);
        if (u < acc) {
          next = k;
          break;
        }
      }
      b.targets.push_back(static_cast<std::int32_t>(next));
      state = next;
    }
  }
  return b;
}

inline SyntheticAssets gen_synthetic(const GenConfig& config, std::uint64_t seed) {
  config.validate();
  SyntheticAssets a;
  a.model = random_model(config.model, stream_seed(seed, 0));
  const Matrix chain = markov_transitions(config.model.vocab, config.markov_temperature, stream_seed(seed, 1));
  a.calib = sample_markov(chain, config.calib_n, config.calib_t, stream_seed(seed, 2));
  a.eval = sample_markov(chain, config.eval_n, config.eval_t, stream_seed(seed, 3));
  return a;
}

// ---------------------------------------------------------------------------
// Persistence

inline std::string layer_prefix(std::size_t l) { return "layers." + std::to_string(l) + "."; }

inline TensorList model_to_tensors(const ToyTransformer& m) {
  TensorList out;
  auto put_ln = [&](const std::string& p, const LayerNorm& ln) {
    out.push_back(make_tensor(p + "gamma", ln.gamma));
    out.push_back(make_tensor(p + "beta", ln.beta));
  };
  auto put_lin = [&](const std::string& p, const Linear& lin) {
    out.push_back(make_tensor(p + "weight", lin.weight));
    out.push_back(make_tensor(p + "bias", lin.bias));
  };
  out.push_back(make_tensor("embed.token", m.token_embedding));
  out.push_back(make_tensor("embed.pos", m.pos_embedding));
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const Block& b = m.blocks[l];
    const std::string p = layer_prefix(l);
    put_ln(p + "ln1.", b.ln1);
    put_lin(p + "attn.q.", b.q);
    put_lin(p + "attn.k.", b.k);
    put_lin(p + "attn.v.", b.v);
    put_lin(p + "attn.o.", b.o);
    put_ln(p + "ln2.", b.ln2);
    put_lin(p + "ffn.up.", b.up);
    put_lin(p + "ffn.down.", b.down);
  }
  put_ln("final_norm.", m.final_norm);
  put_lin("lm_head.", m.lm_head);
  return out;
}

inline ModelManifest make_manifest(const ToyTransformer& m, const TensorList& tensors) {
  ModelManifest man;
  const auto& c = m.config;
  man.layers = c.layers;
  man.embed_dim = c.embed_dim;
  man.heads = c.heads;
  man.head_dim = c.head_dim;
  man.ffn_dim = c.ffn_dim;
  man.vocab = c.vocab;
  man.max_seq = c.max_seq;
  man.causal = c.causal;
  for (const Block& b : m.blocks) {
    man.layer_heads.push_back(b.heads);
    man.layer_ffn.push_back(b.ffn_width());
  }
  for (const auto& t : tensors) man.tensors[t.name] = t.dims;
  return man;
}

inline ToyTransformer model_from_tensors(const ModelManifest& man, const TensorList& tensors) {
  man.validate_against(tensors);
  auto vec = [&](const std::string& name) {
    const Tensor& t = find_tensor(tensors, name);
    if (t.dims.size() != 1) throw ValidationError("tensor '" + name + "' is not 1-D");
    return t.values;
  };
  auto mat = [&](const std::string& name) { return tensor_to_matrix(find_tensor(tensors, name)); };
  auto ln = [&](const std::string& p) { return LayerNorm{vec(p + "gamma"), vec(p + "beta")}; };
  auto lin = [&](const std::string& p) { return Linear{mat(p + "weight"), vec(p + "bias")}; };

  ToyTransformer m;
  m.config = {man.vocab, man.embed_dim, man.heads, man.head_dim, man.ffn_dim, man.layers, man.max_seq, man.causal};
  m.token_embedding = mat("embed.token");
  m.pos_embedding = mat("embed.pos");
  for (std::size_t l = 0; l < man.layers; ++l) {
    const std::string p = layer_prefix(l);
    Block b;
    b.ln1 = ln(p + "ln1.");
    b.q = lin(p + "attn.q.");
    b.k = lin(p + "attn.k.");
    b.v = lin(p + "attn.v.");
    b.o = lin(p + "attn.o.");
    b.ln2 = ln(p + "ln2.");
    b.up = lin(p + "ffn.up.");
    b.down = lin(p + "ffn.down.");
    b.heads = man.layer_heads[l];
    m.blocks.push_back(std::move(b));
  }
  m.final_norm = ln("final_norm.");
  m.lm_head = lin("lm_head.");
  validate_model(m);
  for (std::size_t l = 0; l < man.layers; ++l)
    if (m.blocks[l].ffn_width() != man.layer_ffn[l]) throw ValidationError("manifest ffn width mismatch");
  return m;
}

inline const char* kManifestFile = "manifest.json";
inline const char* kWeightsFile = "model.bin";

inline void save_model(const std::filesystem::path& dir, const ToyTransformer& m) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
  const TensorList tensors = model_to_tensors(m);
  write_tensors(dir / kWeightsFile, tensors);
  write_text(dir / kManifestFile, make_manifest(m, tensors).to_json().dump(2) + "\n");
}

inline ToyTransformer load_model(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(dir / kManifestFile));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
  }
  return model_from_tensors(ModelManifest::from_json(j), read_tensors(dir / kWeightsFile));
}

// Token batches are stored as f32 tensors "tokens" and "targets" of shape (N, T).
inline TensorList tokens_to_tensors(const TokenBatch& b) {
  auto to_tensor = [&](const std::string& name, const std::vector<std::int32_t>& ids) {
    Tensor t{name, DType::f32, {b.n, b.t}, {}};
    for (auto id : ids) t.values.push_back(static_cast<double>(id));
    return t;
  };
  TensorList out{to_tensor("tokens", b.tokens)};
  if (!b.targets.empty()) out.push_back(to_tensor("targets", b.targets));
  return out;
}

inline TokenBatch tokens_from_tensors(const TensorList& list) {
  const Tensor& tok = find_tensor(list, "tokens");
  if (tok.dims.size() != 2) throw ValidationError("tokens tensor must be 2-D");
  TokenBatch b{tok.dims[0], tok.dims[1], {}, {}};
  auto to_ids = [](const Tensor& t) {
    std::vector<std::int32_t> ids;
    for (double v : t.values) {
      if (v != std::floor(v) || v < 0 || v > 2147483647.0) throw ValidationError("non-integer token id");
      ids.push_back(static_cast<std::int32_t>(v));
    }
    return ids;
  };
  b.tokens = to_ids(tok);
  for (const auto& t : list)
    if (t.name == "targets") {
      if (t.dims != tok.dims) throw ValidationError("targets shape != tokens shape");
      b.targets = to_ids(t);
    }
  return b;
}

inline void save_tokens(const std::filesystem::path& path, const TokenBatch& b) {
  write_tensors(path, tokens_to_tensors(b));
}

inline TokenBatch load_tokens(const std::filesystem::path& path) { return tokens_from_tensors(read_tensors(path)); }

}  // namespace prunekit
