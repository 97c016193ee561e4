#pragma once

#include <algorithm>
#include <cmath>

#include "prunekit/errors.hpp"
#include "prunekit/linalg.hpp"
#include "prunekit/model.hpp"

namespace prunekit {

/// Squared Frobenius distance between dense and reconstructed layer outputs.
inline double layer_l2_error(const Matrix& dense_out, const Matrix& pruned_out) {
  return frobenius_sq(subtract(dense_out, pruned_out));
}

inline void require_compatible(const ModelConfig& a, const ModelConfig& b) {
  if (a.vocab != b.vocab || a.max_seq != b.max_seq || a.embed_dim != b.embed_dim || a.layers != b.layers ||
      a.head_dim != b.head_dim || a.causal != b.causal)
    throw ValidationError("model configurations are incompatible");
}

/// ||logits_a - logits_b||_F / max(1e-12, ||logits_b||_F).
inline double end_to_end_deviation(const ToyTransformer& a, const ToyTransformer& b, const TokenBatch& tokens) {
  require_compatible(a.config, b.config);
  const Matrix la = forward_logits(a, tokens);
  const Matrix lb = forward_logits(b, tokens);
  return frobenius(subtract(la, lb)) / std::max(1e-12, frobenius(lb));
}

inline double eval_cross_entropy(const ToyTransformer& model, const TokenBatch& tokens) {
  return model_loss(model, tokens);
}

inline double perplexity(const ToyTransformer& model, const TokenBatch& tokens) {
  return std::exp(eval_cross_entropy(model, tokens));
}

}  // namespace prunekit
