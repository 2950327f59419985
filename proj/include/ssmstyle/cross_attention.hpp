#pragma once

#include <cstddef>
#include <vector>

#include "ssmstyle/rng.hpp"
#include "ssmstyle/tensor.hpp"

namespace ssmstyle {

// Single-head cross-attention used as the fusion baseline. The style
// embedding is lifted to `key_tokens` style tokens (one shared projection plus
// a frozen sinusoidal position table); latent tokens attend over them.
struct CrossAttentionParams {
  std::size_t channels = 0;
  std::size_t embed_dim = 0;
  std::size_t key_tokens = 0;
  std::size_t head_dim = 0;
  Tensor w_style;    // [D, C]
  Tensor positions;  // [K, C], frozen
  Tensor w_q;        // [C, head_dim]
  Tensor w_k;        // [C, head_dim]
  Tensor w_v;        // [C, C]

  static CrossAttentionParams init(std::size_t channels, std::size_t embed_dim,
                                   std::size_t key_tokens, Rng& rng);

  // Trainable tensors only.
  std::vector<Tensor> tensors() const;
};

// softmax(q k^T / sqrt(dk)) v for q [L, dk], k [K, dk], v [K, dv]. The
// backward pass recomputes attention rows from a saved log-sum-exp, so
// memory stays O(L + K).
Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v);

Tensor cross_attention_baseline(Tape& tape, const CrossAttentionParams& params,
                                const Tensor& x_seq, const Tensor& style_emb);

}  // namespace ssmstyle
