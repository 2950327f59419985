#pragma once

#include <cstddef>
#include <vector>

#include "ssmstyle/cross_attention.hpp"
#include "ssmstyle/ssm.hpp"
#include "ssmstyle/tensor.hpp"

namespace ssmstyle {

/// Per-channel conditioning vectors produced from a style embedding. All five
/// have shape [C] and broadcast over tokens.
struct ModulationParams {
  Tensor alpha1;
  Tensor mu1;
  Tensor sigma1;
  Tensor alpha2;
  Tensor sigma2;
};

/// Latent feature map flattened to tokens in row-major raster order.
struct LatentSequence {
  Tensor tokens;  // [H*W, C]
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t length() const { return height * width; }
  std::size_t channels() const { return tokens.dim(1); }
};

LatentSequence flatten_grid(const Tensor& feature_map);
Tensor unflatten_grid(const LatentSequence& latent);
// Tape-recorded forms, for use inside a differentiable pipeline.
LatentSequence flatten_grid(Tape& tape, const Tensor& feature_map);
Tensor unflatten_grid(Tape& tape, const LatentSequence& latent);

// Linear map from a D-dim style embedding to the 5C modulation entries.
// Zero-initialized, so a fresh conditioner emits all-zero modulations.
struct Conditioner {
  Tensor weight;  // [D, 5C]
  Tensor bias;    // [5C]
  std::size_t channels = 0;

  static Conditioner zero_init(std::size_t embed_dim, std::size_t channels);
  // Zero weights, mu1 bias 1, everything else 0. The block still starts at
  // LN(x) (alpha1 = 0 gates the mixer), but alpha1 receives a gradient, which
  // the all-zero start cannot provide since alpha1 and mu1 multiply.
  static Conditioner open_gate_init(std::size_t embed_dim, std::size_t channels);
  std::vector<Tensor> tensors() const { return {weight, bias}; }
};

// Requires a unit-norm style embedding (1e-6 tolerance).
ModulationParams condition(Tape& tape, const Conditioner& conditioner, const Tensor& style_emb);

enum class FusionKind { kSsm, kCrossAttention };

/// Fusion block parameters: the two layer norms of the block plus the token
/// mixer (selective SSM, or cross-attention for the baseline).
struct FusionBlock {
  FusionKind kind = FusionKind::kSsm;
  std::size_t channels = 0;
  Tensor ln_in_gain, ln_in_bias;
  Tensor ln_out_gain, ln_out_bias;
  SsmParams ssm;
  SsmOptions ssm_options;
  CrossAttentionParams attention;

  static FusionBlock init_ssm(std::size_t channels, std::size_t state_dim, const SsmOptions& options,
                              Rng& rng);
  static FusionBlock init_cross_attention(std::size_t channels, std::size_t embed_dim,
                                          std::size_t key_tokens, Rng& rng);

  std::vector<Tensor> tensors() const;
};

/// M = LN(x + alpha1 * Mix(LN(x)) * mu1 + sigma1) + alpha2 + sigma2
///
/// Mix is the selective SSM (or cross-attention against `style_emb` for the
/// baseline); every product is per channel and broadcast over tokens.
LatentSequence fuse(Tape& tape, const LatentSequence& latent, const ModulationParams& mods,
                    const FusionBlock& block, const Tensor& style_emb = {});

// SSM fusion with unit layer-norm affines.
LatentSequence fuse(Tape& tape, const LatentSequence& latent, const ModulationParams& mods,
                    const SsmParams& ssm, const SsmOptions& options = {});

}  // namespace ssmstyle
