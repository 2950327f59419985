#include "ssmstyle/fusion.hpp"

#include <cmath>

#include "ssmstyle/errors.hpp"
#include "ssmstyle/ops.hpp"

namespace ssmstyle {

LatentSequence flatten_grid(const Tensor& feature_map) {
  Tape scratch;
  return flatten_grid(scratch, feature_map.detach());
}

Tensor unflatten_grid(const LatentSequence& latent) {
  Tape scratch;
  LatentSequence plain{latent.tokens.detach(), latent.height, latent.width};
  return unflatten_grid(scratch, plain);
}

LatentSequence flatten_grid(Tape& tape, const Tensor& feature_map) {
  if (feature_map.rank() != 3) {
    raise(ErrorKind::kDimension, "flatten_grid expects [H, W, C], got " + shape_str(feature_map.shape()));
  }
  const std::size_t h = feature_map.dim(0), w = feature_map.dim(1), c = feature_map.dim(2);
  // [H, W, C] row-major already is raster order over (row, column).
  return {ops::reshape(tape, feature_map, {h * w, c}), h, w};
}

Tensor unflatten_grid(Tape& tape, const LatentSequence& latent) {
  if (latent.tokens.rank() != 2 || latent.tokens.dim(0) != latent.height * latent.width) {
    raise(ErrorKind::kDimension, "grid " + std::to_string(latent.height) + "x" + std::to_string(latent.width) +
                                     " does not match tokens " + shape_str(latent.tokens.shape()));
  }
  return ops::reshape(tape, latent.tokens, {latent.height, latent.width, latent.tokens.dim(1)});
}

Conditioner Conditioner::zero_init(std::size_t embed_dim, std::size_t channels) {
  Conditioner c;
  c.channels = channels;
  c.weight = Tensor::zeros({embed_dim, 5 * channels}, true);
  c.bias = Tensor::zeros({5 * channels}, true);
  return c;
}

Conditioner Conditioner::open_gate_init(std::size_t embed_dim, std::size_t channels) {
  Conditioner c = zero_init(embed_dim, channels);
  auto b = c.bias.mutable_data();
  for (std::size_t i = channels; i < 2 * channels; ++i) b[i] = 1.0;
  return c;
}

ModulationParams condition(Tape& tape, const Conditioner& conditioner, const Tensor& style_emb) {
  if (style_emb.rank() != 1 || style_emb.dim(0) != conditioner.weight.dim(0)) {
    raise(ErrorKind::kDimension, "style embedding " + shape_str(style_emb.shape()) + " vs conditioner " +
                                     shape_str(conditioner.weight.shape()));
  }
  double sq = 0.0;
  for (double v : style_emb.data()) sq += v * v;
  if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) raise(ErrorKind::kContract, "style embedding must be unit-norm");

  const std::size_t c = conditioner.channels;
  const Tensor row = ops::reshape(tape, style_emb, {1, style_emb.dim(0)});
  const Tensor all = ops::reshape(tape, ops::linear(tape, row, conditioner.weight, conditioner.bias), {5 * c});
  return {ops::slice(tape, all, 0, c), ops::slice(tape, all, c, c), ops::slice(tape, all, 2 * c, c),
          ops::slice(tape, all, 3 * c, c), ops::slice(tape, all, 4 * c, c)};
}

FusionBlock FusionBlock::init_ssm(std::size_t channels, std::size_t state_dim, const SsmOptions& options,
                                  Rng& rng) {
  FusionBlock b;
  b.kind = FusionKind::kSsm;
  b.channels = channels;
  b.ln_in_gain = Tensor::full({channels}, 1.0, true);
  b.ln_in_bias = Tensor::zeros({channels}, true);
  b.ln_out_gain = Tensor::full({channels}, 1.0, true);
  b.ln_out_bias = Tensor::zeros({channels}, true);
  b.ssm = SsmParams::init(channels, state_dim, rng);
  b.ssm_options = options;
  return b;
}

FusionBlock FusionBlock::init_cross_attention(std::size_t channels, std::size_t embed_dim,
                                              std::size_t key_tokens, Rng& rng) {
  FusionBlock b;
  b.kind = FusionKind::kCrossAttention;
  b.channels = channels;
  b.ln_in_gain = Tensor::full({channels}, 1.0, true);
  b.ln_in_bias = Tensor::zeros({channels}, true);
  b.ln_out_gain = Tensor::full({channels}, 1.0, true);
  b.ln_out_bias = Tensor::zeros({channels}, true);
  b.attention = CrossAttentionParams::init(channels, embed_dim, key_tokens, rng);
  return b;
}

std::vector<Tensor> FusionBlock::tensors() const {
  std::vector<Tensor> out{ln_in_gain, ln_in_bias, ln_out_gain, ln_out_bias};
  const auto mixer = kind == FusionKind::kSsm ? ssm.tensors() : attention.tensors();
  out.insert(out.end(), mixer.begin(), mixer.end());
  return out;
}

LatentSequence fuse(Tape& tape, const LatentSequence& latent, const ModulationParams& mods,
                    const FusionBlock& block, const Tensor& style_emb) {
  const Tensor& x = latent.tokens;
  if (x.rank() != 2 || x.dim(1) != block.channels) {
    raise(ErrorKind::kDimension, "fusion input " + shape_str(x.shape()) + " vs channels " +
                                     std::to_string(block.channels));
  }
  const Tensor normed = ops::layer_norm(tape, x, block.ln_in_gain, block.ln_in_bias);
  Tensor mixed;
  if (block.kind == FusionKind::kSsm) {
    mixed = ssm_block(tape, block.ssm, normed, block.ssm_options);
  } else {
    if (!style_emb.defined()) raise(ErrorKind::kContract, "cross-attention fusion needs a style embedding");
    mixed = cross_attention_baseline(tape, block.attention, normed, style_emb);
  }
  Tensor branch = ops::mul_channel(tape, ops::mul_channel(tape, mixed, mods.alpha1), mods.mu1);
  branch = ops::add_channel(tape, ops::add(tape, x, branch), mods.sigma1);
  Tensor m = ops::layer_norm(tape, branch, block.ln_out_gain, block.ln_out_bias);
  m = ops::add_channel(tape, ops::add_channel(tape, m, mods.alpha2), mods.sigma2);
  return {m, latent.height, latent.width};
}

LatentSequence fuse(Tape& tape, const LatentSequence& latent, const ModulationParams& mods,
                    const SsmParams& ssm, const SsmOptions& options) {
  FusionBlock block;
  block.kind = FusionKind::kSsm;
  block.channels = ssm.channels;
  block.ln_in_gain = Tensor::full({ssm.channels}, 1.0);
  block.ln_in_bias = Tensor::zeros({ssm.channels});
  block.ln_out_gain = Tensor::full({ssm.channels}, 1.0);
  block.ln_out_bias = Tensor::zeros({ssm.channels});
  block.ssm = ssm;
  block.ssm_options = options;
  return fuse(tape, latent, mods, block);
}

}  // namespace ssmstyle
