#include "ssmstyle/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ssmstyle/errors.hpp"
#include "ssmstyle/ops.hpp"
#include "ssmstyle/rng.hpp"

namespace ssmstyle {
namespace {

void require_embedding(const Tensor& e, const PromptContext& ctx, const char* what) {
  if (e.shape() != ctx.t_dir.shape()) {
    raise(ErrorKind::kDimension, std::string(what) + " " + shape_str(e.shape()) + " vs text direction " +
                                     shape_str(ctx.t_dir.shape()));
  }
}

void require_t_dir(const PromptContext& ctx) {
  if (!(ctx.t_dir_norm > 1e-8)) {
    raise(ErrorKind::kDegeneratePrompt, "target prompt embedding equals the source prompt embedding");
  }
}

Tensor zero_scalar() { return Tensor::scalar(0.0); }

}  // namespace

PromptContext PromptContext::make(const Tensor& t_emb, const Tensor& t_src_emb, const Tensor& x_emb) {
  if (t_emb.shape() != t_src_emb.shape() || t_emb.shape() != x_emb.shape() || t_emb.rank() != 1) {
    raise(ErrorKind::kDimension, "prompt context embeddings must share one [D] shape");
  }
  PromptContext ctx;
  ctx.t_emb = t_emb.detach();
  ctx.t_src_emb = t_src_emb.detach();
  ctx.x_emb = x_emb.detach();
  std::vector<double> dir(t_emb.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < dir.size(); ++i) {
    dir[i] = t_emb[i] - t_src_emb[i];
    sq += dir[i] * dir[i];
  }
  ctx.t_dir = Tensor::from(t_emb.shape(), std::move(dir));
  ctx.t_dir_norm = std::sqrt(sq);
  require_t_dir(ctx);
  return ctx;
}

std::size_t PatchMask::dropped() const {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{0}));
}

PatchMask sample_mask(const Shape& image_shape, std::size_t patch, double ratio, std::uint64_t seed) {
  if (image_shape.size() != 3) raise(ErrorKind::kDimension, "mask needs an [H, W, C] image shape");
  if (patch == 0 || image_shape[0] % patch != 0 || image_shape[1] % patch != 0) {
    raise(ErrorKind::kInput, "image " + shape_str(image_shape) + " is not divisible into " +
                                 std::to_string(patch) + "x" + std::to_string(patch) + " patches");
  }
  if (!(ratio >= 0.0 && ratio <= 1.0)) raise(ErrorKind::kConfig, "mask ratio must lie in [0, 1]");
  PatchMask mask;
  mask.patch = patch;
  mask.rows = image_shape[0] / patch;
  mask.cols = image_shape[1] / patch;
  mask.ratio = ratio;
  mask.seed = seed;
  const std::size_t total = mask.patches();
  const auto drop = static_cast<std::size_t>(std::floor(static_cast<double>(total) * ratio));
  // Partial Fisher-Yates: the first `drop` entries of the permutation are
  // the dropped patches.
  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < drop; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(total - i));
    std::swap(order[i], order[j]);
  }
  mask.keep.assign(total, 1);
  for (std::size_t i = 0; i < drop; ++i) mask.keep[order[i]] = 0;
  return mask;
}

Tensor apply_mask(Tape& tape, const Tensor& image, const PatchMask& mask) {
  if (image.rank() != 3 || image.dim(0) != mask.rows * mask.patch || image.dim(1) != mask.cols * mask.patch) {
    raise(ErrorKind::kDimension, "mask grid does not match image " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  std::vector<double> m(image.size());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double v = mask.keep[(y / mask.patch) * mask.cols + x / mask.patch] ? 1.0 : 0.0;
      for (std::size_t k = 0; k < c; ++k) m[(y * w + x) * c + k] = v;
    }
  }
  return ops::mul(tape, image, Tensor::from(image.shape(), std::move(m)));
}

Tensor apply_mask(const Tensor& image, const PatchMask& mask) {
  Tape scratch;
  return apply_mask(scratch, image.detach(), mask);
}

Tensor directional_loss(Tape& tape, const PromptContext& ctx, const Tensor& y_emb) {
  require_t_dir(ctx);
  require_embedding(y_emb, ctx, "image embedding");
  const Tensor i_dir = ops::sub(tape, y_emb, ctx.x_emb);
  double sq = 0.0;
  for (double v : i_dir.data()) sq += v * v;
  if (std::sqrt(sq) < 1e-12) return Tensor::scalar(1.0);
  const Tensor cos_num = ops::dot(tape, i_dir, ctx.t_dir);
  const Tensor cos = ops::div(tape, cos_num, ops::scale(tape, ops::norm(tape, i_dir), ctx.t_dir_norm));
  return ops::add_scalar(tape, ops::scale(tape, cos, -1.0), 1.0);
}

Tensor masked_directional_loss(Tape& tape, const PromptContext& ctx, const Tensor& y_masked_emb) {
  require_t_dir(ctx);
  require_embedding(y_masked_emb, ctx, "masked image embedding");
  const Tensor diff = ops::sub(tape, y_masked_emb, ctx.x_emb);
  return ops::scale(tape, ops::norm(tape, diff), 1.0 / ctx.t_dir_norm);
}

double alpha_shift_value(double distance, double alpha, double beta) {
  return alpha * -std::expm1(-beta * distance);
}

Tensor alpha_shift(Tape& tape, const Tensor& cur_img_emb, const Tensor& x_emb, double alpha, double beta) {
  if (alpha < 0.0 || !(beta > 0.0)) raise(ErrorKind::kConfig, "alpha_shift needs alpha >= 0 and beta > 0");
  const Tensor dist = ops::norm(tape, ops::sub(tape, cur_img_emb, x_emb));
  const Tensor decay = ops::exp(tape, ops::scale(tape, dist, -beta));
  return ops::scale(tape, ops::add_scalar(tape, ops::scale(tape, decay, -1.0), 1.0), alpha);
}

Tensor second_order_loss(Tape& tape, const PromptContext& ctx, const std::optional<Tensor>& prev_emb,
                         const Tensor& cur_emb, double alpha, double beta, SecondOrderQuotient quotient) {
  if (!prev_emb.has_value()) raise(ErrorKind::kState, "second-order loss needs the previous epoch's embedding");
  require_t_dir(ctx);
  require_embedding(cur_emb, ctx, "current image embedding");
  require_embedding(*prev_emb, ctx, "previous image embedding");
  const Tensor shift = ops::sub(tape, cur_emb, prev_emb->detach());
  Tensor ratio;
  if (quotient == SecondOrderQuotient::kNormRatio) {
    ratio = ops::scale(tape, ops::sum_squares(tape, shift), 1.0 / (ctx.t_dir_norm * ctx.t_dir_norm));
  } else {
    std::vector<double> inv(ctx.t_dir.size());
    for (std::size_t i = 0; i < inv.size(); ++i) {
      const double t = ctx.t_dir[i];
      const double clamped = std::abs(t) < kElementwiseClamp ? std::copysign(kElementwiseClamp, t) : t;
      inv[i] = 1.0 / clamped;
    }
    ratio = ops::sum_squares(tape, ops::mul(tape, shift, Tensor::from(ctx.t_dir.shape(), std::move(inv))));
  }
  return ops::mul(tape, ratio, alpha_shift(tape, cur_emb, ctx.x_emb, alpha, beta));
}

StyleLoss style_loss(Tape& tape, const PromptContext& ctx, const Tensor& y_emb, const Tensor& y_masked_emb,
                     const SecondOrderState& so_state, std::size_t epoch, const StyleTerms& terms) {
  if (so_state.interval == 0) raise(ErrorKind::kConfig, "second-order interval must be positive");
  StyleLoss out;
  out.l_dir = directional_loss(tape, ctx, y_emb);
  out.l_md = terms.masked ? masked_directional_loss(tape, ctx, y_masked_emb) : zero_scalar();
  out.total = terms.masked ? ops::add(tape, out.l_dir, out.l_md) : out.l_dir;
  out.gate_open = terms.second_order && so_state.prev_img_emb.has_value() && out.l_dir.item() < so_state.theta &&
                  epoch % so_state.interval == 0;
  if (out.gate_open) {
    out.l_so = second_order_loss(tape, ctx, so_state.prev_img_emb, y_emb, so_state.alpha, so_state.beta,
                                 so_state.quotient);
    out.total = ops::add(tape, out.total, out.l_so);
  } else {
    out.l_so = zero_scalar();
  }
  return out;
}

StyleLoss multi_prompt_style_loss(Tape& tape, std::span<const PromptContext> contexts, const Tensor& y_emb,
                                  const Tensor& y_masked_emb, const SecondOrderState& so_state, std::size_t epoch,
                                  const StyleTerms& terms) {
  if (contexts.empty()) raise(ErrorKind::kInput, "at least one prompt is required");
  if (contexts.size() == 1) return style_loss(tape, contexts[0], y_emb, y_masked_emb, so_state, epoch, terms);
  StyleLoss acc;
  const double inv = 1.0 / static_cast<double>(contexts.size());
  for (const PromptContext& ctx : contexts) {
    StyleLoss one = style_loss(tape, ctx, y_emb, y_masked_emb, so_state, epoch, terms);
    if (!acc.total.defined()) {
      acc = one;
    } else {
      acc.l_dir = ops::add(tape, acc.l_dir, one.l_dir);
      acc.l_md = ops::add(tape, acc.l_md, one.l_md);
      acc.l_so = ops::add(tape, acc.l_so, one.l_so);
      acc.total = ops::add(tape, acc.total, one.total);
      acc.gate_open = acc.gate_open || one.gate_open;
    }
  }
  acc.l_dir = ops::scale(tape, acc.l_dir, inv);
  acc.l_md = ops::scale(tape, acc.l_md, inv);
  acc.l_so = ops::scale(tape, acc.l_so, inv);
  acc.total = ops::scale(tape, acc.total, inv);
  return acc;
}

Tensor content_feature_loss(Tape& tape, const ImageFeatures& x_feats, const ImageFeatures& y_feats) {
  const Tensor l1 = ops::mean(tape, ops::square(tape, ops::sub(tape, y_feats.conv1, x_feats.conv1)));
  const Tensor l2 = ops::mean(tape, ops::square(tape, ops::sub(tape, y_feats.conv2, x_feats.conv2)));
  return ops::add(tape, l1, l2);
}

Tensor content_feature_loss(Tape& tape, const ImageEmbedder& embedder, const Tensor& x_img, const Tensor& y_img) {
  if (x_img.shape() != y_img.shape()) raise(ErrorKind::kDimension, "content loss needs equally shaped images");
  return content_feature_loss(tape, embedder.features(tape, x_img), embedder.features(tape, y_img));
}

Tensor perceptual_loss(Tape& tape, const ImageFeatures& x_feats, const ImageFeatures& y_feats) {
  auto layer = [&tape](const Tensor& fx, const Tensor& fy) {
    const Tensor diff = ops::sub(tape, ops::normalize_channels(tape, fy), ops::normalize_channels(tape, fx));
    const double sites = static_cast<double>(fx.size() / fx.shape().back());
    return ops::scale(tape, ops::sum_squares(tape, diff), 1.0 / sites);
  };
  return ops::add(tape, layer(x_feats.conv1, y_feats.conv1), layer(x_feats.conv2, y_feats.conv2));
}

Tensor perceptual_loss(Tape& tape, const ImageEmbedder& embedder, const Tensor& x_img, const Tensor& y_img) {
  if (x_img.shape() != y_img.shape()) raise(ErrorKind::kDimension, "perceptual loss needs equally shaped images");
  return perceptual_loss(tape, embedder.features(tape, x_img), embedder.features(tape, y_img));
}

Tensor total_loss(Tape& tape, const LossWeights& weights, const Tensor& style, const Tensor& lpips,
                  const Tensor& vgg) {
  if (weights.style < 0.0 || weights.lpips < 0.0 || weights.vgg < 0.0) {
    raise(ErrorKind::kConfig, "loss weights must be nonnegative");
  }
  Tensor out = ops::scale(tape, style, weights.style);
  out = ops::add(tape, out, ops::scale(tape, lpips, weights.lpips));
  return ops::add(tape, out, ops::scale(tape, vgg, weights.vgg));
}

}  // namespace ssmstyle
