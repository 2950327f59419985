#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ssmstyle/models.hpp"
#include "ssmstyle/tensor.hpp"

namespace ssmstyle {

/// Text anchors of one style prompt plus the cached content embedding.
struct PromptContext {
  Tensor t_emb;      // target prompt
  Tensor t_src_emb;  // source prompt
  Tensor x_emb;      // content image
  Tensor t_dir;      // t_emb - t_src_emb
  double t_dir_norm = 0.0;

  // Throws a degenerate-prompt error when ||t_emb - t_src_emb|| <= 1e-8.
  static PromptContext make(const Tensor& t_emb, const Tensor& t_src_emb, const Tensor& x_emb);
};

inline constexpr std::size_t kMaskPatch = 16;
inline constexpr double kMaskRatio = 0.5;

/// Patch grid over an image; exactly floor(patches * ratio) patches are
/// dropped, chosen by a seeded shuffle.
struct PatchMask {
  std::size_t patch = kMaskPatch;
  std::size_t rows = 0;
  std::size_t cols = 0;
  double ratio = kMaskRatio;
  std::uint64_t seed = 0;
  std::vector<std::uint8_t> keep;  // row-major over patches; 1 = visible

  std::size_t patches() const { return rows * cols; }
  std::size_t dropped() const;
};

PatchMask sample_mask(const Shape& image_shape, std::size_t patch, double ratio, std::uint64_t seed);
// Dropped patches are zero-filled.
Tensor apply_mask(Tape& tape, const Tensor& image, const PatchMask& mask);
Tensor apply_mask(const Tensor& image, const PatchMask& mask);

/// 1 - cos(T_dir, I_dir) with I_dir = y_emb - x_emb. When ||I_dir|| < 1e-12
/// the loss is the constant 1 and carries no gradient.
Tensor directional_loss(Tape& tape, const PromptContext& ctx, const Tensor& y_emb);

/// ||y_masked_emb - x_emb|| / ||T_dir||
Tensor masked_directional_loss(Tape& tape, const PromptContext& ctx, const Tensor& y_masked_emb);

/// alpha * (1 - exp(-beta * ||cur - x||))
Tensor alpha_shift(Tape& tape, const Tensor& cur_img_emb, const Tensor& x_emb, double alpha, double beta);
double alpha_shift_value(double distance, double alpha, double beta);

enum class SecondOrderQuotient {
  // ||cur - prev||^2 / ||T_dir||^2
  kNormRatio,
  // ||(cur - prev) / T_dir||^2 elementwise, |T_dir_i| clamped to 1e-6
  kElementwise,
};

inline constexpr double kElementwiseClamp = 1e-6;

/// Second-order gate state carried between epochs.
struct SecondOrderState {
  std::optional<Tensor> prev_img_emb;
  double alpha = 1.0;
  double beta = 1.0;
  double theta = 0.6;
  std::size_t interval = 5;
  SecondOrderQuotient quotient = SecondOrderQuotient::kNormRatio;
};

/// Quotient term times alpha_shift(cur). Throws a state error when `prev` is
/// empty.
Tensor second_order_loss(Tape& tape, const PromptContext& ctx, const std::optional<Tensor>& prev_emb,
                         const Tensor& cur_emb, double alpha, double beta,
                         SecondOrderQuotient quotient = SecondOrderQuotient::kNormRatio);

// Loss-term switches for the ablation grid.
struct StyleTerms {
  bool masked = true;
  bool second_order = true;
};

struct StyleLoss {
  Tensor l_dir;
  Tensor l_md;   // constant 0 when disabled
  Tensor l_so;   // applied value; constant 0 when the gate is closed
  Tensor total;  // l_dir + l_md (+ l_so)
  bool gate_open = false;
};

/// L_dir + L_md + [L_dir < theta and epoch % interval == 0 and prev exists] L_so
StyleLoss style_loss(Tape& tape, const PromptContext& ctx, const Tensor& y_emb, const Tensor& y_masked_emb,
                     const SecondOrderState& so_state, std::size_t epoch, const StyleTerms& terms = {});

/// Arithmetic mean of style_loss over the prompts (components averaged the
/// same way). Throws an input error for an empty list.
StyleLoss multi_prompt_style_loss(Tape& tape, std::span<const PromptContext> contexts, const Tensor& y_emb,
                                  const Tensor& y_masked_emb, const SecondOrderState& so_state,
                                  std::size_t epoch, const StyleTerms& terms = {});

/// Sum over the embedder's two conv feature maps of the mean squared
/// difference.
Tensor content_feature_loss(Tape& tape, const ImageFeatures& x_feats, const ImageFeatures& y_feats);
Tensor content_feature_loss(Tape& tape, const ImageEmbedder& embedder, const Tensor& x_img, const Tensor& y_img);

/// Sum over feature maps of the per-site mean of ||n(f_x) - n(f_y)||^2, where
/// n normalizes each site's channel vector.
Tensor perceptual_loss(Tape& tape, const ImageFeatures& x_feats, const ImageFeatures& y_feats);
Tensor perceptual_loss(Tape& tape, const ImageEmbedder& embedder, const Tensor& x_img, const Tensor& y_img);

struct LossWeights {
  double style = 1.0;
  double lpips = 1.0;
  double vgg = 9000.0;
};

/// style * L_style + lpips * L_lpips + vgg * L_vgg. Negative weights are a
/// config error.
Tensor total_loss(Tape& tape, const LossWeights& weights, const Tensor& style, const Tensor& lpips,
                  const Tensor& vgg);

}  // namespace ssmstyle
