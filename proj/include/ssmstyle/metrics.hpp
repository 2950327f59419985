#pragma once

#include <map>
#include <string>

#include "ssmstyle/models.hpp"
#include "ssmstyle/tensor.hpp"

namespace ssmstyle {

struct EvalReport {
  double clip_score_analog = 0.0;
  double ssim = 0.0;
  double feature_loss = 0.0;
  std::map<std::string, double> wall_time_ms;

  std::string to_json() const;
};

// Cosine of two unit-norm embeddings; non-unit inputs are a contract error.
double similarity_score(const Tensor& t_emb, const Tensor& y_emb);

enum class SsimMode {
  kLuma,            // 0.299 R + 0.587 G + 0.114 B
  kChannelwiseMean  // mean of per-channel SSIM
};

// Mean local SSIM over an 11x11 Gaussian window (sigma 1.5, valid region),
// K1 = 0.01, K2 = 0.03, dynamic range 1. Images smaller than the window use
// the largest odd window that fits.
double ssim(const Tensor& x_img, const Tensor& y_img, SsimMode mode = SsimMode::kLuma);

// Same computation as the content feature loss.
double feature_loss_metric(const ImageEmbedder& embedder, const Tensor& x_img, const Tensor& y_img);

}  // namespace ssmstyle
