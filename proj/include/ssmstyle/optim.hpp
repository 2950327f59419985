#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ssmstyle/tensor.hpp"

namespace ssmstyle {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moment estimates of one parameter tensor.
struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

// One bias-corrected Adam update of every tensor in `params`, reading their
// accumulated gradients (absent gradients count as zero). `moments` is
// resized on first use. A non-finite gradient throws a numeric error before
// any parameter is touched.
void adam_step(std::span<Tensor> params, std::vector<AdamMoments>& moments, double lr,
               const AdamConfig& config = {});

// Moments as they would stand had every past gradient been scaled by
// `factor`: m *= factor, v *= factor^2. Used when a loss weight drops.
void rescale_moments(std::vector<AdamMoments>& moments, double factor);

}  // namespace ssmstyle
