#pragma once

#include <cstddef>

#include "ssmstyle/tensor.hpp"

// Differentiable ops. Each one computes its forward value eagerly and, when
// any input requires a gradient, records its vector-Jacobian product on the
// tape. Broadcasting is limited to per-channel vectors over the trailing axis
// and to single-element scalars; any other shape mismatch is a dimension
// error.
namespace ssmstyle::ops {

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor div(Tape& tape, const Tensor& a, const Tensor& b);

Tensor add_scalar(Tape& tape, const Tensor& a, double c);
Tensor scale(Tape& tape, const Tensor& a, double c);
// a * s where s holds a single element.
Tensor scale_by(Tape& tape, const Tensor& a, const Tensor& s);

// x[..., C] (+|*) v[C]
Tensor add_channel(Tape& tape, const Tensor& x, const Tensor& v);
Tensor mul_channel(Tape& tape, const Tensor& x, const Tensor& v);

Tensor exp(Tape& tape, const Tensor& x);
Tensor sqrt(Tape& tape, const Tensor& x);
Tensor square(Tape& tape, const Tensor& x);
Tensor silu(Tape& tape, const Tensor& x);
Tensor softplus(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor tanh(Tape& tape, const Tensor& x);

Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);
Tensor dot(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sum_squares(Tape& tape, const Tensor& x);
// Euclidean norm over all elements; the gradient at zero is taken as zero.
Tensor norm(Tape& tape, const Tensor& x);

// x / ||x||. Throws a degenerate-input error for the zero vector.
Tensor l2_normalize(Tape& tape, const Tensor& x);
// Per-row normalization over the trailing axis: x / (||x|| + eps).
Tensor normalize_channels(Tape& tape, const Tensor& x, double eps = 1e-10);

// y = x W + b over the trailing axis. `b` may be undefined.
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b);

inline constexpr double kLayerNormEps = 1e-5;
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = kLayerNormEps);

// Images and feature maps are [H, W, C]; kernels are [K, K, Cin, Cout].
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
              std::size_t stride, std::size_t pad);
Tensor conv_transpose2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
                        std::size_t stride, std::size_t pad);
Tensor global_avg_pool(Tape& tape, const Tensor& x);

Tensor reshape(Tape& tape, const Tensor& x, Shape shape);
// Contiguous range of a flattened tensor, returned as a 1-D tensor.
Tensor slice(Tape& tape, const Tensor& x, std::size_t offset, std::size_t length);
// Sequence reversal along axis 0.
Tensor reverse_rows(Tape& tape, const Tensor& x);

}  // namespace ssmstyle::ops
