#pragma once

// Shared helpers for the unit tests: an independent central-difference
// oracle, random tensors and fixture paths.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ssmstyle/errors.hpp"
#include "ssmstyle/ops.hpp"
#include "ssmstyle/rng.hpp"
#include "ssmstyle/tensor.hpp"

namespace testing_support {

using ssmstyle::Rng;
using ssmstyle::Shape;
using ssmstyle::Tape;
using ssmstyle::Tensor;

// Kind of the ssmstyle::Error thrown by `f`; nullopt when nothing is thrown.
template <typename F>
std::optional<ssmstyle::ErrorKind> error_kind(F&& f) {
  try {
    f();
  } catch (const ssmstyle::Error& e) {
    return e.kind();
  }
  return std::nullopt;
}

inline std::string data_path(const std::string& name) { return std::string(SSM_TEST_DATA_DIR) + "/" + name; }

inline Tensor randn(Rng& rng, Shape shape, double stddev = 1.0, bool grad = false) {
  const std::size_t n = ssmstyle::numel(shape);
  return Tensor::from(std::move(shape), rng.normal_vector(n, stddev), grad);
}

inline Tensor randu(Rng& rng, Shape shape, double lo, double hi, bool grad = false) {
  const std::size_t n = ssmstyle::numel(shape);
  return Tensor::from(std::move(shape), rng.uniform_vector(n, lo, hi), grad);
}

inline Tensor unit_vector(Rng& rng, std::size_t d) {
  std::vector<double> v = rng.normal_vector(d, 1.0);
  double n = 0.0;
  for (double x : v) n += x * x;
  for (double& x : v) x /= std::sqrt(n);
  return Tensor::from({d}, v);
}

inline double l2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// A vector-valued function of several tensors.
using Fn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

// Max relative error between the tape gradient of s = sum(w * f(inputs)) and
// its central difference, over the inputs listed in `check` (all when empty).
// The denominator floor is max(1e-6, 1e-3 * max|numeric|, noise / 1e-4) per
// tensor, where noise = 16 eps sum|w f| / 2h bounds the rounding error of the
// probe.
inline double grad_error(const Fn& f, std::vector<Tensor> inputs, std::uint64_t seed, std::vector<std::size_t> check = {},
                         double h = 1e-5) {
  if (check.empty()) {
    for (std::size_t i = 0; i < inputs.size(); ++i) check.push_back(i);
  }
  for (auto& t : inputs) t = Tensor::from(t.shape(), t.to_vector(), false);
  for (std::size_t i : check) inputs[i].set_requires_grad(true);

  auto weighted = [&](const Tensor& out, const std::vector<double>& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * out[i];
    return s;
  };
  Tape tape;
  const Tensor out = f(tape, inputs);
  Rng rng(seed);
  const std::vector<double> w = rng.normal_vector(out.size(), 1.0);
  const Tensor wt = Tensor::from(out.shape(), w);
  tape.backward(ssmstyle::ops::sum(tape, ssmstyle::ops::mul(tape, out, wt)));
  double mag = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) mag += std::abs(w[i] * out[i]);
  const double noise = 16.0 * std::numeric_limits<double>::epsilon() * mag / (2.0 * h);

  double worst = 0.0;
  for (std::size_t i : check) {
    Tensor& x = inputs[i];
    std::vector<double> analytic(x.size(), 0.0);
    if (x.has_grad()) analytic.assign(x.grad().begin(), x.grad().end());
    std::vector<double> numeric(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) {
      auto d = x.mutable_data();
      const double orig = d[j];
      d[j] = orig + h;
      Tape t1;
      const double plus = weighted(f(t1, inputs), w);
      d[j] = orig - h;
      Tape t2;
      const double minus = weighted(f(t2, inputs), w);
      d[j] = orig;
      numeric[j] = (plus - minus) / (2.0 * h);
    }
    double scale = 0.0;
    for (double v : numeric) scale = std::max(scale, std::abs(v));
    const double floor = std::max({1e-6, 1e-3 * scale, noise / 1e-4});
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double denom = std::max({std::abs(analytic[j]), std::abs(numeric[j]), floor});
      worst = std::max(worst, std::abs(analytic[j] - numeric[j]) / denom);
    }
  }
  return worst;
}

}  // namespace testing_support
