#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ssmstyle/rng.hpp"
#include "ssmstyle/tensor.hpp"

namespace ssmstyle {

/// Finite-difference verification of every differentiable op.
///
/// Each op is reduced to a scalar with fixed random weights, s = sum(w * f),
/// and the tape gradient of s with respect to every input is compared against
/// central differences with step h. The per-element error is
///
///   |analytic - numeric| / max(|analytic|, |numeric|, floor)
///
/// where floor = max(1e-6, 1e-3 * max |numeric|, noise / tolerance) per input
/// tensor. `noise` estimates the rounding error of the central difference
/// (16 eps * sum|w * f| / 2h), so entries that are zero up to rounding, or
/// differ only within probe noise, do not dominate the relative measure.
struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::size_t instances = 20;
  double step = 1e-5;
  double tolerance = 1e-4;
  // Adds a deliberately wrong VJP ("corrupted_fixture") as a negative control.
  bool inject_fault = false;
};

struct GradcheckEntry {
  std::string module;
  std::string op;
  std::size_t instances = 0;
  double max_rel_err = 0.0;
  bool passed = false;
  std::string error;  // set when an instance threw
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  bool passed() const;
  std::vector<std::string> failing_ops() const;
};

// Modules: "all", "tensor", "ssm", "fusion", "losses". Unknown names throw an
// input error.
GradcheckReport run_gradcheck(const std::string& module, const GradcheckOptions& options = {});
const std::vector<std::string>& gradcheck_modules();

using GradFn = std::function<Tensor(Tape&, std::span<const Tensor>)>;

// Max relative error of one instance. `inputs` become requires_grad leaves.
double max_relative_error(const GradFn& fn, std::vector<Tensor> inputs, Rng& rng, double step = 1e-5,
                          double tolerance = 1e-4);

}  // namespace ssmstyle
