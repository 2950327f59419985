#include "ssmstyle/optim.hpp"

#include <cmath>

#include "ssmstyle/errors.hpp"

namespace ssmstyle {

void adam_step(std::span<Tensor> params, std::vector<AdamMoments>& moments, double lr,
               const AdamConfig& config) {
  if (moments.empty()) moments.resize(params.size());
  if (moments.size() != params.size()) raise(ErrorKind::kState, "Adam moments do not match parameter list");
  for (const Tensor& p : params) {
    for (double g : p.grad()) {
      if (!std::isfinite(g)) raise(ErrorKind::kNumeric, "non-finite gradient in Adam step");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    AdamMoments& mom = moments[i];
    const std::size_t n = p.size();
    if (mom.m.empty()) {
      mom.m.assign(n, 0.0);
      mom.v.assign(n, 0.0);
    }
    if (mom.m.size() != n) raise(ErrorKind::kState, "Adam moment shape mismatch");
    ++mom.step;
    const double t = static_cast<double>(mom.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    const auto grad = p.grad();
    auto values = p.mutable_data();
    for (std::size_t k = 0; k < n; ++k) {
      const double g = grad.empty() ? 0.0 : grad[k];
      mom.m[k] = config.beta1 * mom.m[k] + (1.0 - config.beta1) * g;
      mom.v[k] = config.beta2 * mom.v[k] + (1.0 - config.beta2) * g * g;
      const double mhat = mom.m[k] / c1;
      const double vhat = mom.v[k] / c2;
      values[k] -= lr * mhat / (std::sqrt(vhat) + config.eps);
    }
  }
}

void rescale_moments(std::vector<AdamMoments>& moments, double factor) {
  for (auto& mo : moments) {
    for (double& m : mo.m) m *= factor;
    for (double& v : mo.v) v *= factor * factor;
  }
}

}  // namespace ssmstyle
