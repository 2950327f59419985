#include "ssmstyle/ops.hpp"

#include <cmath>
#include <string>

#include "ssmstyle/errors.hpp"

namespace ssmstyle::ops {
namespace {

using ImplPtr = std::shared_ptr<Tensor::Impl>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    raise(ErrorKind::kDimension, std::string(op) + ": shape " + shape_str(a.shape()) +
                                     " vs " + shape_str(b.shape()));
  }
}

std::size_t trailing_channels(const Tensor& x, const Tensor& v, const char* op) {
  if (v.rank() != 1 || x.shape().back() != v.dim(0)) {
    raise(ErrorKind::kDimension, std::string(op) + ": channel vector " + shape_str(v.shape()) +
                                     " does not match trailing axis of " + shape_str(x.shape()));
  }
  return v.dim(0);
}

// Elementwise unary op. `deriv(x, y)` returns dy/dx.
template <typename F, typename D>
Tensor unary(Tape& tape, const Tensor& x, const char* name, F fwd, D deriv) {
  const auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  Tensor y = make_op_result(tape, x.shape(), std::move(out), {&x}, name);
  if (y.requires_grad()) {
    tape.record([xi = x.impl(), yi = y.impl(), deriv] {
      if (yi->grad.empty()) return;
      double* gx = grad_sink(xi);
      if (!gx) return;
      for (std::size_t i = 0; i < xi->data.size(); ++i) {
        gx[i] += yi->grad[i] * deriv(xi->data[i], yi->data[i]);
      }
    });
  }
  return y;
}

double sigmoid_value(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

Tensor reduce_to_scalar(Tape& tape, const Tensor& x, double value, const char* name,
                        void (*vjp)(const ImplPtr&, double, double*)) {
  Tensor y = make_op_result(tape, {1}, {value}, {&x}, name);
  if (y.requires_grad()) {
    tape.record([xi = x.impl(), yi = y.impl(), vjp] {
      if (yi->grad.empty()) return;
      if (double* gx = grad_sink(xi)) vjp(xi, yi->grad[0], gx);
    });
  }
  return y;
}

}  // namespace

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor y = make_op_result(tape, a.shape(), std::move(out), {&a, &b}, "add");
  if (y.requires_grad()) {
    tape.record([ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      if (double* g = grad_sink(ai)) for (std::size_t i = 0; i < yi->grad.size(); ++i) g[i] += yi->grad[i];
      if (double* g = grad_sink(bi)) for (std::size_t i = 0; i < yi->grad.size(); ++i) g[i] += yi->grad[i];
    });
  }
  return y;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  Tensor y = make_op_result(tape, a.shape(), std::move(out), {&a, &b}, "sub");
  if (y.requires_grad()) {
    tape.record([ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      if (double* g = grad_sink(ai)) for (std::size_t i = 0; i < yi->grad.size(); ++i) g[i] += yi->grad[i];
      if (double* g = grad_sink(bi)) for (std::size_t i = 0; i < yi->grad.size(); ++i) g[i] -= yi->grad[i];
    });
  }
  return y;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor y = make_op_result(tape, a.shape(), std::move(out), {&a, &b}, "mul");
  if (y.requires_grad()) {
    tape.record([ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      const auto n = yi->grad.size();
      if (double* g = grad_sink(ai)) for (std::size_t i = 0; i < n; ++i) g[i] += yi->grad[i] * bi->data[i];
      if (double* g = grad_sink(bi)) for (std::size_t i = 0; i < n; ++i) g[i] += yi->grad[i] * ai->data[i];
    });
  }
  return y;
}

Tensor div(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (b[i] == 0.0) raise(ErrorKind::kNumeric, "div: division by zero");
    out[i] = a[i] / b[i];
  }
  Tensor y = make_op_result(tape, a.shape(), std::move(out), {&a, &b}, "div");
  if (y.requires_grad()) {
    tape.record([ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      const auto n = yi->grad.size();
      if (double* g = grad_sink(ai)) for (std::size_t i = 0; i < n; ++i) g[i] += yi->grad[i] / bi->data[i];
      if (double* g = grad_sink(bi)) {
        for (std::size_t i = 0; i < n; ++i) g[i] -= yi->grad[i] * yi->data[i] / bi->data[i];
      }
    });
  }
  return y;
}

Tensor add_scalar(Tape& tape, const Tensor& a, double c) {
  return unary(tape, a, "add_scalar", [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor scale(Tape& tape, const Tensor& a, double c) {
  return unary(tape, a, "scale", [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor scale_by(Tape& tape, const Tensor& a, const Tensor& s) {
  if (s.size() != 1) raise(ErrorKind::kDimension, "scale_by: scale must hold one element");
  const double sv = s[0];
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * sv;
  Tensor y = make_op_result(tape, a.shape(), std::move(out), {&a, &s}, "scale_by");
  if (y.requires_grad()) {
    tape.record([ai = a.impl(), si = s.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      const auto n = yi->grad.size();
      if (double* g = grad_sink(ai)) for (std::size_t i = 0; i < n; ++i) g[i] += yi->grad[i] * si->data[0];
      if (double* g = grad_sink(si)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += yi->grad[i] * ai->data[i];
        g[0] += acc;
      }
    });
  }
  return y;
}

Tensor add_channel(Tape& tape, const Tensor& x, const Tensor& v) {
  const auto c = trailing_channels(x, v, "add_channel");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + v[i % c];
  Tensor y = make_op_result(tape, x.shape(), std::move(out), {&x, &v}, "add_channel");
  if (y.requires_grad()) {
    tape.record([xi = x.impl(), vi = v.impl(), yi = y.impl(), c] {
      if (yi->grad.empty()) return;
      const auto n = yi->grad.size();
      if (double* g = grad_sink(xi)) for (std::size_t i = 0; i < n; ++i) g[i] += yi->grad[i];
      if (double* g = grad_sink(vi)) for (std::size_t i = 0; i < n; ++i) g[i % c] += yi->grad[i];
    });
  }
  return y;
}

Tensor mul_channel(Tape& tape, const Tensor& x, const Tensor& v) {
  const auto c = trailing_channels(x, v, "mul_channel");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * v[i % c];
  Tensor y = make_op_result(tape, x.shape(), std::move(out), {&x, &v}, "mul_channel");
  if (y.requires_grad()) {
    tape.record([xi = x.impl(), vi = v.impl(), yi = y.impl(), c] {
      if (yi->grad.empty()) return;
      const auto n = yi->grad.size();
      if (double* g = grad_sink(xi)) for (std::size_t i = 0; i < n; ++i) g[i] += yi->grad[i] * vi->data[i % c];
      if (double* g = grad_sink(vi)) for (std::size_t i = 0; i < n; ++i) g[i % c] += yi->grad[i] * xi->data[i];
    });
  }
  return y;
}

Tensor exp(Tape& tape, const Tensor& x) {
  return unary(tape, x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor sqrt(Tape& tape, const Tensor& x) {
  for (double v : x.data()) {
    if (v <= 0.0) raise(ErrorKind::kDegenerateInput, "sqrt of non-positive value");
  }
  return unary(tape, x, "sqrt", [](double v) { return std::sqrt(v); },
               [](double, double y) { return 0.5 / y; });
}

Tensor square(Tape& tape, const Tensor& x) {
  return unary(tape, x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor silu(Tape& tape, const Tensor& x) {
  return unary(
      tape, x, "silu", [](double v) { return v * sigmoid_value(v); },
      [](double v, double) {
        const double s = sigmoid_value(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor softplus(Tape& tape, const Tensor& x) {
  return unary(
      tape, x, "softplus",
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return sigmoid_value(v); });
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
  return unary(tape, x, "sigmoid", sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(Tape& tape, const Tensor& x) {
  return unary(tape, x, "tanh", [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor sum(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return reduce_to_scalar(tape, x, acc, "sum", [](const ImplPtr& xi, double g, double* gx) {
    for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += g;
  });
}

Tensor mean(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return reduce_to_scalar(tape, x, acc / static_cast<double>(x.size()), "mean",
                          [](const ImplPtr& xi, double g, double* gx) {
                            const double s = g / static_cast<double>(xi->data.size());
                            for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += s;
                          });
}

Tensor dot(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  Tensor y = make_op_result(tape, {1}, {acc}, {&a, &b}, "dot");
  if (y.requires_grad()) {
    tape.record([ai = a.impl(), bi = b.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      const double g = yi->grad[0];
      if (double* ga = grad_sink(ai)) for (std::size_t i = 0; i < ai->data.size(); ++i) ga[i] += g * bi->data[i];
      if (double* gb = grad_sink(bi)) for (std::size_t i = 0; i < bi->data.size(); ++i) gb[i] += g * ai->data[i];
    });
  }
  return y;
}

Tensor sum_squares(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v * v;
  return reduce_to_scalar(tape, x, acc, "sum_squares", [](const ImplPtr& xi, double g, double* gx) {
    for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += 2.0 * g * xi->data[i];
  });
}

Tensor norm(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v * v;
  Tensor y = make_op_result(tape, {1}, {std::sqrt(acc)}, {&x}, "norm");
  if (y.requires_grad()) {
    tape.record([xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      const double n = yi->data[0];
      if (n == 0.0) return;
      if (double* gx = grad_sink(xi)) {
        const double s = yi->grad[0] / n;
        for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += s * xi->data[i];
      }
    });
  }
  return y;
}

Tensor l2_normalize(Tape& tape, const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v * v;
  const double n = std::sqrt(acc);
  if (!(n > 0.0)) raise(ErrorKind::kDegenerateInput, "l2_normalize of a zero vector");
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / n;
  Tensor y = make_op_result(tape, x.shape(), std::move(out), {&x}, "l2_normalize");
  if (y.requires_grad()) {
    tape.record([xi = x.impl(), yi = y.impl(), n] {
      if (yi->grad.empty()) return;
      double* gx = grad_sink(xi);
      if (!gx) return;
      double proj = 0.0;
      for (std::size_t i = 0; i < yi->data.size(); ++i) proj += yi->data[i] * yi->grad[i];
      for (std::size_t i = 0; i < yi->data.size(); ++i) {
        gx[i] += (yi->grad[i] - yi->data[i] * proj) / n;
      }
    });
  }
  return y;
}

Tensor normalize_channels(Tape& tape, const Tensor& x, double eps) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  std::vector<double> out(x.size());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t k = 0; k < c; ++k) acc += x[r * c + k] * x[r * c + k];
    norms[r] = std::sqrt(acc);
    const double denom = norms[r] + eps;
    for (std::size_t k = 0; k < c; ++k) out[r * c + k] = x[r * c + k] / denom;
  }
  Tensor y = make_op_result(tape, x.shape(), std::move(out), {&x}, "normalize_channels");
  if (y.requires_grad()) {
    tape.record([xi = x.impl(), yi = y.impl(), norms = std::move(norms), c, rows, eps] {
      if (yi->grad.empty()) return;
      double* gx = grad_sink(xi);
      if (!gx) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const double s = norms[r];
        const double denom = s + eps;
        const double* g = yi->grad.data() + r * c;
        const double* xv = xi->data.data() + r * c;
        double gdotx = 0.0;
        for (std::size_t k = 0; k < c; ++k) gdotx += g[k] * xv[k];
        const double coef = s > 0.0 ? gdotx / (denom * denom * s) : 0.0;
        for (std::size_t k = 0; k < c; ++k) gx[r * c + k] += g[k] / denom - coef * xv[k];
      }
    });
  }
  return y;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || x.shape().back() != w.dim(0)) {
    raise(ErrorKind::kDimension, "linear: input " + shape_str(x.shape()) + " vs weight " +
                                     shape_str(w.shape()));
  }
  const std::size_t in = w.dim(0);
  const std::size_t outd = w.dim(1);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != outd)) {
    raise(ErrorKind::kDimension, "linear: bias " + shape_str(b.shape()) + " vs " + std::to_string(outd));
  }
  const std::size_t rows = x.size() / in;
  std::vector<double> out(rows * outd, 0.0);
  const auto xs = x.data();
  const auto ws = w.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * outd;
    if (b.defined()) for (std::size_t j = 0; j < outd; ++j) o[j] = b[j];
    for (std::size_t k = 0; k < in; ++k) {
      const double xv = xs[r * in + k];
      const double* wr = ws.data() + k * outd;
      for (std::size_t j = 0; j < outd; ++j) o[j] += xv * wr[j];
    }
  }
  Shape shape = x.shape();
  shape.back() = outd;
  Tensor y = make_op_result(tape, std::move(shape), std::move(out), {&x, &w, &b}, "linear");
  if (y.requires_grad()) {
    ImplPtr bi = b.defined() ? b.impl() : nullptr;
    tape.record([xi = x.impl(), wi = w.impl(), bi, yi = y.impl(), rows, in, outd] {
      if (yi->grad.empty()) return;
      const double* gy = yi->grad.data();
      if (double* gx = grad_sink(xi)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t k = 0; k < in; ++k) {
            const double* wr = wi->data.data() + k * outd;
            double acc = 0.0;
            for (std::size_t j = 0; j < outd; ++j) acc += gy[r * outd + j] * wr[j];
            gx[r * in + k] += acc;
          }
        }
      }
      if (double* gw = grad_sink(wi)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t k = 0; k < in; ++k) {
            const double xv = xi->data[r * in + k];
            double* gwr = gw + k * outd;
            for (std::size_t j = 0; j < outd; ++j) gwr[j] += xv * gy[r * outd + j];
          }
        }
      }
      if (bi) {
        if (double* gb = grad_sink(bi)) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < outd; ++j) gb[j] += gy[r * outd + j];
        }
      }
    });
  }
  return y;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t c = x.shape().back();
  if (c < 2) raise(ErrorKind::kDimension, "layer_norm needs at least 2 features, got " + std::to_string(c));
  if (!(eps > 0.0)) raise(ErrorKind::kContract, "layer_norm eps must be positive");
  trailing_channels(x, gain, "layer_norm gain");
  trailing_channels(x, bias, "layer_norm bias");
  const std::size_t rows = x.size() / c;
  std::vector<double> xhat(x.size());
  std::vector<double> rstd(rows);
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xv = x.data().data() + r * c;
    double mu = 0.0;
    for (std::size_t k = 0; k < c; ++k) mu += xv[k];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t k = 0; k < c; ++k) var += (xv[k] - mu) * (xv[k] - mu);
    var /= static_cast<double>(c);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t k = 0; k < c; ++k) {
      xhat[r * c + k] = (xv[k] - mu) * rstd[r];
      out[r * c + k] = gain[k] * xhat[r * c + k] + bias[k];
    }
  }
  Tensor y = make_op_result(tape, x.shape(), std::move(out), {&x, &gain, &bias}, "layer_norm");
  if (y.requires_grad()) {
    tape.record([xi = x.impl(), gi = gain.impl(), bi = bias.impl(), yi = y.impl(),
                 xhat = std::move(xhat), rstd = std::move(rstd), rows, c] {
      if (yi->grad.empty()) return;
      const double* gy = yi->grad.data();
      if (double* gx = grad_sink(xi)) {
        std::vector<double> gxh(c);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t k = 0; k < c; ++k) {
            gxh[k] = gy[r * c + k] * gi->data[k];
            m1 += gxh[k];
            m2 += gxh[k] * xhat[r * c + k];
          }
          m1 /= static_cast<double>(c);
          m2 /= static_cast<double>(c);
          for (std::size_t k = 0; k < c; ++k) {
            gx[r * c + k] += rstd[r] * (gxh[k] - m1 - xhat[r * c + k] * m2);
          }
        }
      }
      if (double* gg = grad_sink(gi)) {
        for (std::size_t i = 0; i < rows * c; ++i) gg[i % c] += gy[i] * xhat[i];
      }
      if (double* gb = grad_sink(bi)) {
        for (std::size_t i = 0; i < rows * c; ++i) gb[i % c] += gy[i];
      }
    });
  }
  return y;
}

namespace {

struct ConvGeometry {
  std::size_t h, w, cin, k, cout, oh, ow;
};

ConvGeometry check_conv(const Tensor& x, const Tensor& w, const Tensor& b, const char* op) {
  if (x.rank() != 3 || w.rank() != 4 || w.dim(0) != w.dim(1) || w.dim(2) != x.dim(2)) {
    raise(ErrorKind::kDimension, std::string(op) + ": input " + shape_str(x.shape()) + " vs kernel " +
                                     shape_str(w.shape()));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(3))) {
    raise(ErrorKind::kDimension, std::string(op) + ": bias " + shape_str(b.shape()));
  }
  return {x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(3), 0, 0};
}

}  // namespace

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t pad) {
  auto g = check_conv(x, w, b, "conv2d");
  if (stride == 0 || g.h + 2 * pad < g.k || g.w + 2 * pad < g.k) {
    raise(ErrorKind::kDimension, "conv2d: kernel larger than padded input");
  }
  g.oh = (g.h + 2 * pad - g.k) / stride + 1;
  g.ow = (g.w + 2 * pad - g.k) / stride + 1;
  std::vector<double> out(g.oh * g.ow * g.cout, 0.0);
  const double* xs = x.data().data();
  const double* ws = w.data().data();
  for (std::size_t oy = 0; oy < g.oh; ++oy) {
    for (std::size_t ox = 0; ox < g.ow; ++ox) {
      double* o = out.data() + (oy * g.ow + ox) * g.cout;
      if (b.defined()) for (std::size_t co = 0; co < g.cout; ++co) o[co] = b[co];
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
          const double* xp = xs + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin;
          const double* wp = ws + (ky * g.k + kx) * g.cin * g.cout;
          for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const double xv = xp[ci];
            const double* wr = wp + ci * g.cout;
            for (std::size_t co = 0; co < g.cout; ++co) o[co] += xv * wr[co];
          }
        }
      }
    }
  }
  Tensor y = make_op_result(tape, {g.oh, g.ow, g.cout}, std::move(out), {&x, &w, &b}, "conv2d");
  if (y.requires_grad()) {
    ImplPtr bi = b.defined() ? b.impl() : nullptr;
    tape.record([xi = x.impl(), wi = w.impl(), bi, yi = y.impl(), g, stride, pad] {
      if (yi->grad.empty()) return;
      double* gx = grad_sink(xi);
      double* gw = grad_sink(wi);
      double* gb = bi ? grad_sink(bi) : nullptr;
      const double* gy = yi->grad.data();
      for (std::size_t oy = 0; oy < g.oh; ++oy) {
        for (std::size_t ox = 0; ox < g.ow; ++ox) {
          const double* go = gy + (oy * g.ow + ox) * g.cout;
          if (gb) for (std::size_t co = 0; co < g.cout; ++co) gb[co] += go[co];
          for (std::size_t ky = 0; ky < g.k; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (std::size_t kx = 0; kx < g.k; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              const std::size_t xoff = (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.cin;
              const std::size_t woff = (ky * g.k + kx) * g.cin * g.cout;
              for (std::size_t ci = 0; ci < g.cin; ++ci) {
                const double* wr = wi->data.data() + woff + ci * g.cout;
                if (gx) {
                  double acc = 0.0;
                  for (std::size_t co = 0; co < g.cout; ++co) acc += go[co] * wr[co];
                  gx[xoff + ci] += acc;
                }
                if (gw) {
                  const double xv = xi->data[xoff + ci];
                  double* gwr = gw + woff + ci * g.cout;
                  for (std::size_t co = 0; co < g.cout; ++co) gwr[co] += xv * go[co];
                }
              }
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor conv_transpose2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
                        std::size_t stride, std::size_t pad) {
  auto g = check_conv(x, w, b, "conv_transpose2d");
  if (stride == 0 || (g.h - 1) * stride + g.k <= 2 * pad || (g.w - 1) * stride + g.k <= 2 * pad) {
    raise(ErrorKind::kDimension, "conv_transpose2d: padding exceeds output extent");
  }
  g.oh = (g.h - 1) * stride + g.k - 2 * pad;
  g.ow = (g.w - 1) * stride + g.k - 2 * pad;
  std::vector<double> out(g.oh * g.ow * g.cout, 0.0);
  if (b.defined()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = b[i % g.cout];
  }
  const double* xs = x.data().data();
  const double* ws = w.data().data();
  for (std::size_t iy = 0; iy < g.h; ++iy) {
    for (std::size_t ix = 0; ix < g.w; ++ix) {
      const double* xp = xs + (iy * g.w + ix) * g.cin;
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(iy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
        if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(g.oh)) continue;
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(ix * stride + kx) - static_cast<std::ptrdiff_t>(pad);
          if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(g.ow)) continue;
          double* o = out.data() + (static_cast<std::size_t>(oy) * g.ow + static_cast<std::size_t>(ox)) * g.cout;
          const double* wp = ws + (ky * g.k + kx) * g.cin * g.cout;
          for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const double xv = xp[ci];
            const double* wr = wp + ci * g.cout;
            for (std::size_t co = 0; co < g.cout; ++co) o[co] += xv * wr[co];
          }
        }
      }
    }
  }
  Tensor y = make_op_result(tape, {g.oh, g.ow, g.cout}, std::move(out), {&x, &w, &b}, "conv_transpose2d");
  if (y.requires_grad()) {
    ImplPtr bi = b.defined() ? b.impl() : nullptr;
    tape.record([xi = x.impl(), wi = w.impl(), bi, yi = y.impl(), g, stride, pad] {
      if (yi->grad.empty()) return;
      double* gx = grad_sink(xi);
      double* gw = grad_sink(wi);
      const double* gy = yi->grad.data();
      if (bi) {
        if (double* gb = grad_sink(bi)) {
          for (std::size_t i = 0; i < yi->grad.size(); ++i) gb[i % g.cout] += gy[i];
        }
      }
      for (std::size_t iy = 0; iy < g.h; ++iy) {
        for (std::size_t ix = 0; ix < g.w; ++ix) {
          const std::size_t xoff = (iy * g.w + ix) * g.cin;
          for (std::size_t ky = 0; ky < g.k; ++ky) {
            const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(iy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
            if (oy < 0 || oy >= static_cast<std::ptrdiff_t>(g.oh)) continue;
            for (std::size_t kx = 0; kx < g.k; ++kx) {
              const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(ix * stride + kx) - static_cast<std::ptrdiff_t>(pad);
              if (ox < 0 || ox >= static_cast<std::ptrdiff_t>(g.ow)) continue;
              const double* go = gy + (static_cast<std::size_t>(oy) * g.ow + static_cast<std::size_t>(ox)) * g.cout;
              const std::size_t woff = (ky * g.k + kx) * g.cin * g.cout;
              for (std::size_t ci = 0; ci < g.cin; ++ci) {
                const double* wr = wi->data.data() + woff + ci * g.cout;
                if (gx) {
                  double acc = 0.0;
                  for (std::size_t co = 0; co < g.cout; ++co) acc += go[co] * wr[co];
                  gx[xoff + ci] += acc;
                }
                if (gw) {
                  const double xv = xi->data[xoff + ci];
                  double* gwr = gw + woff + ci * g.cout;
                  for (std::size_t co = 0; co < g.cout; ++co) gwr[co] += xv * go[co];
                }
              }
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  if (x.rank() != 3) raise(ErrorKind::kDimension, "global_avg_pool expects [H, W, C]");
  const std::size_t c = x.dim(2);
  const std::size_t sites = x.dim(0) * x.dim(1);
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) out[i % c] += x[i];
  for (auto& v : out) v /= static_cast<double>(sites);
  Tensor y = make_op_result(tape, {c}, std::move(out), {&x}, "global_avg_pool");
  if (y.requires_grad()) {
    tape.record([xi = x.impl(), yi = y.impl(), c, sites] {
      if (yi->grad.empty()) return;
      if (double* gx = grad_sink(xi)) {
        const double inv = 1.0 / static_cast<double>(sites);
        for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += yi->grad[i % c] * inv;
      }
    });
  }
  return y;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    raise(ErrorKind::kDimension, "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  Tensor y = make_op_result(tape, std::move(shape), x.to_vector(), {&x}, "reshape");
  if (y.requires_grad()) {
    tape.record([xi = x.impl(), yi = y.impl()] {
      if (yi->grad.empty()) return;
      if (double* gx = grad_sink(xi)) for (std::size_t i = 0; i < yi->grad.size(); ++i) gx[i] += yi->grad[i];
    });
  }
  return y;
}

Tensor slice(Tape& tape, const Tensor& x, std::size_t offset, std::size_t length) {
  if (length == 0 || offset + length > x.size()) {
    raise(ErrorKind::kDimension, "slice out of range");
  }
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(offset),
                          x.data().begin() + static_cast<std::ptrdiff_t>(offset + length));
  Tensor y = make_op_result(tape, {length}, std::move(out), {&x}, "slice");
  if (y.requires_grad()) {
    tape.record([xi = x.impl(), yi = y.impl(), offset] {
      if (yi->grad.empty()) return;
      if (double* gx = grad_sink(xi)) {
        for (std::size_t i = 0; i < yi->grad.size(); ++i) gx[offset + i] += yi->grad[i];
      }
    });
  }
  return y;
}

Tensor reverse_rows(Tape& tape, const Tensor& x) {
  const std::size_t rows = x.dim(0);
  const std::size_t stride = x.size() / rows;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < stride; ++k) out[r * stride + k] = x[(rows - 1 - r) * stride + k];
  }
  Tensor y = make_op_result(tape, x.shape(), std::move(out), {&x}, "reverse_rows");
  if (y.requires_grad()) {
    tape.record([xi = x.impl(), yi = y.impl(), rows, stride] {
      if (yi->grad.empty()) return;
      if (double* gx = grad_sink(xi)) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t k = 0; k < stride; ++k) gx[(rows - 1 - r) * stride + k] += yi->grad[r * stride + k];
      }
    });
  }
  return y;
}

}  // namespace ssmstyle::ops
