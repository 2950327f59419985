#include "ssmstyle/ssm.hpp"

#include <bit>
#include <cmath>
#include <thread>

#include "ssmstyle/errors.hpp"

namespace ssmstyle {
namespace {

double softplus_value(double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }

double sigmoid_value(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

void check_params(const SsmParams& p, const Tensor& x_seq) {
  const std::size_t c = p.channels;
  const std::size_t n = p.state_dim;
  if (x_seq.rank() != 2 || x_seq.dim(1) != c) {
    raise(ErrorKind::kDimension, "ssm input " + shape_str(x_seq.shape()) + " needs [L, " + std::to_string(c) + "]");
  }
  if (p.a_log.shape() != Shape{c, n} || p.w_delta.shape() != Shape{c, c} || p.b_delta.shape() != Shape{c} ||
      p.w_b.shape() != Shape{c, n} || p.w_c.shape() != Shape{c, n} || p.d.shape() != Shape{c}) {
    raise(ErrorKind::kDimension, "inconsistent SsmParams shapes");
  }
}

void check_scan_inputs(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    raise(ErrorKind::kDimension, "scan inputs " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

// Intermediate quantities of the forward pass that the backward pass reuses.
struct Forward {
  std::size_t length = 0, channels = 0, state = 0;
  std::vector<double> z, delta, bm, cm, neg_a, a, b, h_fwd, h_bwd;
};

Forward run_forward(const SsmParams& p, std::span<const double> x, std::size_t length,
                    const SsmOptions& opt, bool compute_scan) {
  Forward f;
  const std::size_t c = p.channels;
  const std::size_t n = p.state_dim;
  f.length = length;
  f.channels = c;
  f.state = n;
  f.z.assign(length * c, 0.0);
  f.delta.resize(length * c);
  f.bm.assign(length * n, 0.0);
  f.cm.assign(length * n, 0.0);
  f.neg_a.resize(c * n);
  for (std::size_t i = 0; i < c * n; ++i) f.neg_a[i] = std::exp(p.a_log[i]);

  for (std::size_t t = 0; t < length; ++t) {
    const double* xt = x.data() + t * c;
    for (std::size_t j = 0; j < c; ++j) f.z[t * c + j] = p.b_delta[j];
    for (std::size_t k = 0; k < c; ++k) {
      const double xv = xt[k];
      for (std::size_t j = 0; j < c; ++j) f.z[t * c + j] += xv * p.w_delta[k * c + j];
      for (std::size_t s = 0; s < n; ++s) {
        f.bm[t * n + s] += xv * p.w_b[k * n + s];
        f.cm[t * n + s] += xv * p.w_c[k * n + s];
      }
    }
    for (std::size_t j = 0; j < c; ++j) f.delta[t * c + j] = softplus_value(f.z[t * c + j]) + opt.delta_floor;
  }

  const std::size_t lanes = c * n;
  f.a.resize(length * lanes);
  f.b.resize(length * lanes);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t j = 0; j < c; ++j) {
      const double dt = f.delta[t * c + j];
      const double xv = x[t * c + j];
      for (std::size_t s = 0; s < n; ++s) {
        const std::size_t idx = t * lanes + j * n + s;
        f.a[idx] = std::exp(-dt * f.neg_a[j * n + s]);
        f.b[idx] = dt * f.bm[t * n + s] * xv;
      }
    }
  }
  if (!compute_scan) return f;

  f.h_fwd.resize(length * lanes);
  if (opt.scan == ScanImpl::kSequential) {
    detail::scan_sequential_raw(f.a.data(), f.b.data(), f.h_fwd.data(), length, lanes);
  } else {
    detail::scan_parallel_raw(f.a.data(), f.b.data(), f.h_fwd.data(), length, lanes, opt.threads);
  }
  if (opt.bidirectional) {
    // Scan the time-reversed sequence, then flip the states back.
    std::vector<double> ra(length * lanes), rb(length * lanes), rh(length * lanes);
    for (std::size_t t = 0; t < length; ++t) {
      std::copy_n(f.a.data() + (length - 1 - t) * lanes, lanes, ra.data() + t * lanes);
      std::copy_n(f.b.data() + (length - 1 - t) * lanes, lanes, rb.data() + t * lanes);
    }
    if (opt.scan == ScanImpl::kSequential) {
      detail::scan_sequential_raw(ra.data(), rb.data(), rh.data(), length, lanes);
    } else {
      detail::scan_parallel_raw(ra.data(), rb.data(), rh.data(), length, lanes, opt.threads);
    }
    f.h_bwd.resize(length * lanes);
    for (std::size_t t = 0; t < length; ++t) {
      std::copy_n(rh.data() + (length - 1 - t) * lanes, lanes, f.h_bwd.data() + t * lanes);
    }
  }
  return f;
}

void scan_lanes_blelloch(const double* a, const double* b, double* h, std::size_t length,
                         std::size_t lanes, std::size_t lane_begin, std::size_t lane_end) {
  const std::size_t padded = std::bit_ceil(length);
  std::vector<ScanElement> tree(padded);
  for (std::size_t lane = lane_begin; lane < lane_end; ++lane) {
    for (std::size_t t = 0; t < padded; ++t) {
      tree[t] = t < length ? ScanElement{a[t * lanes + lane], b[t * lanes + lane]} : ScanElement{};
    }
    // Up-sweep: tree[i] holds the composition of its subtree.
    for (std::size_t d = 1; d < padded; d *= 2) {
      for (std::size_t i = 2 * d - 1; i < padded; i += 2 * d) tree[i] = combine(tree[i - d], tree[i]);
    }
    // Down-sweep to an exclusive prefix.
    tree[padded - 1] = ScanElement{};
    for (std::size_t d = padded / 2; d >= 1; d /= 2) {
      for (std::size_t i = 2 * d - 1; i < padded; i += 2 * d) {
        const ScanElement left = tree[i - d];
        tree[i - d] = tree[i];
        tree[i] = combine(tree[i], left);
      }
    }
    // Inclusive prefix applied to h_0 = 0 leaves only the drive term.
    for (std::size_t t = 0; t < length; ++t) {
      const ScanElement own{a[t * lanes + lane], b[t * lanes + lane]};
      h[t * lanes + lane] = combine(tree[t], own).b;
    }
  }
}

}  // namespace

namespace detail {

void scan_sequential_raw(const double* a, const double* b, double* h, std::size_t length,
                         std::size_t lanes) {
  for (std::size_t lane = 0; lane < lanes; ++lane) h[lane] = b[lane];
  for (std::size_t t = 1; t < length; ++t) {
    const double* at = a + t * lanes;
    const double* bt = b + t * lanes;
    const double* prev = h + (t - 1) * lanes;
    double* ht = h + t * lanes;
    for (std::size_t lane = 0; lane < lanes; ++lane) ht[lane] = at[lane] * prev[lane] + bt[lane];
  }
}

void scan_parallel_raw(const double* a, const double* b, double* h, std::size_t length,
                       std::size_t lanes, unsigned threads) {
  if (threads <= 1 || lanes < 2) {
    scan_lanes_blelloch(a, b, h, length, lanes, 0, lanes);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(threads, lanes);
  const std::size_t block = (lanes + workers - 1) / workers;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * block;
    const std::size_t end = std::min(lanes, begin + block);
    if (begin >= end) break;
    pool.emplace_back(scan_lanes_blelloch, a, b, h, length, lanes, begin, end);
  }
  for (auto& t : pool) t.join();
}

}  // namespace detail

SsmParams SsmParams::init(std::size_t channels, std::size_t state_dim, Rng& rng) {
  if (channels == 0 || state_dim == 0) raise(ErrorKind::kConfig, "SSM dimensions must be positive");
  SsmParams p;
  p.channels = channels;
  p.state_dim = state_dim;
  std::vector<double> a_log(channels * state_dim);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t s = 0; s < state_dim; ++s) a_log[c * state_dim + s] = std::log(static_cast<double>(s + 1));
  p.a_log = Tensor::from({channels, state_dim}, std::move(a_log), true);

  const double scale = 1.0 / std::sqrt(static_cast<double>(channels));
  p.w_delta = Tensor::from({channels, channels}, rng.normal_vector(channels * channels, 0.1 * scale), true);
  std::vector<double> b_delta(channels);
  for (auto& v : b_delta) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    v = std::log(std::expm1(dt));  // inverse softplus
  }
  p.b_delta = Tensor::from({channels}, std::move(b_delta), true);
  p.w_b = Tensor::from({channels, state_dim}, rng.normal_vector(channels * state_dim, scale), true);
  p.w_c = Tensor::from({channels, state_dim}, rng.normal_vector(channels * state_dim, scale), true);
  p.d = Tensor::full({channels}, 1.0, true);
  return p;
}

std::vector<Tensor> SsmParams::tensors() const { return {a_log, w_delta, b_delta, w_b, w_c, d}; }

Discretized discretize(const SsmParams& params, const Tensor& x_seq, double delta_floor) {
  check_params(params, x_seq);
  SsmOptions opt;
  opt.delta_floor = delta_floor;
  const std::size_t length = x_seq.dim(0);
  Forward f = run_forward(params, x_seq.data(), length, opt, false);
  const std::size_t c = params.channels;
  const std::size_t n = params.state_dim;
  Discretized out;
  out.a = Tensor::from({length, c, n}, std::move(f.a));
  out.b = Tensor::from({length, c, n}, std::move(f.b));
  out.c = Tensor::from({length, n}, std::move(f.cm));
  out.delta = Tensor::from({length, c}, std::move(f.delta));
  return out;
}

Tensor scan_sequential(const Tensor& a_seq, const Tensor& b_seq) {
  check_scan_inputs(a_seq, b_seq);
  const std::size_t length = a_seq.dim(0);
  const std::size_t lanes = a_seq.size() / length;
  std::vector<double> h(a_seq.size());
  detail::scan_sequential_raw(a_seq.data().data(), b_seq.data().data(), h.data(), length, lanes);
  return Tensor::from(a_seq.shape(), std::move(h));
}

Tensor scan_parallel(const Tensor& a_seq, const Tensor& b_seq, unsigned threads) {
  check_scan_inputs(a_seq, b_seq);
  const std::size_t length = a_seq.dim(0);
  const std::size_t lanes = a_seq.size() / length;
  std::vector<double> h(a_seq.size());
  detail::scan_parallel_raw(a_seq.data().data(), b_seq.data().data(), h.data(), length, lanes, threads);
  return Tensor::from(a_seq.shape(), std::move(h));
}

Tensor ssm_block(Tape& tape, const SsmParams& params, const Tensor& x_seq, const SsmOptions& options) {
  check_params(params, x_seq);
  const std::size_t length = x_seq.dim(0);
  const std::size_t c = params.channels;
  const std::size_t n = params.state_dim;
  const std::size_t lanes = c * n;

  auto f = std::make_shared<Forward>(run_forward(params, x_seq.data(), length, options, true));
  std::vector<double> y(length * c);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t j = 0; j < c; ++j) {
      double acc = params.d[j] * x_seq[t * c + j];
      for (std::size_t s = 0; s < n; ++s) {
        double hs = f->h_fwd[t * lanes + j * n + s];
        if (options.bidirectional) hs += f->h_bwd[t * lanes + j * n + s];
        acc += f->cm[t * n + s] * hs;
      }
      y[t * c + j] = acc;
    }
  }
  Tensor out = make_op_result(tape, {length, c}, std::move(y),
                              {&x_seq, &params.a_log, &params.w_delta, &params.b_delta, &params.w_b,
                               &params.w_c, &params.d},
                              "ssm_block");
  if (!out.requires_grad()) return out;

  tape.record([f, xi = x_seq.impl(), a_log = params.a_log.impl(), w_delta = params.w_delta.impl(),
               b_delta = params.b_delta.impl(), w_b = params.w_b.impl(), w_c = params.w_c.impl(),
               d = params.d.impl(), yi = out.impl(), bidir = options.bidirectional] {
    if (yi->grad.empty()) return;
    const std::size_t L = f->length, C = f->channels, N = f->state, lanes = C * N;
    const std::vector<double>& x = xi->data;
    const std::vector<double>& gy = yi->grad;

    std::vector<double> gx(L * C, 0.0);
    std::vector<double> gcm(L * N, 0.0);
    std::vector<double> gh(L * lanes);
    if (double* gd = grad_sink(d)) {
      for (std::size_t i = 0; i < L * C; ++i) gd[i % C] += gy[i] * x[i];
    }
    for (std::size_t i = 0; i < L * C; ++i) gx[i] += gy[i] * d->data[i % C];
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t j = 0; j < C; ++j) {
        const double g = gy[t * C + j];
        for (std::size_t s = 0; s < N; ++s) {
          const std::size_t idx = t * lanes + j * N + s;
          double hs = f->h_fwd[idx];
          if (bidir) hs += f->h_bwd[idx];
          gcm[t * N + s] += g * hs;
          gh[idx] = g * f->cm[t * N + s];
        }
      }
    }

    // Adjoint recurrences: g_t = gh_t + a_{t+1} g_{t+1} for the forward scan,
    // mirrored in time for the reversed one.
    std::vector<double> ga(L * lanes, 0.0), gb(L * lanes, 0.0);
    std::vector<double> carry(lanes, 0.0);
    for (std::size_t t = L; t-- > 0;) {
      for (std::size_t l = 0; l < lanes; ++l) {
        const std::size_t idx = t * lanes + l;
        const double next_a = t + 1 < L ? f->a[(t + 1) * lanes + l] : 0.0;
        carry[l] = gh[idx] + next_a * carry[l];
        gb[idx] += carry[l];
        if (t > 0) ga[idx] += carry[l] * f->h_fwd[(t - 1) * lanes + l];
      }
    }
    if (bidir) {
      std::fill(carry.begin(), carry.end(), 0.0);
      for (std::size_t t = 0; t < L; ++t) {
        for (std::size_t l = 0; l < lanes; ++l) {
          const std::size_t idx = t * lanes + l;
          const double prev_a = t > 0 ? f->a[(t - 1) * lanes + l] : 0.0;
          carry[l] = gh[idx] + prev_a * carry[l];
          gb[idx] += carry[l];
          if (t + 1 < L) ga[idx] += carry[l] * f->h_bwd[(t + 1) * lanes + l];
        }
      }
    }

    std::vector<double> gdelta(L * C, 0.0);
    std::vector<double> gbm(L * N, 0.0);
    std::vector<double> gneg_a(lanes, 0.0);
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t j = 0; j < C; ++j) {
        const double dt = f->delta[t * C + j];
        const double xv = x[t * C + j];
        double acc_delta = 0.0, acc_x = 0.0;
        for (std::size_t s = 0; s < N; ++s) {
          const std::size_t idx = t * lanes + j * N + s;
          const double ga_a = ga[idx] * f->a[idx];
          // a = exp(-delta * negA)
          acc_delta += -ga_a * f->neg_a[j * N + s];
          gneg_a[j * N + s] += -ga_a * dt;
          // b = delta * B * x
          acc_delta += gb[idx] * f->bm[t * N + s] * xv;
          acc_x += gb[idx] * dt * f->bm[t * N + s];
          gbm[t * N + s] += gb[idx] * dt * xv;
        }
        gdelta[t * C + j] = acc_delta;
        gx[t * C + j] += acc_x;
      }
    }
    if (double* g = grad_sink(a_log)) {
      // negA = exp(a_log)
      for (std::size_t i = 0; i < lanes; ++i) g[i] += gneg_a[i] * f->neg_a[i];
    }

    std::vector<double> gz(L * C);
    for (std::size_t i = 0; i < L * C; ++i) gz[i] = gdelta[i] * sigmoid_value(f->z[i]);

    double* gwd = grad_sink(w_delta);
    double* gwb = grad_sink(w_b);
    double* gwc = grad_sink(w_c);
    if (double* g = grad_sink(b_delta)) {
      for (std::size_t i = 0; i < L * C; ++i) g[i % C] += gz[i];
    }
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t k = 0; k < C; ++k) {
        const double xv = x[t * C + k];
        double acc = 0.0;
        for (std::size_t j = 0; j < C; ++j) {
          acc += gz[t * C + j] * w_delta->data[k * C + j];
          if (gwd) gwd[k * C + j] += xv * gz[t * C + j];
        }
        for (std::size_t s = 0; s < N; ++s) {
          acc += gbm[t * N + s] * w_b->data[k * N + s] + gcm[t * N + s] * w_c->data[k * N + s];
          if (gwb) gwb[k * N + s] += xv * gbm[t * N + s];
          if (gwc) gwc[k * N + s] += xv * gcm[t * N + s];
        }
        gx[t * C + k] += acc;
      }
    }
    if (double* g = grad_sink(xi)) {
      for (std::size_t i = 0; i < L * C; ++i) g[i] += gx[i];
    }
  });
  return out;
}

}  // namespace ssmstyle
