#include "ssmstyle/cross_attention.hpp"

#include <cmath>

#include "ssmstyle/errors.hpp"
#include "ssmstyle/ops.hpp"

namespace ssmstyle {

CrossAttentionParams CrossAttentionParams::init(std::size_t channels, std::size_t embed_dim,
                                                std::size_t key_tokens, Rng& rng) {
  if (channels == 0 || embed_dim == 0 || key_tokens == 0) {
    raise(ErrorKind::kConfig, "cross-attention dimensions must be positive");
  }
  CrossAttentionParams p;
  p.channels = channels;
  p.embed_dim = embed_dim;
  p.key_tokens = key_tokens;
  p.head_dim = channels;
  const double cs = 1.0 / std::sqrt(static_cast<double>(channels));
  const double ds = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  p.w_style = Tensor::from({embed_dim, channels}, rng.normal_vector(embed_dim * channels, ds), true);
  std::vector<double> pos(key_tokens * channels);
  for (std::size_t k = 0; k < key_tokens; ++k) {
    for (std::size_t i = 0; i < channels; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(channels));
      pos[k * channels + i] = i % 2 == 0 ? std::sin(static_cast<double>(k) * freq)
                                         : std::cos(static_cast<double>(k) * freq);
    }
  }
  p.positions = Tensor::from({key_tokens, channels}, std::move(pos), false);
  p.w_q = Tensor::from({channels, p.head_dim}, rng.normal_vector(channels * p.head_dim, cs), true);
  p.w_k = Tensor::from({channels, p.head_dim}, rng.normal_vector(channels * p.head_dim, cs), true);
  p.w_v = Tensor::from({channels, channels}, rng.normal_vector(channels * channels, cs), true);
  return p;
}

std::vector<Tensor> CrossAttentionParams::tensors() const { return {w_style, w_q, w_k, w_v}; }

Tensor attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0)) {
    raise(ErrorKind::kDimension, "attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                                     ", v " + shape_str(v.shape()));
  }
  const std::size_t L = q.dim(0), K = k.dim(0), dk = q.dim(1), dv = v.dim(1);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<double> out(L * dv, 0.0);
  std::vector<double> lse(L);
  std::vector<double> p(K);
  const double* qs = q.data().data();
  const double* ks = k.data().data();
  const double* vs = v.data().data();
  for (std::size_t i = 0; i < L; ++i) {
    double m = -INFINITY;
    for (std::size_t j = 0; j < K; ++j) {
      double s = 0.0;
      for (std::size_t d = 0; d < dk; ++d) s += qs[i * dk + d] * ks[j * dk + d];
      p[j] = s * scale;
      m = std::max(m, p[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
      p[j] = std::exp(p[j] - m);
      z += p[j];
    }
    lse[i] = m + std::log(z);
    double* o = out.data() + i * dv;
    for (std::size_t j = 0; j < K; ++j) {
      const double w = p[j] / z;
      for (std::size_t d = 0; d < dv; ++d) o[d] += w * vs[j * dv + d];
    }
  }
  Tensor y = make_op_result(tape, {L, dv}, std::move(out), {&q, &k, &v}, "attention");
  if (y.requires_grad()) {
    tape.record([qi = q.impl(), ki = k.impl(), vi = v.impl(), yi = y.impl(), lse = std::move(lse), L, K, dk,
                 dv, scale] {
      if (yi->grad.empty()) return;
      double* gq = grad_sink(qi);
      double* gk = grad_sink(ki);
      double* gv = grad_sink(vi);
      const double* qs = qi->data.data();
      const double* ks = ki->data.data();
      const double* vs = vi->data.data();
      const double* go = yi->grad.data();
      const double* o = yi->data.data();
      std::vector<double> p(K);
      for (std::size_t i = 0; i < L; ++i) {
        const double* goi = go + i * dv;
        double row_dot = 0.0;  // sum_j p_j (go_i . v_j) == go_i . o_i
        for (std::size_t d = 0; d < dv; ++d) row_dot += goi[d] * o[i * dv + d];
        for (std::size_t j = 0; j < K; ++j) {
          double s = 0.0;
          for (std::size_t d = 0; d < dk; ++d) s += qs[i * dk + d] * ks[j * dk + d];
          p[j] = std::exp(s * scale - lse[i]);
          double dp = 0.0;
          for (std::size_t d = 0; d < dv; ++d) dp += goi[d] * vs[j * dv + d];
          const double ds = p[j] * (dp - row_dot) * scale;
          if (gq) for (std::size_t d = 0; d < dk; ++d) gq[i * dk + d] += ds * ks[j * dk + d];
          if (gk) for (std::size_t d = 0; d < dk; ++d) gk[j * dk + d] += ds * qs[i * dk + d];
          if (gv) for (std::size_t d = 0; d < dv; ++d) gv[j * dv + d] += p[j] * goi[d];
        }
      }
    });
  }
  return y;
}

Tensor cross_attention_baseline(Tape& tape, const CrossAttentionParams& params, const Tensor& x_seq,
                                const Tensor& style_emb) {
  if (x_seq.rank() != 2 || x_seq.dim(1) != params.channels) {
    raise(ErrorKind::kDimension, "cross-attention input " + shape_str(x_seq.shape()));
  }
  if (style_emb.rank() != 1 || style_emb.dim(0) != params.embed_dim) {
    raise(ErrorKind::kDimension, "cross-attention style embedding " + shape_str(style_emb.shape()));
  }
  const Tensor lifted = ops::linear(tape, ops::reshape(tape, style_emb, {1, params.embed_dim}), params.w_style, {});
  const Tensor style_tokens = ops::add_channel(tape, params.positions, ops::reshape(tape, lifted, {params.channels}));
  const Tensor q = ops::linear(tape, x_seq, params.w_q, {});
  const Tensor k = ops::linear(tape, style_tokens, params.w_k, {});
  const Tensor v = ops::linear(tape, style_tokens, params.w_v, {});
  return attention(tape, q, k, v);
}

}  // namespace ssmstyle
