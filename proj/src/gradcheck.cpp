#include "ssmstyle/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ssmstyle/cross_attention.hpp"
#include "ssmstyle/errors.hpp"
#include "ssmstyle/fusion.hpp"
#include "ssmstyle/losses.hpp"
#include "ssmstyle/models.hpp"
#include "ssmstyle/ops.hpp"
#include "ssmstyle/ssm.hpp"

namespace ssmstyle {
namespace {

using Inputs = std::span<const Tensor>;

// Headroom over the bare rounding estimate for error accumulated inside f.
constexpr double kNoiseUlps = 16.0;
using MakeInputs = std::function<std::vector<Tensor>(Rng&)>;

struct OpCase {
  std::string module;
  std::string name;
  MakeInputs make;
  GradFn fn;
  // Inputs held constant (frozen tables, content image, prompt embeddings).
  std::vector<std::size_t> frozen{};
};

Tensor randn(Rng& rng, Shape shape, double stddev = 1.0) {
  const std::size_t n = numel(shape);
  return Tensor::from(std::move(shape), rng.normal_vector(n, stddev));
}

Tensor randu(Rng& rng, Shape shape, double lo, double hi) {
  const std::size_t n = numel(shape);
  return Tensor::from(std::move(shape), rng.uniform_vector(n, lo, hi));
}

std::size_t between(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

Tensor unit(Rng& rng, std::size_t d) {
  std::vector<double> v = rng.normal_vector(d, 1.0);
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return Tensor::from({d}, std::move(v));
}

// Central-difference sample of s = sum(w * fn(inputs)).
double weighted_value(const GradFn& fn, Inputs inputs, const std::vector<double>& w) {
  Tape tape;
  const Tensor out = fn(tape, inputs);
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * out[i];
  return s;
}

// y = x^2 with a VJP that is off by 5%.
Tensor corrupted_fixture(Tape& tape, const Tensor& x) {
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * x[i];
  Tensor out = make_op_result(tape, x.shape(), std::move(y), {&x}, "corrupted_fixture");
  if (!out.requires_grad()) return out;
  tape.record([xi = x.impl(), yi = out.impl()] {
    if (yi->grad.empty()) return;
    double* gx = grad_sink(xi);
    if (!gx) return;
    for (std::size_t i = 0; i < xi->data.size(); ++i) gx[i] += 2.1 * xi->data[i] * yi->grad[i];
  });
  return out;
}

SsmParams ssm_from(Inputs in, std::size_t first) {
  SsmParams p;
  p.a_log = in[first];
  p.w_delta = in[first + 1];
  p.b_delta = in[first + 2];
  p.w_b = in[first + 3];
  p.w_c = in[first + 4];
  p.d = in[first + 5];
  p.channels = p.a_log.dim(0);
  p.state_dim = p.a_log.dim(1);
  return p;
}

std::vector<Tensor> ssm_tensors(Rng& rng, std::size_t c, std::size_t n) {
  SsmParams p = SsmParams::init(c, n, rng);
  // Perturb the structured init so instances are generic.
  auto jitter = [&](const Tensor& t, double s) {
    std::vector<double> v = t.to_vector();
    for (double& x : v) x += rng.normal() * s;
    return Tensor::from(t.shape(), std::move(v));
  };
  return {jitter(p.a_log, 0.1), jitter(p.w_delta, 0.1), jitter(p.b_delta, 0.3),
          jitter(p.w_b, 0.1),   jitter(p.w_c, 0.1),     jitter(p.d, 0.3)};
}

ModulationParams mods_from(Inputs in, std::size_t first) {
  return {in[first], in[first + 1], in[first + 2], in[first + 3], in[first + 4]};
}

FusionBlock ssm_block_from(Inputs in, std::size_t first, const SsmOptions& options) {
  FusionBlock b;
  b.kind = FusionKind::kSsm;
  b.ln_in_gain = in[first];
  b.ln_in_bias = in[first + 1];
  b.ln_out_gain = in[first + 2];
  b.ln_out_bias = in[first + 3];
  b.ssm = ssm_from(in, first + 4);
  b.channels = b.ssm.channels;
  b.ssm_options = options;
  return b;
}

// Shared frozen models for the loss cases. Small embedding dimension keeps the
// number of perturbed coordinates low.
struct Fixtures {
  ImageEmbedder embedder{99};
  ToyAutoencoder autoencoder = ToyAutoencoder::init(99);
  Fixtures() {
    for (Tensor t : autoencoder.encoder_tensors()) t.set_requires_grad(false);
    for (Tensor t : autoencoder.decoder_tensors()) t.set_requires_grad(false);
  }
};

const Fixtures& fixtures() {
  static const Fixtures f;
  return f;
}

PromptContext random_context(Rng& rng, const Tensor& x_img) {
  return PromptContext::make(unit(rng, kEmbedDim), unit(rng, kEmbedDim), fixtures().embedder.embed(x_img));
}

Tensor image8(Rng& rng) { return randu(rng, {8, 8, 3}, 0.05, 0.95); }

void add_tensor_cases(std::vector<OpCase>& cases) {
  auto binary = [&](const char* name, auto op, bool positive_b) {
    cases.push_back({"tensor", name,
                     [positive_b](Rng& rng) {
                       const Shape s{between(rng, 1, 4), between(rng, 1, 5)};
                       return std::vector<Tensor>{randn(rng, s),
                                                  positive_b ? randu(rng, s, 0.5, 2.0) : randn(rng, s)};
                     },
                     [op](Tape& t, Inputs in) { return op(t, in[0], in[1]); }});
  };
  binary("add", ops::add, false);
  binary("sub", ops::sub, false);
  binary("mul", ops::mul, false);
  binary("div", ops::div, true);

  auto unary = [&](const char* name, std::function<Tensor(Tape&, const Tensor&)> op, double lo, double hi) {
    cases.push_back({"tensor", name,
                     [lo, hi](Rng& rng) {
                       return std::vector<Tensor>{randu(rng, {between(rng, 1, 4), between(rng, 1, 5)}, lo, hi)};
                     },
                     [op](Tape& t, Inputs in) { return op(t, in[0]); }});
  };
  unary("add_scalar", [](Tape& t, const Tensor& x) { return ops::add_scalar(t, x, 0.7); }, -2, 2);
  unary("scale", [](Tape& t, const Tensor& x) { return ops::scale(t, x, -1.3); }, -2, 2);
  unary("exp", ops::exp, -2, 2);
  unary("sqrt", ops::sqrt, 0.2, 3);
  unary("square", ops::square, -2, 2);
  unary("silu", ops::silu, -4, 4);
  unary("softplus", ops::softplus, -6, 6);
  unary("sigmoid", ops::sigmoid, -4, 4);
  unary("tanh", ops::tanh, -2, 2);
  unary("sum", ops::sum, -2, 2);
  unary("mean", ops::mean, -2, 2);
  unary("sum_squares", ops::sum_squares, -2, 2);
  unary("norm", ops::norm, -2, 2);
  unary("normalize_channels", [](Tape& t, const Tensor& x) { return ops::normalize_channels(t, x); }, -2, 2);
  unary("reverse_rows", ops::reverse_rows, -2, 2);
  unary("reshape", [](Tape& t, const Tensor& x) { return ops::reshape(t, x, {x.size()}); }, -2, 2);
  unary("slice", [](Tape& t, const Tensor& x) { return ops::slice(t, x, x.size() / 3, x.size() - x.size() / 3); },
        -2, 2);

  cases.push_back({"tensor", "scale_by",
                   [](Rng& rng) { return std::vector<Tensor>{randn(rng, {3, 4}), randn(rng, {1})}; },
                   [](Tape& t, Inputs in) { return ops::scale_by(t, in[0], in[1]); }});
  cases.push_back({"tensor", "dot",
                   [](Rng& rng) {
                     const std::size_t n = between(rng, 1, 9);
                     return std::vector<Tensor>{randn(rng, {n}), randn(rng, {n})};
                   },
                   [](Tape& t, Inputs in) { return ops::dot(t, in[0], in[1]); }});
  cases.push_back({"tensor", "l2_normalize",
                   [](Rng& rng) { return std::vector<Tensor>{randn(rng, {between(rng, 2, 9)})}; },
                   [](Tape& t, Inputs in) { return ops::l2_normalize(t, in[0]); }});
  auto channel = [&](const char* name, auto op) {
    cases.push_back({"tensor", name,
                     [](Rng& rng) {
                       const std::size_t c = between(rng, 1, 5);
                       return std::vector<Tensor>{randn(rng, {between(rng, 1, 4), c}), randn(rng, {c})};
                     },
                     [op](Tape& t, Inputs in) { return op(t, in[0], in[1]); }});
  };
  channel("add_channel", ops::add_channel);
  channel("mul_channel", ops::mul_channel);
  cases.push_back({"tensor", "linear",
                   [](Rng& rng) {
                     const std::size_t in = between(rng, 1, 5), out = between(rng, 1, 4);
                     return std::vector<Tensor>{randn(rng, {between(rng, 1, 4), in}), randn(rng, {in, out}),
                                                randn(rng, {out})};
                   },
                   [](Tape& t, Inputs in) { return ops::linear(t, in[0], in[1], in[2]); }});
  cases.push_back({"tensor", "layer_norm",
                   [](Rng& rng) {
                     const std::size_t c = between(rng, 2, 6);
                     return std::vector<Tensor>{randn(rng, {between(rng, 1, 4), c}), randn(rng, {c}),
                                                randn(rng, {c})};
                   },
                   [](Tape& t, Inputs in) { return ops::layer_norm(t, in[0], in[1], in[2]); }});
  cases.push_back({"tensor", "conv2d",
                   [](Rng& rng) {
                     const std::size_t cin = between(rng, 1, 3), cout = between(rng, 1, 3);
                     return std::vector<Tensor>{randn(rng, {between(rng, 3, 6), between(rng, 3, 6), cin}),
                                                randn(rng, {3, 3, cin, cout}, 0.5), randn(rng, {cout})};
                   },
                   [](Tape& t, Inputs in) { return ops::conv2d(t, in[0], in[1], in[2], 2, 1); }});
  cases.push_back({"tensor", "conv_transpose2d",
                   [](Rng& rng) {
                     const std::size_t cin = between(rng, 1, 3), cout = between(rng, 1, 3);
                     return std::vector<Tensor>{randn(rng, {between(rng, 1, 4), between(rng, 1, 4), cin}),
                                                randn(rng, {4, 4, cin, cout}, 0.5), randn(rng, {cout})};
                   },
                   [](Tape& t, Inputs in) { return ops::conv_transpose2d(t, in[0], in[1], in[2], 2, 1); }});
  cases.push_back({"tensor", "global_avg_pool",
                   [](Rng& rng) {
                     return std::vector<Tensor>{randn(rng, {between(rng, 1, 4), between(rng, 1, 4), 3})};
                   },
                   [](Tape& t, Inputs in) { return ops::global_avg_pool(t, in[0]); }});
  cases.push_back({"tensor", "attention",
                   [](Rng& rng) {
                     const std::size_t dk = between(rng, 1, 4), k = between(rng, 1, 6);
                     return std::vector<Tensor>{randn(rng, {between(rng, 1, 6), dk}), randn(rng, {k, dk}),
                                                randn(rng, {k, between(rng, 1, 4)})};
                   },
                   [](Tape& t, Inputs in) { return attention(t, in[0], in[1], in[2]); }});
}

void add_ssm_cases(std::vector<OpCase>& cases) {
  auto block_case = [&](const char* name, ScanImpl scan, bool bidirectional) {
    cases.push_back({"ssm", name,
                     [](Rng& rng) {
                       const std::size_t c = between(rng, 2, 4), n = between(rng, 2, 4);
                       std::vector<Tensor> in{randn(rng, {between(rng, 1, 12), c})};
                       for (auto& p : ssm_tensors(rng, c, n)) in.push_back(p);
                       return in;
                     },
                     [scan, bidirectional](Tape& t, Inputs in) {
                       SsmOptions opts;
                       opts.scan = scan;
                       opts.bidirectional = bidirectional;
                       return ssm_block(t, ssm_from(in, 1), in[0], opts);
                     }});
  };
  block_case("ssm_block", ScanImpl::kParallel, false);
  block_case("ssm_block_sequential", ScanImpl::kSequential, false);
  block_case("ssm_block_bidirectional", ScanImpl::kParallel, true);

  cases.push_back({"ssm", "cross_attention_baseline",
                   [](Rng& rng) {
                     const std::size_t c = between(rng, 2, 4), d = between(rng, 2, 5);
                     CrossAttentionParams p = CrossAttentionParams::init(c, d, between(rng, 1, 6), rng);
                     return std::vector<Tensor>{randn(rng, {between(rng, 1, 6), c}), unit(rng, d), p.w_style.detach(),
                                                p.w_q.detach(), p.w_k.detach(), p.w_v.detach(), p.positions};
                   },
                   [](Tape& t, Inputs in) {
                     CrossAttentionParams p;
                     p.channels = in[0].dim(1);
                     p.embed_dim = in[1].dim(0);
                     p.key_tokens = in[6].dim(0);
                     p.head_dim = in[3].dim(1);
                     p.w_style = in[2];
                     p.w_q = in[3];
                     p.w_k = in[4];
                     p.w_v = in[5];
                     p.positions = in[6];
                     return cross_attention_baseline(t, p, in[0], in[1]);
                   },
                   {6}});
}

void add_fusion_cases(std::vector<OpCase>& cases) {
  // Grid of 4x4 tokens, C = 8, per the fusion spec.
  auto latent_and_mods = [](Rng& rng, std::size_t c) {
    std::vector<Tensor> in{randn(rng, {16, c})};
    for (int i = 0; i < 5; ++i) in.push_back(randn(rng, {c}, 0.5));
    return in;
  };
  cases.push_back({"fusion", "fuse",
                   [latent_and_mods](Rng& rng) {
                     auto in = latent_and_mods(rng, 8);
                     for (auto& p : ssm_tensors(rng, 8, between(rng, 2, 4))) in.push_back(p);
                     return in;
                   },
                   [](Tape& t, Inputs in) {
                     LatentSequence x{in[0], 4, 4};
                     return fuse(t, x, mods_from(in, 1), ssm_from(in, 6)).tokens;
                   }});
  cases.push_back({"fusion", "fuse_block",
                   [latent_and_mods](Rng& rng) {
                     const std::size_t c = between(rng, 2, 6);
                     auto in = latent_and_mods(rng, c);
                     for (int i = 0; i < 4; ++i) in.push_back(randn(rng, {c}, 0.5));
                     for (auto& p : ssm_tensors(rng, c, between(rng, 2, 4))) in.push_back(p);
                     return in;
                   },
                   [](Tape& t, Inputs in) {
                     LatentSequence x{in[0], 4, 4};
                     SsmOptions opts;
                     opts.bidirectional = true;
                     return fuse(t, x, mods_from(in, 1), ssm_block_from(in, 6, opts)).tokens;
                   }});
  cases.push_back({"fusion", "fuse_cross_attention",
                   [](Rng& rng) {
                     const std::size_t c = between(rng, 2, 5), d = between(rng, 2, 5);
                     FusionBlock b = FusionBlock::init_cross_attention(c, d, between(rng, 1, 5), rng);
                     std::vector<Tensor> in{randn(rng, {16, c})};
                     for (int i = 0; i < 5; ++i) in.push_back(randn(rng, {c}, 0.5));
                     in.push_back(unit(rng, d));
                     for (const Tensor& p : {b.ln_in_gain, b.ln_in_bias, b.ln_out_gain, b.ln_out_bias, b.attention.w_style,
                                             b.attention.w_q, b.attention.w_k, b.attention.w_v}) {
                       in.push_back(p.detach());
                     }
                     in.push_back(b.attention.positions);
                     return in;
                   },
                   [](Tape& t, Inputs in) {
                     FusionBlock b;
                     b.kind = FusionKind::kCrossAttention;
                     b.channels = in[0].dim(1);
                     b.ln_in_gain = in[7];
                     b.ln_in_bias = in[8];
                     b.ln_out_gain = in[9];
                     b.ln_out_bias = in[10];
                     b.attention.channels = b.channels;
                     b.attention.embed_dim = in[6].dim(0);
                     b.attention.w_style = in[11];
                     b.attention.w_q = in[12];
                     b.attention.w_k = in[13];
                     b.attention.w_v = in[14];
                     b.attention.positions = in[15];
                     b.attention.key_tokens = in[15].dim(0);
                     b.attention.head_dim = in[12].dim(1);
                     return fuse(t, {in[0], 4, 4}, mods_from(in, 1), b, in[6]).tokens;
                   },
                   {15}});
  cases.push_back({"fusion", "condition",
                   [](Rng& rng) {
                     const std::size_t d = between(rng, 2, 6), c = between(rng, 2, 4);
                     return std::vector<Tensor>{randn(rng, {d, 5 * c}), randn(rng, {5 * c}), unit(rng, d)};
                   },
                   [](Tape& t, Inputs in) {
                     Conditioner cond{in[0], in[1], in[1].dim(0) / 5};
                     const ModulationParams m = condition(t, cond, in[2]);
                     // Concatenate through a weighted sum of all five.
                     Tensor acc = m.alpha1;
                     double k = 2.0;
                     for (const Tensor* v : {&m.mu1, &m.sigma1, &m.alpha2, &m.sigma2}) {
                       acc = ops::add(t, acc, ops::scale(t, *v, k));
                       k += 1.0;
                     }
                     return acc;
                   },
                   {2}});
  cases.push_back({"fusion", "condition_fuse",
                   [](Rng& rng) {
                     const std::size_t d = between(rng, 2, 5), c = 8;
                     std::vector<Tensor> in{randn(rng, {16, c}), randn(rng, {d, 5 * c}, 0.3), randn(rng, {5 * c}, 0.3),
                                            unit(rng, d)};
                     for (auto& p : ssm_tensors(rng, c, 3)) in.push_back(p);
                     return in;
                   },
                   [](Tape& t, Inputs in) {
                     Conditioner cond{in[1], in[2], 8};
                     const ModulationParams m = condition(t, cond, in[3]);
                     return fuse(t, {in[0], 4, 4}, m, ssm_from(in, 4)).tokens;
                   },
                   {3}});
  cases.push_back({"fusion", "flatten_unflatten",
                   [](Rng& rng) {
                     return std::vector<Tensor>{randn(rng, {between(rng, 1, 4), between(rng, 1, 4), 3})};
                   },
                   [](Tape& t, Inputs in) {
                     const LatentSequence s = flatten_grid(t, in[0]);
                     return unflatten_grid(t, {ops::square(t, s.tokens), s.height, s.width});
                   }});
}

void add_loss_cases(std::vector<OpCase>& cases) {
  // Image-space cases take an 8x8 stylized image; the content image and the
  // prompt context are rebuilt from the instance RNG inside `make`, so they
  // ride along as extra (frozen) inputs.
  auto image_case = [&](const char* name, std::function<Tensor(Tape&, const PromptContext&, Inputs)> body) {
    cases.push_back({"losses", name,
                     [](Rng& rng) {
                       const Tensor x = image8(rng);
                       const PromptContext ctx = random_context(rng, x);
                       return std::vector<Tensor>{image8(rng), x, ctx.t_emb, ctx.t_src_emb};
                     },
                     [body](Tape& t, Inputs in) {
                       // Frozen context tensors never receive gradient; use
                       // detached copies so they stay out of the check.
                       const Tensor x = in[1].detach();
                       const PromptContext ctx =
                           PromptContext::make(in[2].detach(), in[3].detach(), fixtures().embedder.embed(x));
                       return body(t, ctx, in);
                     },
                     {1, 2, 3}});
  };
  const ImageEmbedder& emb = fixtures().embedder;
  image_case("embed_image", [&emb](Tape& t, const PromptContext&, Inputs in) { return emb.embed(t, in[0]); });
  image_case("directional_loss", [&emb](Tape& t, const PromptContext& ctx, Inputs in) {
    return directional_loss(t, ctx, emb.embed(t, in[0]));
  });
  image_case("masked_directional_loss", [&emb](Tape& t, const PromptContext& ctx, Inputs in) {
    const PatchMask mask = sample_mask(in[0].shape(), 4, 0.5, 11);
    return masked_directional_loss(t, ctx, emb.embed(t, apply_mask(t, in[0], mask)));
  });
  image_case("second_order_loss", [&emb](Tape& t, const PromptContext& ctx, Inputs in) {
    const Tensor prev = emb.embed(in[1]);
    std::vector<double> shifted = prev.to_vector();
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += 0.05 * ctx.t_dir[i];
    return second_order_loss(t, ctx, Tensor::from(prev.shape(), shifted), emb.embed(t, in[0]), 1.0, 1.0);
  });
  image_case("second_order_loss_elementwise", [&emb](Tape& t, const PromptContext& ctx, Inputs in) {
    const Tensor prev = emb.embed(in[1]);
    return second_order_loss(t, ctx, prev, emb.embed(t, in[0]), 0.8, 1.5, SecondOrderQuotient::kElementwise);
  });
  image_case("style_loss", [&emb](Tape& t, const PromptContext& ctx, Inputs in) {
    SecondOrderState st;
    st.prev_img_emb = emb.embed(in[1]);
    st.theta = 3.0;  // gate open
    st.interval = 1;
    const PatchMask mask = sample_mask(in[0].shape(), 4, 0.5, 5);
    const Tensor y_emb = emb.embed(t, in[0]);
    const Tensor z_emb = emb.embed(t, apply_mask(t, in[0], mask));
    return style_loss(t, ctx, y_emb, z_emb, st, 0).total;
  });
  image_case("multi_prompt_style_loss", [&emb](Tape& t, const PromptContext& ctx, Inputs in) {
    const PromptContext other = PromptContext::make(ctx.t_src_emb, ctx.t_emb, ctx.x_emb);
    const std::vector<PromptContext> ctxs{ctx, other};
    const Tensor y_emb = emb.embed(t, in[0]);
    return multi_prompt_style_loss(t, ctxs, y_emb, y_emb, SecondOrderState{}, 1).total;
  });
  image_case("content_feature_loss", [&emb](Tape& t, const PromptContext&, Inputs in) {
    return content_feature_loss(t, emb, in[1].detach(), in[0]);
  });
  image_case("perceptual_loss", [&emb](Tape& t, const PromptContext&, Inputs in) {
    return perceptual_loss(t, emb, in[1].detach(), in[0]);
  });
  image_case("apply_mask", [](Tape& t, const PromptContext&, Inputs in) {
    return apply_mask(t, in[0], sample_mask(in[0].shape(), 4, 0.5, 3));
  });

  cases.push_back({"losses", "alpha_shift",
                   [](Rng& rng) { return std::vector<Tensor>{randn(rng, {6}), randn(rng, {6})}; },
                   [](Tape& t, Inputs in) { return alpha_shift(t, in[0], in[1], 1.3, 0.7); }});
  cases.push_back({"losses", "total_loss",
                   [](Rng& rng) {
                     return std::vector<Tensor>{randn(rng, {1}), randn(rng, {1}), randn(rng, {1})};
                   },
                   [](Tape& t, Inputs in) { return total_loss(t, {1.0, 1.0, 9000.0}, in[0], in[1], in[2]); }});
  cases.push_back({"losses", "decode",
                   [](Rng& rng) {
                     // Narrow hidden layer keeps the coordinate count small.
                     const std::size_t hidden = 3;
                     return std::vector<Tensor>{randn(rng, {4, kLatentChannels}),
                                                randn(rng, {4, 4, kLatentChannels, hidden}, 0.25),
                                                randn(rng, {hidden}, 0.3), randn(rng, {4, 4, hidden, 3}, 0.5),
                                                randn(rng, {3}, 0.3)};
                   },
                   [](Tape& t, Inputs in) {
                     ToyAutoencoder ae;
                     ae.dec_w1 = in[1];
                     ae.dec_b1 = in[2];
                     ae.dec_w2 = in[3];
                     ae.dec_b2 = in[4];
                     return ae.decode(t, {in[0], 2, 2});
                   }});
  // One full training objective on an 8x8 image: condition, fuse, decode,
  // embed, style + perceptual + content terms.
  cases.push_back({"losses", "training_objective",
                   [](Rng& rng) {
                     const std::size_t d = kEmbedDim;
                     const Tensor x = image8(rng);
                     const PromptContext ctx = random_context(rng, x);
                     std::vector<Tensor> in{x,
                                            ctx.t_emb,
                                            ctx.t_src_emb,
                                            randn(rng, {5 * kLatentChannels}, 0.3),
                                            randn(rng, fixtures().autoencoder.dec_b1.shape(), 0.1),
                                            randn(rng, {3}, 0.3),
                                            randn(rng, {d, 5 * kLatentChannels}, 0.02)};
                     for (auto& p : ssm_tensors(rng, kLatentChannels, 2)) in.push_back(p);
                     return in;
                   },
                   [](Tape& t, Inputs in) {
                     const ImageEmbedder& emb = fixtures().embedder;
                     const Tensor x = in[0].detach();
                     const PromptContext ctx = PromptContext::make(in[1].detach(), in[2].detach(), emb.embed(x));
                     ToyAutoencoder ae = fixtures().autoencoder;
                     ae.dec_b1 = in[4];
                     ae.dec_b2 = in[5];
                     Conditioner cond{in[6], in[3], kLatentChannels};
                     const ModulationParams m = condition(t, cond, ctx.t_emb);
                     const LatentSequence z = ae.encode(x);
                     const LatentSequence fused = fuse(t, z, m, ssm_from(in, 7));
                     const Tensor y = ae.decode(t, fused);
                     const ImageFeatures fy = emb.features(t, y);
                     Tape scratch;
                     const ImageFeatures fx0 = emb.features(scratch, x);
                     const ImageFeatures fx{fx0.conv1.detach(), fx0.conv2.detach(), fx0.embedding.detach()};
                     const Tensor zy = emb.embed(t, apply_mask(t, y, sample_mask(y.shape(), 4, 0.5, 1)));
                     const StyleLoss sl = style_loss(t, ctx, fy.embedding, zy, SecondOrderState{}, 0);
                     return total_loss(t, {1.0, 1.0, 150.0}, sl.total, perceptual_loss(t, fx, fy),
                                       content_feature_loss(t, fx, fy));
                   },
                   {0, 1, 2, 6}});
}

std::vector<OpCase> all_cases(bool inject_fault) {
  std::vector<OpCase> cases;
  add_tensor_cases(cases);
  add_ssm_cases(cases);
  add_fusion_cases(cases);
  add_loss_cases(cases);
  if (inject_fault) {
    cases.push_back({"tensor", "corrupted_fixture",
                     [](Rng& rng) { return std::vector<Tensor>{randu(rng, {3, 3}, 0.5, 2.0)}; },
                     [](Tape& t, Inputs in) { return corrupted_fixture(t, in[0]); }});
  }
  return cases;
}

}  // namespace

bool GradcheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const GradcheckEntry& e) { return e.passed; });
}

std::vector<std::string> GradcheckReport::failing_ops() const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (!e.passed) out.push_back(e.op);
  }
  return out;
}

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names{"all", "tensor", "ssm", "fusion", "losses"};
  return names;
}

namespace {

double max_relative_error(const GradFn& fn, std::vector<Tensor> inputs, Rng& rng, double step, double tolerance,
                          const std::vector<std::size_t>& frozen) {
  std::vector<bool> active(inputs.size(), true);
  for (std::size_t i : frozen) active[i] = false;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    inputs[i] = Tensor::from(inputs[i].shape(), inputs[i].to_vector(), active[i]);
  }
  Tape tape;
  const Tensor out = fn(tape, inputs);
  const std::vector<double> w = rng.normal_vector(out.size(), 1.0);
  const Tensor wt = Tensor::from(out.shape(), w);
  tape.backward(ops::sum(tape, ops::mul(tape, out, wt)));
  // Rounding in s = sum(w * f) is about eps * sum|w * f|; the central
  // difference divides it by 2h. Entries below this noise level cannot be
  // resolved by the probe: the floor is chosen so that a discrepancy within
  // the noise scores at most `tolerance`.
  double magnitude = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) magnitude += std::abs(w[i] * out[i]);
  const double noise = kNoiseUlps * std::numeric_limits<double>::epsilon() * magnitude / (2.0 * step);

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!active[i]) continue;
    Tensor& x = inputs[i];
    const std::vector<double> analytic =
        x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end()) : std::vector<double>(x.size(), 0.0);
    std::vector<double> numeric(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) {
      auto data = x.mutable_data();
      const double orig = data[j];
      data[j] = orig + step;
      const double plus = weighted_value(fn, inputs, w);
      data[j] = orig - step;
      const double minus = weighted_value(fn, inputs, w);
      data[j] = orig;
      numeric[j] = (plus - minus) / (2.0 * step);
    }
    double scale = 0.0;
    for (double v : numeric) scale = std::max(scale, std::abs(v));
    const double floor = std::max({1e-6, 1e-3 * scale, noise / tolerance});
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double denom = std::max({std::abs(analytic[j]), std::abs(numeric[j]), floor});
      worst = std::max(worst, std::abs(analytic[j] - numeric[j]) / denom);
    }
  }
  return worst;
}

}  // namespace

double max_relative_error(const GradFn& fn, std::vector<Tensor> inputs, Rng& rng, double step, double tolerance) {
  return max_relative_error(fn, std::move(inputs), rng, step, tolerance, {});
}

GradcheckReport run_gradcheck(const std::string& module, const GradcheckOptions& options) {
  const auto& names = gradcheck_modules();
  if (std::find(names.begin(), names.end(), module) == names.end()) {
    raise(ErrorKind::kInput, "unknown gradcheck module \"" + module + "\" (expected all, tensor, ssm, fusion or losses)");
  }
  GradcheckReport report;
  std::uint64_t op_index = 0;
  for (const OpCase& c : all_cases(options.inject_fault)) {
    ++op_index;
    if (module != "all" && c.module != module && c.name != "corrupted_fixture") continue;
    GradcheckEntry entry{c.module, c.name, 0, 0.0, true, {}};
    for (std::size_t k = 0; k < options.instances; ++k) {
      Rng rng(derive_seed(derive_seed(options.seed, op_index), k));
      try {
        const double err = max_relative_error(c.fn, c.make(rng), rng, options.step, options.tolerance, c.frozen);
        entry.max_rel_err = std::max(entry.max_rel_err, err);
      } catch (const Error& e) {
        entry.error = e.what();
        entry.passed = false;
      }
      ++entry.instances;
    }
    entry.passed = entry.passed && entry.max_rel_err < options.tolerance;
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace ssmstyle
