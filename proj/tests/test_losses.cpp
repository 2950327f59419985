#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "ssmstyle/losses.hpp"
#include "ssmstyle/models.hpp"
#include "ssmstyle/ops.hpp"
#include "support.hpp"

using namespace ssmstyle;
using testing_support::error_kind;
using testing_support::grad_error;
using testing_support::l2;
using testing_support::randn;
using testing_support::randu;
using testing_support::unit_vector;

namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor::from({n}, std::move(v));
}

std::vector<double> minus(const Tensor& a, const Tensor& b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = a[i] - b[i];
  return d;
}

// T_dir = (1, 0) with x at the origin, so y is the image direction.
PromptContext axis_context() { return PromptContext::make(vec({1, 0}), vec({0, 0}), vec({0, 0})); }

// y with 1 - cos(T_dir, y) = target.
Tensor at_loss(double target) {
  const double c = 1.0 - target;
  return vec({c, std::sqrt(1.0 - c * c)});
}

double l_dir_value(const PromptContext& ctx, const Tensor& y) {
  Tape tape;
  return directional_loss(tape, ctx, y).item();
}

}  // namespace

TEST(DirectionalLoss, AnchorCases) {
  const PromptContext ctx = axis_context();
  EXPECT_NEAR(l_dir_value(ctx, vec({3, 0})), 0.0, 1e-15);
  EXPECT_NEAR(l_dir_value(ctx, vec({-2, 0})), 2.0, 1e-15);
  EXPECT_NEAR(l_dir_value(ctx, vec({1, 1})), 1.0 - 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(l_dir_value(ctx, vec({1, 1})), 0.292893, 1e-6);
}

TEST(DirectionalLoss, RangeProperty) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const PromptContext ctx = PromptContext::make(unit_vector(rng, 8), unit_vector(rng, 8), unit_vector(rng, 8));
    const double v = l_dir_value(ctx, unit_vector(rng, 8));
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 2.0);
  }
}

TEST(DirectionalLoss, ZeroOnlyForPositivelyParallel) {
  const PromptContext ctx = PromptContext::make(vec({0.6, 0.8, 0}), vec({0, 0, 0}), vec({1, 1, 1}));
  // I_dir = 2.5 * T_dir.
  EXPECT_NEAR(l_dir_value(ctx, vec({1 + 1.5, 1 + 2.0, 1})), 0.0, 1e-15);
  EXPECT_GT(l_dir_value(ctx, vec({1 + 1.5, 1 + 2.0, 1.001})), 0.0);
}

TEST(DirectionalLoss, IdenticalImageGivesOneWithZeroGradient) {
  const PromptContext ctx = PromptContext::make(vec({1, 0, 0}), vec({0, 1, 0}), vec({0.2, 0.3, 0.4}));
  Tape tape;
  Tensor y = Tensor::from({3}, {0.2, 0.3, 0.4}, true);
  const Tensor l = directional_loss(tape, ctx, y);
  EXPECT_EQ(l.item(), 1.0);
  tape.backward(l);
  if (y.has_grad())
    for (double g : y.grad()) EXPECT_EQ(g, 0.0);
}

TEST(DirectionalLoss, Gradcheck) {
  Rng rng(2);
  const PromptContext ctx = PromptContext::make(unit_vector(rng, 6), unit_vector(rng, 6), unit_vector(rng, 6));
  EXPECT_LT(grad_error([&](Tape& t, const std::vector<Tensor>& in) { return directional_loss(t, ctx, in[0]); },
                       {unit_vector(rng, 6)}, 3),
            1e-4);
}

TEST(PromptContext, SourceEqualsTargetIsDegenerate) {
  const Tensor t = vec({0.6, 0.8});
  EXPECT_EQ(error_kind([&] { (void)PromptContext::make(t, t, vec({1, 0})); }), ErrorKind::kDegeneratePrompt);
  const TextEmbedder text(kDefaultModelSeed);
  const Tensor src = text.embed(kSourcePrompt);
  EXPECT_EQ(error_kind([&] { (void)PromptContext::make(text.embed("a plain photo"), src, src); }),
            ErrorKind::kDegeneratePrompt);
}

TEST(Mask, SixtyFourSquareDropsHalfOfSixteen) {
  const PatchMask m = sample_mask({64, 64, 3}, 16, 0.5, 11);
  EXPECT_EQ(m.patches(), 16u);
  EXPECT_EQ(m.dropped(), 8u);
}

TEST(Mask, DroppedCountIsFloorOfRatio) {
  for (double ratio : {0.0, 0.1, 0.25, 0.5, 0.77, 1.0}) {
    const PatchMask m = sample_mask({48, 80, 3}, 16, ratio, 5);
    EXPECT_EQ(m.dropped(), static_cast<std::size_t>(std::floor(15 * ratio))) << ratio;
  }
}

TEST(Mask, SeededAndSeedSensitive) {
  const PatchMask a = sample_mask({64, 64, 3}, 16, 0.5, 3);
  EXPECT_EQ(a.keep, sample_mask({64, 64, 3}, 16, 0.5, 3).keep);
  bool any_differs = false;
  for (std::uint64_t s = 4; s < 10; ++s) any_differs |= sample_mask({64, 64, 3}, 16, 0.5, s).keep != a.keep;
  EXPECT_TRUE(any_differs);
}

TEST(Mask, ZeroRatioIsIdentity) {
  const Tensor img = smooth_random_image(32, 32, 1);
  EXPECT_EQ(apply_mask(img, sample_mask(img.shape(), 16, 0.0, 1)).to_vector(), img.to_vector());
}

TEST(Mask, DroppedPatchesAreZeroFilled) {
  const Tensor img = smooth_random_image(32, 48, 2);
  const PatchMask m = sample_mask(img.shape(), 16, 0.5, 9);
  const Tensor out = apply_mask(img, m);
  for (std::size_t y = 0; y < 32; ++y)
    for (std::size_t x = 0; x < 48; ++x) {
      const bool keep = m.keep[(y / 16) * m.cols + x / 16] != 0;
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t i = (y * 48 + x) * 3 + c;
        EXPECT_EQ(out[i], keep ? img[i] : 0.0);
      }
    }
}

TEST(Mask, NonDivisibleRejected) {
  EXPECT_EQ(error_kind([] { (void)sample_mask({40, 64, 3}, 16, 0.5, 1); }), ErrorKind::kInput);
  EXPECT_EQ(error_kind([] { (void)sample_mask({64, 64, 3}, 16, 1.5, 1); }), ErrorKind::kConfig);
}

TEST(MaskedLoss, AnchorCases) {
  const PromptContext ctx = PromptContext::make(vec({0.5, 0}), vec({0, 0}), vec({1, 1}));
  Tape tape;
  EXPECT_EQ(masked_directional_loss(tape, ctx, vec({1, 1})).item(), 0.0);
  EXPECT_NEAR(masked_directional_loss(tape, ctx, vec({1, 3})).item(), 4.0, 1e-15);
}

TEST(MaskedLoss, MatchesBruteForce) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor t = unit_vector(rng, 16), s = unit_vector(rng, 16), x = unit_vector(rng, 16), z = unit_vector(rng, 16);
    const PromptContext ctx = PromptContext::make(t, s, x);
    Tape tape;
    EXPECT_NEAR(masked_directional_loss(tape, ctx, z).item(), l2(minus(z, x)) / l2(minus(t, s)), 1e-12);
  }
}

TEST(MaskedLoss, ZeroRatioUsesUnmaskedImage) {
  const ImageEmbedder emb(5);
  const Tensor x = smooth_random_image(32, 32, 5), y = smooth_random_image(32, 32, 6);
  const TextEmbedder text(5);
  const Tensor t = text.embed("Picasso oil painting"), s = text.embed(kSourcePrompt);
  const PromptContext ctx = PromptContext::make(t, s, emb.embed(x));
  Tape tape;
  const double v = masked_directional_loss(tape, ctx, emb.embed(apply_mask(y, sample_mask(y.shape(), 16, 0.0, 1)))).item();
  EXPECT_NEAR(v, l2(minus(emb.embed(y), emb.embed(x))) / l2(minus(t, s)), 1e-12);
}

TEST(AlphaShift, ClosedForms) {
  EXPECT_EQ(alpha_shift_value(0.0, 1.0, 1.0), 0.0);
  EXPECT_NEAR(alpha_shift_value(std::log(2.0), 1.0, 1.0), 0.5, 1e-15);
  EXPECT_NEAR(alpha_shift_value(50.0, 0.7, 1.0), 0.7, 1e-15);
  Tape tape;
  EXPECT_NEAR(alpha_shift(tape, vec({std::log(2.0), 0}), vec({0, 0}), 1.0, 1.0).item(), 0.5, 1e-15);
}

TEST(AlphaShift, BoundedAndIncreasing) {
  double prev = -1.0;
  for (double d = 0.0; d < 20.0; d += 0.05) {
    const double v = alpha_shift_value(d, 2.0, 1.5);
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 2.0);
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(AlphaShift, Gradcheck) {
  Rng rng(5);
  const Tensor x = unit_vector(rng, 5);
  EXPECT_LT(grad_error([&](Tape& t, const std::vector<Tensor>& in) { return alpha_shift(t, in[0], x, 1.3, 0.8); },
                       {unit_vector(rng, 5)}, 6),
            1e-4);
}

TEST(SecondOrder, VanishingCases) {
  Rng rng(6);
  const Tensor t = unit_vector(rng, 4), s = unit_vector(rng, 4), x = unit_vector(rng, 4), p = unit_vector(rng, 4);
  const PromptContext ctx = PromptContext::make(t, s, x);
  Tape tape;
  EXPECT_EQ(second_order_loss(tape, ctx, p, p, 1.0, 1.0).item(), 0.0);
  EXPECT_EQ(second_order_loss(tape, ctx, p, x, 1.0, 1.0).item(), 0.0);
}

TEST(SecondOrder, MissingPreviousIsStateError) {
  Rng rng(7);
  const PromptContext ctx = PromptContext::make(unit_vector(rng, 4), unit_vector(rng, 4), unit_vector(rng, 4));
  Tape tape;
  EXPECT_EQ(error_kind([&] { (void)second_order_loss(tape, ctx, std::nullopt, unit_vector(rng, 4), 1, 1); }),
            ErrorKind::kState);
}

TEST(SecondOrder, MatchesBruteForce) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor t = unit_vector(rng, 8), s = unit_vector(rng, 8), x = unit_vector(rng, 8);
    const Tensor p = unit_vector(rng, 8), c = unit_vector(rng, 8);
    const double alpha = rng.uniform(0.1, 2.0), beta = rng.uniform(0.1, 3.0);
    const PromptContext ctx = PromptContext::make(t, s, x);
    const double dc = l2(minus(c, p)), dt = l2(minus(t, s)), dx = l2(minus(c, x));
    const double shift = alpha * (1.0 - std::exp(-beta * dx));
    Tape tape;
    EXPECT_NEAR(second_order_loss(tape, ctx, p, c, alpha, beta).item(), dc * dc / (dt * dt) * shift, 1e-12);
    // Elementwise reading, clamped denominator.
    double q = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      const double den = std::max(std::abs(t[i] - s[i]), kElementwiseClamp);
      q += ((c[i] - p[i]) / den) * ((c[i] - p[i]) / den);
    }
    const double elem = second_order_loss(tape, ctx, p, c, alpha, beta, SecondOrderQuotient::kElementwise).item();
    EXPECT_NEAR(elem, q * shift, 1e-10 * std::max(1.0, q * shift));
  }
}

TEST(SecondOrder, Gradcheck) {
  Rng rng(9);
  const PromptContext ctx = PromptContext::make(unit_vector(rng, 5), unit_vector(rng, 5), unit_vector(rng, 5));
  const Tensor p = unit_vector(rng, 5);
  for (SecondOrderQuotient q : {SecondOrderQuotient::kNormRatio, SecondOrderQuotient::kElementwise}) {
    EXPECT_LT(grad_error([&](Tape& t, const std::vector<Tensor>& in) {
                return second_order_loss(t, ctx, p, in[0], 1.0, 1.0, q);
              },
                         {unit_vector(rng, 5)}, 10),
              1e-4);
  }
}

TEST(StyleLoss, GateClosedAboveThreshold) {
  const PromptContext ctx = axis_context();
  SecondOrderState so;
  so.prev_img_emb = vec({0.1, 0.2});
  Tape tape;
  const StyleLoss s = style_loss(tape, ctx, at_loss(0.7), vec({0.3, 0.1}), so, 5);
  EXPECT_FALSE(s.gate_open);
  EXPECT_EQ(s.l_so.item(), 0.0);
  EXPECT_EQ(s.total.item(), s.l_dir.item() + s.l_md.item());
  EXPECT_NEAR(s.l_dir.item(), 0.7, 1e-12);
}

TEST(StyleLoss, GateOpenBelowThresholdOnInterval) {
  const PromptContext ctx = axis_context();
  SecondOrderState so;
  so.prev_img_emb = vec({0.1, 0.2});
  Tape tape;
  const StyleLoss s = style_loss(tape, ctx, at_loss(0.5), vec({0.3, 0.1}), so, 5);
  EXPECT_TRUE(s.gate_open);
  EXPECT_GT(s.l_so.item(), 0.0);
  const double so_ref = second_order_loss(tape, ctx, so.prev_img_emb, at_loss(0.5), 1.0, 1.0).item();
  EXPECT_EQ(s.l_so.item(), so_ref);
  EXPECT_NEAR(s.total.item(), s.l_dir.item() + s.l_md.item() + so_ref, 1e-15);
}

TEST(StyleLoss, GateClosedOffInterval) {
  const PromptContext ctx = axis_context();
  SecondOrderState so;
  so.prev_img_emb = vec({0.1, 0.2});
  for (std::size_t epoch : {1u, 2u, 3u, 4u, 6u, 13u}) {
    Tape tape;
    const StyleLoss s = style_loss(tape, ctx, at_loss(0.1), vec({0.3, 0.1}), so, epoch);
    EXPECT_FALSE(s.gate_open) << epoch;
    EXPECT_EQ(s.total.item(), s.l_dir.item() + s.l_md.item());
  }
}

TEST(StyleLoss, GateClosedWithoutPrevious) {
  Tape tape;
  const StyleLoss s = style_loss(tape, axis_context(), at_loss(0.1), vec({0.3, 0.1}), SecondOrderState{}, 10);
  EXPECT_FALSE(s.gate_open);
}

TEST(StyleLoss, TermSwitches) {
  SecondOrderState so;
  so.prev_img_emb = vec({0.1, 0.2});
  Tape tape;
  const StyleLoss s = style_loss(tape, axis_context(), at_loss(0.1), vec({0.3, 0.1}), so, 0, {false, false});
  EXPECT_EQ(s.l_md.item(), 0.0);
  EXPECT_EQ(s.l_so.item(), 0.0);
  EXPECT_EQ(s.total.item(), s.l_dir.item());
}

TEST(MultiPrompt, SingleAndDuplicatePrompts) {
  Rng rng(11);
  const PromptContext a = PromptContext::make(unit_vector(rng, 6), unit_vector(rng, 6), unit_vector(rng, 6));
  const Tensor y = unit_vector(rng, 6), z = unit_vector(rng, 6);
  Tape tape;
  const double single = style_loss(tape, a, y, z, {}, 0).total.item();
  const std::vector<PromptContext> one{a}, two{a, a};
  EXPECT_EQ(multi_prompt_style_loss(tape, one, y, z, {}, 0).total.item(), single);
  EXPECT_NEAR(multi_prompt_style_loss(tape, two, y, z, {}, 0).total.item(), single, 1e-15);
}

TEST(MultiPrompt, MeanLiesBetweenIndividuals) {
  Rng rng(12);
  const Tensor x = unit_vector(rng, 6), src = unit_vector(rng, 6);
  for (int trial = 0; trial < 50; ++trial) {
    const PromptContext a = PromptContext::make(unit_vector(rng, 6), src, x);
    const PromptContext b = PromptContext::make(unit_vector(rng, 6), src, x);
    const Tensor y = unit_vector(rng, 6), z = unit_vector(rng, 6);
    Tape tape;
    const double la = style_loss(tape, a, y, z, {}, 1).total.item();
    const double lb = style_loss(tape, b, y, z, {}, 1).total.item();
    const std::vector<PromptContext> both{a, b};
    const StyleLoss m = multi_prompt_style_loss(tape, both, y, z, {}, 1);
    EXPECT_NEAR(m.total.item(), 0.5 * (la + lb), 1e-14);
    EXPECT_GE(m.total.item(), std::min(la, lb) - 1e-14);
    EXPECT_LE(m.total.item(), std::max(la, lb) + 1e-14);
  }
}

TEST(MultiPrompt, EmptyListRejected) {
  Tape tape;
  EXPECT_EQ(error_kind([&] {
              (void)multi_prompt_style_loss(tape, std::span<const PromptContext>{}, vec({1}), vec({1}), {}, 0);
            }),
            ErrorKind::kInput);
}

TEST(ContentLosses, ZeroOnIdenticalSymmetricNonnegative) {
  const ImageEmbedder emb(13);
  Rng rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = randu(rng, {8, 8, 3}, 0, 1), y = randu(rng, {8, 8, 3}, 0, 1);
    Tape tape;
    const double fxy = content_feature_loss(tape, emb, x, y).item();
    EXPECT_GE(fxy, 0.0);
    EXPECT_GE(perceptual_loss(tape, emb, x, y).item(), 0.0);
    EXPECT_NEAR(fxy, content_feature_loss(tape, emb, y, x).item(), 1e-12);
    if (trial < 5) {
      EXPECT_EQ(content_feature_loss(tape, emb, x, x).item(), 0.0);
      EXPECT_EQ(perceptual_loss(tape, emb, x, x).item(), 0.0);
    }
  }
}

TEST(ContentLosses, FeatureLossMatchesManualSum) {
  const ImageEmbedder emb(15);
  Rng rng(16);
  const Tensor x = randu(rng, {8, 8, 3}, 0, 1), y = randu(rng, {8, 8, 3}, 0, 1);
  Tape tape;
  const ImageFeatures fx = emb.features(tape, x), fy = emb.features(tape, y);
  double ref = 0.0;
  for (const auto& [a, b] : {std::pair{fx.conv1, fy.conv1}, std::pair{fx.conv2, fy.conv2}}) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    ref += s / static_cast<double>(a.size());
  }
  EXPECT_NEAR(content_feature_loss(tape, emb, x, y).item(), ref, 1e-13);
}

TEST(ContentLosses, ShapeMismatchRejected) {
  const ImageEmbedder emb(17);
  Tape tape;
  const Tensor a = Tensor::full({8, 8, 3}, 0.5), b = Tensor::full({8, 12, 3}, 0.5);
  EXPECT_EQ(error_kind([&] { (void)content_feature_loss(tape, emb, a, b); }), ErrorKind::kDimension);
  EXPECT_EQ(error_kind([&] { (void)perceptual_loss(tape, emb, a, b); }), ErrorKind::kDimension);
}

TEST(ContentLosses, Gradcheck) {
  const ImageEmbedder emb(18);
  Rng rng(19);
  const Tensor x = randu(rng, {8, 8, 3}, 0.1, 0.9);
  const Tensor y = randu(rng, {8, 8, 3}, 0.1, 0.9);
  EXPECT_LT(grad_error([&](Tape& t, const std::vector<Tensor>& in) { return content_feature_loss(t, emb, x, in[0]); },
                       {y}, 20),
            1e-4);
  EXPECT_LT(grad_error([&](Tape& t, const std::vector<Tensor>& in) { return perceptual_loss(t, emb, x, in[0]); },
                       {y}, 21),
            1e-4);
}

TEST(TotalLoss, WeightedSum) {
  Tape tape;
  const Tensor s = Tensor::scalar(0.8), l = Tensor::scalar(0.3), v = Tensor::scalar(2e-4);
  EXPECT_EQ(total_loss(tape, {0, 0, 0}, s, l, v).item(), 0.0);
  EXPECT_EQ(total_loss(tape, {1, 0, 0}, s, l, v).item(), 0.8);
  EXPECT_NEAR(total_loss(tape, {1, 1, 9000}, s, l, v).item(), 0.8 + 0.3 + 9000 * 2e-4, 1e-14);
  EXPECT_EQ(error_kind([&] { (void)total_loss(tape, {1, -1, 0}, s, l, v); }), ErrorKind::kConfig);
}

TEST(TotalLoss, CompositeGradcheckOnSmallImage) {
  // Every term, differentiated with respect to the stylized 8x8 image
  // through the embedder, with the second-order gate open.
  const ImageEmbedder emb(22);
  const TextEmbedder text(22);
  Rng rng(23);
  const Tensor x = randu(rng, {8, 8, 3}, 0.1, 0.9);
  const PromptContext ctx = PromptContext::make(text.embed("Paul Gauguin style"), text.embed(kSourcePrompt), emb.embed(x));
  const PatchMask mask = sample_mask({8, 8, 3}, 4, 0.5, 1);
  SecondOrderState so;
  so.theta = 2.0;
  so.prev_img_emb = emb.embed(randu(rng, {8, 8, 3}, 0.1, 0.9));
  auto fn = [&](Tape& t, const std::vector<Tensor>& in) {
    const ImageFeatures fx = emb.features(t, x), fy = emb.features(t, in[0]);
    const StyleLoss s = style_loss(t, ctx, fy.embedding, emb.embed(t, apply_mask(t, in[0], mask)), so, 0);
    EXPECT_TRUE(s.gate_open);
    return total_loss(t, {1.0, 1.0, 150.0}, s.total, perceptual_loss(t, fx, fy), content_feature_loss(t, fx, fy));
  };
  EXPECT_LT(grad_error(fn, {randu(rng, {8, 8, 3}, 0.1, 0.9)}, 24), 1e-4);
}
