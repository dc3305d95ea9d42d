#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "test_util.hpp"
#include "vitc/heads.hpp"
#include "vitc/pyramid.hpp"

using namespace vitc;
using namespace vitc::testing;

namespace {

FeaturePyramid rand_pyramid(std::mt19937_64& rng, std::size_t grid, std::size_t c, double scale = 1.0) {
  return to_pyramid(rand_tensor({grid, grid, c}, rng, DType::f64, -scale, scale));
}

Mask rand_mask(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t k) {
  Mask m(h, w);
  for (auto& l : m.labels) l = static_cast<std::uint8_t>(rng() % k);
  return m;
}

HeadConfig small_head() { return HeadConfig{8, 6, 3}; }

}  // namespace

TEST(MlaHead, OutputShape) {
  std::mt19937_64 rng(1);
  MlaHead head(small_head(), DType::f64, 0);
  EXPECT_EQ(head.forward(rand_pyramid(rng, 4, 8), 32, 32).shape(), (Shape{32, 32, 3}));
  EXPECT_EQ(head.forward(rand_pyramid(rng, 3, 8), 24, 20).shape(), (Shape{24, 20, 3}));
}

TEST(MlaHead, EveryParameterReceivesGradient) {
  std::mt19937_64 rng(2);
  MlaHead head(small_head(), DType::f64, 0);
  FeaturePyramid p = rand_pyramid(rng, 4, 8);
  const Tensor loss = cross_entropy(head.forward(p, 16, 16), rand_mask(rng, 16, 16, 3));
  const GradRecord g = backward(loss);
  for (const auto& [name, t] : head.params()) {
    const auto v = g.grad(t).to_vector();
    EXPECT_TRUE(std::any_of(v.begin(), v.end(), [](double x) { return x != 0.0; })) << name;
  }
}

TEST(MlaHead, NotInputInvariant) {
  std::mt19937_64 rng(3);
  MlaHead head(small_head(), DType::f64, 0);
  Tensor y = rand_tensor({4, 4, 8}, rng);
  EXPECT_NE(head.forward(to_pyramid(y), 16, 16).to_vector(), head.forward(to_pyramid(scale(y, 2.0)), 16, 16).to_vector());
}

TEST(MlaHead, Gradient) {
  std::mt19937_64 rng(4);
  MlaHead head(small_head(), DType::f64, 0);
  Tensor w = rand_tensor({16, 16, 3}, rng);
  Tensor y = rand_tensor({4, 4, 8}, rng);
  EXPECT_LT(grad_check([&](const Tensor& t) { return weighted_sum(head.forward(to_pyramid(t), 16, 16), w); }, y), 1e-4);
}

TEST(FpnHead, OutputShape) {
  std::mt19937_64 rng(5);
  FpnHead head(small_head(), DType::f64, 0);
  EXPECT_EQ(head.forward(rand_pyramid(rng, 4, 8), 32, 32).shape(), (Shape{32, 32, 3}));
}

TEST(FpnHead, LateralWiring) {
  std::mt19937_64 rng(6);
  FpnHead head(small_head(), DType::f64, 0);
  auto& lat = head.lateral_weights();
  for (std::size_t l = 0; l < 3; ++l) {
    for (auto& v : lat[l].mutable_values<double>()) v = 0.0;
  }
  const FeaturePyramid base = rand_pyramid(rng, 4, 8);
  const auto out = head.forward(base, 16, 16).to_vector();

  // Only the top (p32) lateral is live: the finer levels no longer matter...
  FeaturePyramid finer = base;
  finer.p4 = rand_tensor(base.p4.shape(), rng);
  finer.p8 = rand_tensor(base.p8.shape(), rng);
  finer.p16 = rand_tensor(base.p16.shape(), rng);
  EXPECT_EQ(head.forward(finer, 16, 16).to_vector(), out);

  // ...but the top level does.
  FeaturePyramid top = base;
  top.p32 = rand_tensor(base.p32.shape(), rng);
  EXPECT_NE(head.forward(top, 16, 16).to_vector(), out);

  // With every lateral zero the head ignores its input entirely.
  for (auto& v : lat[3].mutable_values<double>()) v = 0.0;
  EXPECT_EQ(head.forward(top, 16, 16).to_vector(), head.forward(base, 16, 16).to_vector());
}

TEST(FpnHead, GradientOnFourByFourGrid) {
  std::mt19937_64 rng(7);
  FpnHead head(small_head(), DType::f64, 0);
  // The 0.01 classifier init leaves gradients near rounding noise; move every
  // weight off its init first.
  std::normal_distribution<double> jitter(0.0, 0.3);
  for (auto& [name, t] : head.params()) {
    Tensor w = t;
    for (auto& v : w.mutable_values<double>()) v += jitter(rng);
  }
  Tensor y = rand_tensor({4, 4, 8}, rng);
  const Mask target = rand_mask(rng, 16, 16, 3);
  // Summed rather than mean loss keeps gradients well above rounding noise.
  auto loss = [&](const FeaturePyramid& p) { return scale(cross_entropy(head.forward(p, 16, 16), target), 256.0); };
  EXPECT_LT(grad_check([&](const Tensor& t) { return loss(to_pyramid(t)); }, y, 1e-5, 1e-6), 1e-4);
  for (const auto& [name, param] : head.params()) {
    const Tensor probe = param;
    Tensor saved = param.clone();
    // Differentiate with respect to the live parameter by writing the probe
    // values into it for each evaluation.
    auto f = [&](const Tensor& t) {
      if (t.id() != probe.id()) {
        Tensor live = probe;
        auto dst = live.mutable_values<double>();
        auto src = t.values<double>();
        std::copy(src.begin(), src.end(), dst.begin());
      }
      return loss(to_pyramid(y));
    };
    Tensor leaf = probe;
    const Tensor analytic = backward(f(leaf)).grad(leaf);
    const Tensor numeric = finite_diff_grad([&](const Tensor& t) { NoGradGuard g; return f(t).item(); }, saved, 1e-5);
    Tensor live = probe;
    std::copy(saved.values<double>().begin(), saved.values<double>().end(), live.mutable_values<double>().begin());
    const auto a = analytic.to_vector(), n = numeric.to_vector();
    double worst = 0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], n[i], 1e-6));
    EXPECT_LT(worst, 1e-4) << name;
  }
}

TEST(Heads, FiniteForBoundedInputs) {
  std::mt19937_64 rng(8);
  for (HeadKind kind : {HeadKind::mla, HeadKind::fpn}) {
    DecoderHead head(kind, small_head(), DType::f32, 0);
    Tensor y = rand_tensor({4, 4, 8}, rng, DType::f32, -10, 10);
    EXPECT_NO_THROW(ensure_finite(head.forward(to_pyramid(y), 32, 32), "logits"));
    EXPECT_EQ(head.kind(), kind);
  }
  EXPECT_THROW(MlaHead(HeadConfig{8, 6, 0}, DType::f32, 0), std::invalid_argument);
  EXPECT_THROW(FpnHead(HeadConfig{8, 6, 0}, DType::f32, 0), std::invalid_argument);
}

TEST(Heads, SamePyramidContract) {
  // Both heads consume the identical pyramid object without adaptation.
  std::mt19937_64 rng(9);
  const FeaturePyramid p = rand_pyramid(rng, 4, 8);
  EXPECT_EQ(MlaHead(small_head(), DType::f64, 0).forward(p, 16, 16).shape(),
            FpnHead(small_head(), DType::f64, 0).forward(p, 16, 16).shape());
}

TEST(CrossEntropy, UniformLogits) {
  std::mt19937_64 rng(10);
  for (std::size_t k : {2u, 5u, 19u}) {
    const double loss = cross_entropy(Tensor::zeros({3, 4, k}, DType::f64), rand_mask(rng, 3, 4, k)).item();
    EXPECT_NEAR(loss, std::log(static_cast<double>(k)), 1e-12);
  }
  EXPECT_NEAR(cross_entropy(Tensor::zeros({2, 2, 5}), Mask(2, 2, 1)).item(), 1.6094, 1e-4);
}

TEST(CrossEntropy, Saturated) {
  std::vector<double> v(2 * 2 * 3, 0.0);
  Mask m(2, 2);
  for (std::size_t p = 0; p < 4; ++p) {
    m.labels[p] = static_cast<std::uint8_t>(p % 3);
    v[p * 3 + p % 3] = 1000.0;
  }
  EXPECT_LT(cross_entropy(Tensor::from_values({2, 2, 3}, v, DType::f64), m).item(), 1e-6);
}

TEST(CrossEntropy, IgnoreAndErrors) {
  Tensor logits = Tensor::zeros({2, 2, 3}, DType::f64);
  EXPECT_THROW(cross_entropy(logits, Mask(2, 2, kIgnoreIndex)), std::invalid_argument);
  Mask bad(2, 2, 0);
  bad.labels[3] = 3;
  EXPECT_THROW(cross_entropy(logits, bad), std::out_of_range);
  EXPECT_THROW(cross_entropy(logits, Mask(2, 3, 0)), ShapeError);

  // Ignored pixels do not count towards the mean.
  std::vector<double> v(12, 0.0);
  v[0] = 50.0;  // pixel 0 predicts class 0 confidently but is ignored
  Mask m(2, 2, 1);
  m.labels[0] = kIgnoreIndex;
  EXPECT_NEAR(cross_entropy(Tensor::from_values({2, 2, 3}, v, DType::f64), m).item(), std::log(3.0), 1e-12);
}

TEST(CrossEntropy, NonNegativeAndGradient) {
  std::mt19937_64 rng(11);
  Tensor logits = rand_tensor({3, 3, 4}, rng, DType::f64, -3, 3);
  Mask m = rand_mask(rng, 3, 3, 4);
  m.labels[4] = kIgnoreIndex;
  EXPECT_GE(cross_entropy(logits, m).item(), 0.0);
  EXPECT_LT(grad_check([&](const Tensor& t) { return cross_entropy(t, m); }, logits), 1e-4);
}

TEST(Confusion, PerfectPredictionIsDiagonal) {
  std::mt19937_64 rng(12);
  Mask m = rand_mask(rng, 5, 5, 4);
  ConfusionMatrix cm = accumulate_confusion(ConfusionMatrix(4), m, m);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t p = 0; p < 4; ++p)
      if (t != p) EXPECT_EQ(cm.at(t, p), 0u);
  EXPECT_EQ(cm.total(), 25u);
}

TEST(Confusion, AllIgnoredLeavesUnchanged) {
  std::mt19937_64 rng(13);
  ConfusionMatrix cm(3);
  cm.accumulate(rand_mask(rng, 2, 2, 3), rand_mask(rng, 2, 2, 3));
  const ConfusionMatrix before = cm;
  cm.accumulate(rand_mask(rng, 2, 2, 3), Mask(2, 2, kIgnoreIndex));
  EXPECT_EQ(cm, before);
}

TEST(Confusion, MatchesPixelLoop) {
  std::mt19937_64 rng(14);
  ConfusionMatrix cm(5);
  std::vector<std::uint64_t> oracle(25, 0);
  std::size_t scored = 0;
  for (int trial = 0; trial < 10; ++trial) {
    Mask pred = rand_mask(rng, 6, 7, 5), truth = rand_mask(rng, 6, 7, 5);
    truth.labels[trial] = kIgnoreIndex;
    cm.accumulate(pred, truth);
    for (std::size_t i = 0; i < truth.size(); ++i) {
      if (truth.labels[i] == kIgnoreIndex) continue;
      ++oracle[truth.labels[i] * 5 + pred.labels[i]];
      ++scored;
    }
  }
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t p = 0; p < 5; ++p) EXPECT_EQ(cm.at(t, p), oracle[t * 5 + p]);
  EXPECT_EQ(cm.total(), scored);
  EXPECT_THROW(cm.accumulate(Mask(2, 2), Mask(2, 3)), ShapeError);
}

TEST(Confusion, MergeIsAdditive) {
  std::mt19937_64 rng(15);
  Mask p1 = rand_mask(rng, 4, 4, 3), t1 = rand_mask(rng, 4, 4, 3);
  Mask p2 = rand_mask(rng, 4, 4, 3), t2 = rand_mask(rng, 4, 4, 3);
  ConfusionMatrix a(3), b(3), whole(3);
  a.accumulate(p1, t1);
  b.accumulate(p2, t2);
  whole.accumulate(p1, t1);
  whole.accumulate(p2, t2);
  ConfusionMatrix ab = a, ba = b;
  ab.merge(b);
  ba.merge(a);
  EXPECT_EQ(ab, whole);
  EXPECT_EQ(ba, whole);
}

TEST(Miou, HandComputedSevenTwelfths) {
  Mask pred(1, 4), truth(1, 4);
  pred.labels = {0, 0, 1, 1};
  truth.labels = {0, 1, 1, 1};
  const IouReport r = miou(accumulate_confusion(ConfusionMatrix(2), pred, truth));
  EXPECT_EQ(*r.per_class[0], 0.5);
  EXPECT_EQ(*r.per_class[1], 2.0 / 3.0);
  EXPECT_EQ(*r.mean, 7.0 / 12.0);
}

TEST(Miou, PerfectIsOne) {
  std::mt19937_64 rng(16);
  Mask m = rand_mask(rng, 8, 8, 4);
  EXPECT_EQ(*miou(accumulate_confusion(ConfusionMatrix(4), m, m)).mean, 1.0);
}

TEST(Miou, AbsentClassExcluded) {
  Mask pred(1, 4), truth(1, 4);
  pred.labels = {0, 0, 1, 1};
  truth.labels = {0, 1, 1, 1};
  const IouReport r = miou(accumulate_confusion(ConfusionMatrix(3), pred, truth));
  EXPECT_FALSE(r.per_class[2].has_value());
  EXPECT_NEAR(*r.mean, 7.0 / 12.0, 1e-15);
  EXPECT_FALSE(miou(ConfusionMatrix(3)).mean.has_value());
}

TEST(Miou, RangeAndDiagonalProperty) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Mask pred = rand_mask(rng, 4, 4, 4), truth = rand_mask(rng, 4, 4, 4);
    const ConfusionMatrix cm = accumulate_confusion(ConfusionMatrix(4), pred, truth);
    const double m = *miou(cm).mean;
    EXPECT_GE(m, 0.0);
    EXPECT_LE(m, 1.0);
    bool diagonal = true;
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t p = 0; p < 4; ++p) diagonal &= (t == p || cm.at(t, p) == 0);
    EXPECT_EQ(m == 1.0, diagonal);
  }
}

TEST(Miou, CsvFormat) {
  Mask pred(1, 4), truth(1, 4);
  pred.labels = {0, 0, 1, 1};
  truth.labels = {0, 1, 1, 1};
  std::ostringstream os;
  write_iou_csv(os, miou(accumulate_confusion(ConfusionMatrix(3), pred, truth)));
  EXPECT_EQ(os.str(), "class,iou\n0,0.5\n1,0.666666667\n2,nan\nmean,0.583333333\n");
}

TEST(ArgmaxMask, PicksLargest) {
  Tensor s = Tensor::from_vector({1, 2, 3}, std::vector<double>{0.1, 0.7, 0.2, 0.5, 0.4, 0.1});
  EXPECT_EQ(argmax_mask(s).labels, (std::vector<std::uint8_t>{1, 0}));
}
