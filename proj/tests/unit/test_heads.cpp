#include <gtest/gtest.h>

#include "dosr/heads.hpp"
#include "test_support.hpp"

using namespace dosr;
using dosr::testing::random_tensor;

namespace {

FeatureBundle features(int n, int d, int h, int w, Rng& rng, double scale = 1.0) {
  FeatureBundle f;
  f.shared = random_tensor(n, d, h, w, rng, scale);
  for (int s : {32, 16, 8}) f.aux_taps.push_back({s, random_tensor(n, d, h * 4 / s, w * 4 / s, rng, scale)});
  f.input_h = f.padded_h = h * 4;
  f.input_w = f.padded_w = w * 4;
  return f;
}

HeadConfig config(HeadKind kind, int classes, int hidden = 16) {
  HeadConfig c;
  c.kind = kind;
  c.num_classes = classes;
  c.hidden_width = hidden;
  return c;
}

PredictionMaps zero_maps(HeadKind kind, int k, int h = 3, int w = 4) {
  PredictionMaps m;
  m.kind = kind;
  m.class_logits = Tensor(1, k, h, w);
  if (kind == HeadKind::kTwoHead) m.outlier_logits = Tensor(1, 2, h, w);
  if (kind == HeadKind::kConfidence) m.confidence_logit = Tensor(1, 1, h, w);
  return m;
}

}  // namespace

TEST(Head, TwoHeadShapes) {
  Rng rng(1);
  const Head head(config(HeadKind::kTwoHead, 19, 32), 256, {32, 16, 8}, 1);
  const PredictionMaps m = head.infer(features(1, 256, 32, 32, rng));
  EXPECT_EQ(m.class_logits.c(), 19);
  EXPECT_EQ(m.class_logits.h(), 32);
  EXPECT_EQ(m.class_logits.w(), 32);
  ASSERT_TRUE(m.outlier_logits.has_value());
  EXPECT_EQ(m.outlier_logits->c(), 2);
  EXPECT_EQ(m.outlier_logits->h(), 32);
  EXPECT_FALSE(m.confidence_logit.has_value());
  ASSERT_EQ(m.aux_logits.size(), 3u);
  EXPECT_EQ(m.aux_logits[0].stride, 32);
  EXPECT_EQ(m.aux_logits[0].features.c(), 19);
  EXPECT_EQ(m.aux_logits[0].features.h(), 4);
}

TEST(Head, CPlus1HasExtraChannel) {
  Rng rng(2);
  const Head head(config(HeadKind::kCPlus1, 19), 32, {32, 16, 8}, 2);
  const PredictionMaps m = head.infer(features(1, 32, 32, 32, rng));
  EXPECT_EQ(m.class_logits.c(), 20);
  EXPECT_FALSE(m.outlier_logits.has_value());
  EXPECT_EQ(m.aux_logits[2].features.c(), 19);
}

TEST(Head, MultiLabelAndOeShapes) {
  Rng rng(3);
  for (HeadKind kind : {HeadKind::kMultiLabel, HeadKind::kOeCway}) {
    const Head head(config(kind, 4), 16, {32, 16, 8}, 3);
    const PredictionMaps m = head.infer(features(2, 16, 8, 8, rng));
    EXPECT_EQ(m.class_logits.c(), 4);
    EXPECT_EQ(m.class_logits.n(), 2);
    EXPECT_FALSE(m.outlier_logits.has_value());
    EXPECT_FALSE(m.confidence_logit.has_value());
  }
}

TEST(Head, ConfidenceHasOneLogit) {
  Rng rng(4);
  const Head head(config(HeadKind::kConfidence, 4), 16, {32, 16, 8}, 4);
  const PredictionMaps m = head.infer(features(1, 16, 8, 8, rng));
  ASSERT_TRUE(m.confidence_logit.has_value());
  EXPECT_EQ(m.confidence_logit->c(), 1);
}

TEST(Head, ParameterCountIndependentOfInputSize) {
  Rng rng(5);
  Head head(config(HeadKind::kTwoHead, 4), 16, {32, 16, 8}, 5);
  auto count = [&] {
    std::size_t n = 0;
    for (const Param* p : std::as_const(head).parameters()) n += p->value.size();
    return n;
  };
  const std::size_t before = count();
  head.infer(features(1, 16, 8, 8, rng));
  head.infer(features(1, 16, 24, 16, rng));
  EXPECT_EQ(count(), before);
}

TEST(Head, RejectsWrongFeatureWidth) {
  Rng rng(6);
  const Head head(config(HeadKind::kTwoHead, 4), 16, {32, 16, 8}, 6);
  EXPECT_THROW(head.infer(features(1, 8, 8, 8, rng)), ShapeError);
  EXPECT_THROW(HeadConfig(config(HeadKind::kTwoHead, 1)).validate(), std::invalid_argument);
}

TEST(Head, OutputsFiniteForLargeInputs) {
  Rng rng(7);
  for (HeadKind kind : {HeadKind::kTwoHead, HeadKind::kConfidence, HeadKind::kOeCway, HeadKind::kCPlus1,
                        HeadKind::kMultiLabel}) {
    const Head head(config(kind, 4), 8, {32, 16, 8}, 7);
    const PredictionMaps m = head.infer(features(1, 8, 8, 8, rng, 1e3));
    const Tensor posterior = class_posterior(m);
    for (double v : posterior.values()) ASSERT_TRUE(std::isfinite(v));
    if (kind != HeadKind::kOeCway) {
      const Tensor op = outlier_posterior(m);
      for (double v : op.values()) {
        ASSERT_TRUE(std::isfinite(v));
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
      }
    }
  }
}

TEST(Posterior, ZeroLogitsAreUniform) {
  const Tensor p = class_posterior(zero_maps(HeadKind::kTwoHead, 4));
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 0.25);
  const Tensor q = class_posterior(zero_maps(HeadKind::kMultiLabel, 4));
  for (double v : q.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Posterior, SoftmaxRowsSumToOne) {
  Rng rng(8);
  PredictionMaps m = zero_maps(HeadKind::kOeCway, 7, 9, 11);
  m.class_logits = random_tensor(1, 7, 9, 11, rng, 10.0);
  const Tensor p = class_posterior(m);
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 11; ++x) {
      double s = 0.0;
      for (int c = 0; c < 7; ++c) s += p.at(0, c, y, x);
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Posterior, OutlierMappingsPerKind) {
  PredictionMaps two = zero_maps(HeadKind::kTwoHead, 4, 1, 3);
  two.outlier_logits->at(0, 0, 0, 1) = 20.0;
  two.outlier_logits->at(0, 1, 0, 1) = -20.0;
  two.outlier_logits->at(0, 0, 0, 2) = -20.0;
  two.outlier_logits->at(0, 1, 0, 2) = 20.0;
  const Tensor p = outlier_posterior(two);
  EXPECT_DOUBLE_EQ(p.at(0, 0, 0, 0), 0.5);
  EXPECT_NEAR(p.at(0, 0, 0, 1), 0.0, 1e-15);
  EXPECT_NEAR(p.at(0, 0, 0, 2), 1.0, 1e-15);

  PredictionMaps cp1 = zero_maps(HeadKind::kCPlus1, 5, 1, 1);
  cp1.class_logits.at(0, 4, 0, 0) = std::log(4.0);  // exp = 4 vs four ones
  EXPECT_NEAR(outlier_posterior(cp1).at(0, 0, 0, 0), 0.5, 1e-15);

  PredictionMaps ml = zero_maps(HeadKind::kMultiLabel, 3, 1, 1);
  ml.class_logits.at(0, 1, 0, 0) = 2.0;
  EXPECT_NEAR(outlier_posterior(ml).at(0, 0, 0, 0), 1.0 - 1.0 / (1.0 + std::exp(-2.0)), 1e-15);

  PredictionMaps conf = zero_maps(HeadKind::kConfidence, 3, 1, 1);
  conf.confidence_logit->at(0, 0, 0, 0) = 1.0;
  EXPECT_NEAR(outlier_posterior(conf).at(0, 0, 0, 0), 1.0 - 1.0 / (1.0 + std::exp(-1.0)), 1e-15);

  EXPECT_THROW(outlier_posterior(zero_maps(HeadKind::kOeCway, 3)), std::invalid_argument);
}

TEST(Posterior, TwoHeadShiftInvariance) {
  Rng rng(9);
  PredictionMaps m = zero_maps(HeadKind::kTwoHead, 4, 6, 6);
  *m.outlier_logits = random_tensor(1, 2, 6, 6, rng, 3.0);
  const Tensor before = outlier_posterior(m);
  for (double& v : m.outlier_logits->values()) v += 17.25;
  const Tensor after = outlier_posterior(m);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(before.data()[i], after.data()[i], 1e-14);
}

TEST(Posterior, OutlierProbabilityIgnoresClassLogits) {
  Rng rng(10);
  PredictionMaps m = zero_maps(HeadKind::kTwoHead, 4, 5, 5);
  *m.outlier_logits = random_tensor(1, 2, 5, 5, rng);
  const Tensor before = outlier_posterior(m);
  m.class_logits = random_tensor(1, 4, 5, 5, rng, 50.0);
  const Tensor after = outlier_posterior(m);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before.data()[i], after.data()[i]);
}

TEST(Head, DropoutOnlyWithRng) {
  Rng rng(11);
  HeadConfig c = config(HeadKind::kTwoHead, 4);
  c.dropout = 0.5;
  const Head head(c, 16, {32, 16, 8}, 11);
  const FeatureBundle f = features(1, 16, 8, 8, rng);
  const PredictionMaps a = head.infer(f), b = head.infer(f);
  for (std::size_t i = 0; i < a.class_logits.size(); ++i) ASSERT_EQ(a.class_logits.data()[i], b.class_logits.data()[i]);
  Rng d1(1), d2(2);
  const PredictionMaps x = head.infer(f, &d1), y = head.infer(f, &d2);
  double diff = 0.0;
  for (std::size_t i = 0; i < x.class_logits.size(); ++i) diff += std::abs(x.class_logits.data()[i] - y.class_logits.data()[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(Head, NamesRoundTrip) {
  for (HeadKind kind : {HeadKind::kTwoHead, HeadKind::kConfidence, HeadKind::kOeCway, HeadKind::kCPlus1,
                        HeadKind::kMultiLabel}) {
    EXPECT_EQ(head_kind_from_string(to_string(kind)), kind);
  }
  EXPECT_THROW(head_kind_from_string("three_head"), std::invalid_argument);
}
