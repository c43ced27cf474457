#include <gtest/gtest.h>

#include <numeric>

#include "dosr/losses.hpp"
#include "test_support.hpp"

using namespace dosr;
using dosr::testing::central_difference;
using dosr::testing::close_rel;
using dosr::testing::random_labels;
using dosr::testing::random_tensor;

namespace {

constexpr int kN = 2, kH = 8, kW = 8;

struct Maps {
  std::vector<LabelMap> seg, outlier;
};

/// Random labels: outliers, ignored pixels and inlier classes; outliers never carry a class.
Maps random_maps(int classes, Rng& rng, int h = kH, int w = kW) {
  Maps m;
  for (int n = 0; n < kN; ++n) {
    LabelMap seg = random_labels(h, w, classes, rng), out(h, w);
    for (std::size_t i = 0; i < seg.size(); ++i) {
      const double u = rng.uniform();
      if (u < 0.25) {
        out.data[i] = 1;
        seg.data[i] = kIgnore;
      } else if (u < 0.35) {
        out.data[i] = kIgnore;
        seg.data[i] = kIgnore;
      } else if (u < 0.42) {
        seg.data[i] = kIgnore;
      }
    }
    m.seg.push_back(seg);
    m.outlier.push_back(out);
  }
  return m;
}

std::vector<double> softmax_at(const Tensor& t, int n, int y, int x) {
  std::vector<double> p(t.c());
  double z = 0.0;
  for (int c = 0; c < t.c(); ++c) z += std::exp(t.at(n, c, y, x));
  for (int c = 0; c < t.c(); ++c) p[c] = std::exp(t.at(n, c, y, x)) / z;
  return p;
}

/// Checks every gradient entry of `grad` against central differences of `f`.
void expect_gradient(Tensor& x, const Tensor& grad, const std::function<double()>& f, const std::string& what) {
  ASSERT_TRUE(x.same_shape(grad)) << what;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double fd = central_difference(f, x.data()[i], 1e-6);
    ASSERT_TRUE(close_rel(grad.data()[i], fd, 1e-3, 1e-9)) << what << "[" << i << "] analytic " << grad.data()[i]
                                                            << " fd " << fd;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Closed-form values

TEST(MaskedCls, AllOutliersGiveZero) {
  Rng rng(1);
  const Tensor logits = random_tensor(1, 4, 4, 4, rng);
  const std::vector<LabelMap> seg{LabelMap(4, 4, kIgnore)}, out{LabelMap(4, 4, 1)};
  const LossResult r = masked_cls_loss(logits, seg, out);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(r.count, 0u);
  for (double g : r.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(MaskedCls, UniformLogitsGiveLogC) {
  Rng rng(2);
  const Tensor logits(1, 4, 4, 4, 0.0);
  const std::vector<LabelMap> seg{random_labels(4, 4, 4, rng)}, out{LabelMap(4, 4, 0)};
  EXPECT_NEAR(masked_cls_loss(logits, seg, out).value, std::log(4.0), 1e-12);
}

TEST(MaskedCls, MatchesDirectSum) {
  Rng rng(3);
  const Maps m = random_maps(5, rng);
  const Tensor logits = random_tensor(kN, 5, kH, kW, rng, 2.0);
  double total = 0.0;
  int count = 0;
  for (int n = 0; n < kN; ++n)
    for (int y = 0; y < kH; ++y)
      for (int x = 0; x < kW; ++x) {
        if (m.outlier[n].at(y, x) != 0 || m.seg[n].at(y, x) == kIgnore) continue;
        total -= std::log(softmax_at(logits, n, y, x)[m.seg[n].at(y, x)]);
        ++count;
      }
  const LossResult r = masked_cls_loss(logits, m.seg, m.outlier);
  EXPECT_EQ(r.count, static_cast<std::size_t>(count));
  EXPECT_NEAR(r.value, total / count, 1e-12);
}

TEST(OutlierBce, Limits) {
  Tensor logits(1, 2, 2, 2);
  const std::vector<LabelMap> out{LabelMap(2, 2, 0)};
  EXPECT_NEAR(outlier_bce_loss(logits, out).value, std::log(2.0), 1e-12);
  std::vector<LabelMap> mixed{LabelMap(2, 2, 0)};
  mixed[0].at(1, 1) = 1;
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      const bool o = mixed[0].at(y, x) == 1;
      logits.at(0, 0, y, x) = o ? -20 : 20;
      logits.at(0, 1, y, x) = o ? 20 : -20;
    }
  EXPECT_LE(outlier_bce_loss(logits, mixed).value, 1e-6);
  const std::vector<LabelMap> ignored{LabelMap(2, 2, kIgnore)};
  EXPECT_EQ(outlier_bce_loss(logits, ignored).value, 0.0);
}

TEST(AuxSoft, OneHotWindowAndHalfSplit) {
  // C = 2, stride 4, one cell: uniform logits vs half/half target gives ln 2
  const Tensor logits(1, 2, 1, 1, 0.0);
  LabelMap seg(4, 4, 0);
  for (int y = 0; y < 4; ++y)
    for (int x = 2; x < 4; ++x) seg.at(y, x) = 1;
  const std::vector<LabelMap> s{seg}, o{LabelMap(4, 4, 0)};
  EXPECT_NEAR(aux_soft_loss(logits, 4, s, o).value, std::log(2.0), 1e-12);

  // all class 2: target is one-hot, loss = -log p_2
  Tensor l3(1, 3, 1, 1);
  l3.at(0, 0, 0, 0) = 0.3;
  l3.at(0, 1, 0, 0) = -1.0;
  l3.at(0, 2, 0, 0) = 0.7;
  const std::vector<LabelMap> s2{LabelMap(4, 4, 2)};
  EXPECT_NEAR(aux_soft_loss(l3, 4, s2, o).value, -std::log(softmax_at(l3, 0, 0, 0)[2]), 1e-12);
}

TEST(AuxSoft, OutlierWindowsExcluded) {
  Rng rng(4);
  const Tensor logits = random_tensor(1, 3, 2, 2, rng);
  LabelMap seg(8, 8, 1), out(8, 8, 0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      out.at(y, x) = 1;
      seg.at(y, x) = kIgnore;
    }
  const std::vector<LabelMap> s{seg}, o{out};
  const LossResult r = aux_soft_loss(logits, 4, s, o);
  EXPECT_EQ(r.count, 3u);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(r.grad.at(0, c, 0, 0), 0.0);
}

TEST(AuxSoft, MatchesHistogramOracle) {
  Rng rng(5);
  const Maps m = random_maps(3, rng, 16, 16);
  const Tensor logits = random_tensor(kN, 3, 4, 4, rng);
  double total = 0.0;
  int cells = 0;
  for (int n = 0; n < kN; ++n)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        std::vector<double> hist(3, 0.0);
        for (int y = 4 * i; y < 4 * i + 4; ++y)
          for (int x = 4 * j; x < 4 * j + 4; ++x)
            if (m.outlier[n].at(y, x) == 0 && m.seg[n].at(y, x) != kIgnore) hist[m.seg[n].at(y, x)] += 1.0;
        const double sum = std::accumulate(hist.begin(), hist.end(), 0.0);
        if (sum == 0.0) continue;
        const auto p = softmax_at(logits, n, i, j);
        for (int c = 0; c < 3; ++c) total -= hist[c] / sum * std::log(p[c]);
        ++cells;
      }
  EXPECT_NEAR(aux_soft_loss(logits, 4, m.seg, m.outlier).value, total / cells, 1e-12);
}

TEST(OeUniformity, ZeroAtUniformAndKnownValue) {
  const std::vector<LabelMap> o{LabelMap(1, 1, 1)};
  EXPECT_NEAR(oe_uniformity_loss(Tensor(1, 4, 1, 1, 0.0), o).value, 0.0, 1e-15);
  Tensor logits(1, 4, 1, 1, 0.0);
  logits.at(0, 0, 0, 0) = 20.0;
  const auto p = softmax_at(logits, 0, 0, 0);
  double kl = 0.0;
  for (double pc : p) kl += 0.25 * (std::log(0.25) - std::log(pc));
  EXPECT_NEAR(oe_uniformity_loss(logits, o).value, kl, 1e-9);
  const std::vector<LabelMap> none{LabelMap(1, 1, 0)};
  EXPECT_EQ(oe_uniformity_loss(logits, none).value, 0.0);
}

TEST(Confidence, FullConfidenceIsPlainCe) {
  Rng rng(6);
  const Tensor logits = random_tensor(1, 4, 3, 3, rng);
  const Tensor z(1, 1, 3, 3, 40.0);  // sigmoid(40) = 1 - 4e-18
  const std::vector<LabelMap> s{random_labels(3, 3, 4, rng)}, o{LabelMap(3, 3, 0)};
  const double ce = masked_cls_loss(logits, s, o).value;
  EXPECT_NEAR(confidence_loss(logits, z, s, o).value, ce, 1e-6);
}

TEST(Confidence, ZeroConfidenceIsClampedPenalty) {
  Rng rng(7);
  const Tensor logits = random_tensor(1, 4, 2, 2, rng);
  const Tensor z(1, 1, 2, 2, -60.0);
  const std::vector<LabelMap> s{random_labels(2, 2, 4, rng)}, o{LabelMap(2, 2, 0)};
  const ConfidenceLossResult r = confidence_loss(logits, z, s, o, 0.5);
  // hint term -log(c p + 1 - c) is ~0 and the penalty is -0.5 log(1e-6)
  EXPECT_NEAR(r.value, -0.5 * std::log(kMinConfidence), 1e-5);
  EXPECT_TRUE(std::isfinite(r.value));
}

TEST(Compound, WeightsAndMissingParts) {
  LossParts p;
  p.cls = 1.0;
  p.od = 1.0;
  p.aux = 1.0;
  EXPECT_NEAR(compound_loss(p, LossWeights{}, HeadKind::kTwoHead), 1.12, 1e-15);
  LossParts zero{0.0, 0.0, std::nullopt, 0.0};
  EXPECT_EQ(compound_loss(zero, LossWeights{}, HeadKind::kTwoHead), 0.0);
  LossParts missing;
  missing.cls = 1.0;
  missing.aux = 1.0;
  EXPECT_THROW(compound_loss(missing, LossWeights{}, HeadKind::kTwoHead), std::invalid_argument);
  EXPECT_THROW(compound_loss(missing, LossWeights{}, HeadKind::kOeCway), std::invalid_argument);
  EXPECT_NO_THROW(compound_loss(missing, LossWeights{}, HeadKind::kCPlus1));
  LossWeights no_aux;
  no_aux.aux = 0.0;
  LossParts a = p, b = p;
  b.aux = 123.0;
  EXPECT_EQ(compound_loss(a, no_aux, HeadKind::kTwoHead), compound_loss(b, no_aux, HeadKind::kTwoHead));
}

TEST(Compound, LinearInEachPart) {
  LossParts p;
  p.cls = 0.7;
  p.od = 0.2;
  p.aux = 1.3;
  const double base = compound_loss(p, LossWeights{}, HeadKind::kTwoHead);
  LossParts q = p;
  *q.od += 1.0;
  EXPECT_NEAR(compound_loss(q, LossWeights{}, HeadKind::kTwoHead) - base, 0.12, 1e-14);
}

// ---------------------------------------------------------------------------
// Mask isolation

TEST(MaskIsolation, OutlierPixelLogitsDoNotAffectCls) {
  Rng rng(8);
  const Maps m = random_maps(4, rng);
  Tensor logits = random_tensor(kN, 4, kH, kW, rng);
  const LossResult before = masked_cls_loss(logits, m.seg, m.outlier);
  for (int n = 0; n < kN; ++n)
    for (int y = 0; y < kH; ++y)
      for (int x = 0; x < kW; ++x)
        if (m.outlier[n].at(y, x) == 1)
          for (int c = 0; c < 4; ++c) logits.at(n, c, y, x) += rng.normal(0.0, 5.0);
  const LossResult after = masked_cls_loss(logits, m.seg, m.outlier);
  EXPECT_EQ(before.value, after.value);
  for (std::size_t i = 0; i < before.grad.size(); ++i) ASSERT_EQ(before.grad.data()[i], after.grad.data()[i]);
}

TEST(MaskIsolation, RelabelingMaskedPixelIsBitIdentical) {
  Rng rng(9);
  Maps m = random_maps(4, rng);
  const Tensor logits = random_tensor(kN, 4, kH, kW, rng);
  const LossResult before = masked_cls_loss(logits, m.seg, m.outlier);
  for (int n = 0; n < kN; ++n)
    for (std::size_t i = 0; i < m.seg[n].size(); ++i)
      if (m.outlier[n].data[i] == 1) m.seg[n].data[i] = static_cast<std::uint8_t>(rng.uniform_int(0, 3));
  const LossResult after = masked_cls_loss(logits, m.seg, m.outlier);
  EXPECT_EQ(before.value, after.value);
  for (std::size_t i = 0; i < before.grad.size(); ++i) ASSERT_EQ(before.grad.data()[i], after.grad.data()[i]);
}

TEST(MaskIsolation, ClassLogitsNeverAffectOutlierLoss) {
  Rng rng(10);
  const Maps m = random_maps(4, rng);
  PredictionMaps maps;
  maps.kind = HeadKind::kTwoHead;
  maps.class_logits = random_tensor(kN, 4, kH, kW, rng);
  maps.outlier_logits = random_tensor(kN, 2, kH, kW, rng);
  const BatchLoss a = evaluate_batch_loss(maps, m.seg, m.outlier, LossWeights{}, 1);
  maps.class_logits = random_tensor(kN, 4, kH, kW, rng, 4.0);
  const BatchLoss b = evaluate_batch_loss(maps, m.seg, m.outlier, LossWeights{}, 1);
  EXPECT_EQ(*a.parts.od, *b.parts.od);
  for (std::size_t i = 0; i < a.grad.outlier_logits->size(); ++i)
    ASSERT_EQ(a.grad.outlier_logits->data()[i], b.grad.outlier_logits->data()[i]);
}

// ---------------------------------------------------------------------------
// Gradients against central differences

TEST(Gradients, MaskedCls) {
  Rng rng(20);
  const Maps m = random_maps(4, rng);
  Tensor logits = random_tensor(kN, 4, kH, kW, rng);
  const Tensor g = masked_cls_loss(logits, m.seg, m.outlier).grad;
  expect_gradient(logits, g, [&] { return masked_cls_loss(logits, m.seg, m.outlier).value; }, "cls");
}

TEST(Gradients, OutlierBce) {
  Rng rng(21);
  const Maps m = random_maps(4, rng);
  Tensor logits = random_tensor(kN, 2, kH, kW, rng);
  const Tensor g = outlier_bce_loss(logits, m.outlier).grad;
  expect_gradient(logits, g, [&] { return outlier_bce_loss(logits, m.outlier).value; }, "od");
}

TEST(Gradients, AuxSoft) {
  Rng rng(22);
  const Maps m = random_maps(3, rng, 32, 32);
  Tensor logits = random_tensor(kN, 3, 8, 8, rng);
  const Tensor g = aux_soft_loss(logits, 4, m.seg, m.outlier).grad;
  expect_gradient(logits, g, [&] { return aux_soft_loss(logits, 4, m.seg, m.outlier).value; }, "aux");
}

TEST(Gradients, OeUniformity) {
  Rng rng(23);
  const Maps m = random_maps(4, rng);
  Tensor logits = random_tensor(kN, 4, kH, kW, rng);
  const Tensor g = oe_uniformity_loss(logits, m.outlier).grad;
  expect_gradient(logits, g, [&] { return oe_uniformity_loss(logits, m.outlier).value; }, "oe");
}

TEST(Gradients, Confidence) {
  Rng rng(24);
  const Maps m = random_maps(4, rng);
  Tensor logits = random_tensor(kN, 4, kH, kW, rng);
  Tensor z = random_tensor(kN, 1, kH, kW, rng);
  const ConfidenceLossResult r = confidence_loss(logits, z, m.seg, m.outlier);
  auto f = [&] { return confidence_loss(logits, z, m.seg, m.outlier).value; };
  expect_gradient(logits, r.class_grad, f, "confidence/class");
  expect_gradient(z, r.confidence_grad, f, "confidence/logit");
}

TEST(Gradients, CPlus1AndMultiLabel) {
  Rng rng(25);
  const Maps m = random_maps(4, rng);
  Tensor logits5 = random_tensor(kN, 5, kH, kW, rng);
  expect_gradient(logits5, cplus1_loss(logits5, m.seg, m.outlier).grad,
                  [&] { return cplus1_loss(logits5, m.seg, m.outlier).value; }, "cplus1");
  Tensor logits4 = random_tensor(kN, 4, kH, kW, rng);
  expect_gradient(logits4, multilabel_bce_loss(logits4, m.seg, m.outlier).grad,
                  [&] { return multilabel_bce_loss(logits4, m.seg, m.outlier).value; }, "multilabel");
}

TEST(Gradients, CompoundBatchLoss) {
  Rng rng(26);
  const Maps m = random_maps(3, rng, 32, 32);
  PredictionMaps maps;
  maps.kind = HeadKind::kTwoHead;
  maps.class_logits = random_tensor(kN, 3, 8, 8, rng);
  maps.outlier_logits = random_tensor(kN, 2, 8, 8, rng);
  maps.aux_logits.push_back({8, random_tensor(kN, 3, 4, 4, rng)});
  const BatchLoss loss = evaluate_batch_loss(maps, m.seg, m.outlier, LossWeights{});
  auto f = [&] { return evaluate_batch_loss(maps, m.seg, m.outlier, LossWeights{}).total; };
  expect_gradient(maps.class_logits, loss.grad.class_logits, f, "compound/class");
  expect_gradient(*maps.outlier_logits, *loss.grad.outlier_logits, f, "compound/outlier");
  expect_gradient(maps.aux_logits[0].features, loss.grad.aux_logits[0], f, "compound/aux");
}

// ---------------------------------------------------------------------------

TEST(Losses, NonNegativeAndLogKAtUniform) {
  Rng rng(30);
  const Maps m = random_maps(4, rng);
  const Tensor u4(kN, 4, kH, kW, 0.0), u5(kN, 5, kH, kW, 0.0), u2(kN, 2, kH, kW, 0.0);
  EXPECT_NEAR(masked_cls_loss(u4, m.seg, m.outlier).value, std::log(4.0), 1e-12);
  EXPECT_NEAR(cplus1_loss(u5, m.seg, m.outlier).value, std::log(5.0), 1e-12);
  EXPECT_NEAR(outlier_bce_loss(u2, m.outlier).value, std::log(2.0), 1e-12);
  for (int t = 0; t < 20; ++t) {
    const Tensor l = random_tensor(kN, 4, kH, kW, rng, 3.0);
    EXPECT_GE(masked_cls_loss(l, m.seg, m.outlier).value, 0.0);
    EXPECT_GE(oe_uniformity_loss(l, m.outlier).value, 0.0);
    EXPECT_GE(multilabel_bce_loss(l, m.seg, m.outlier).value, 0.0);
  }
}

TEST(DownsampleLabels, TakesCellCenters) {
  LabelMap full(8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) full.at(y, x) = static_cast<std::uint8_t>(y * 8 + x);
  const LabelMap low = downsample_labels(full, 2, 2, 4);
  EXPECT_EQ(low.at(0, 0), 2 * 8 + 2);
  EXPECT_EQ(low.at(1, 1), 6 * 8 + 6);
  const LabelMap clamped = downsample_labels(LabelMap(5, 5, 3), 2, 2, 4);
  EXPECT_EQ(clamped.at(1, 1), 3);
}
