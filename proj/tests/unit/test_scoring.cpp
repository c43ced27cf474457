#include <gtest/gtest.h>

#include <fstream>

#include "dosr/scoring.hpp"
#include "test_support.hpp"

using namespace dosr;
using dosr::testing::random_tensor;
using dosr::testing::TempDir;

namespace {

Tensor posterior_of(const std::vector<double>& p) {
  Tensor t(1, static_cast<int>(p.size()), 1, 1);
  for (std::size_t c = 0; c < p.size(); ++c) t.at(0, static_cast<int>(c), 0, 0) = p[c];
  return t;
}

ScoreMap constant(Criterion c, int h, int w, double v) { return {c, RealMap(h, w, v)}; }

Tensor random_posterior(int k, int h, int w, Rng& rng) {
  Tensor t = random_tensor(1, k, h, w, rng, 3.0);
  for (int i = 0; i < h * w; ++i) {
    double total = 0.0;
    for (int c = 0; c < k; ++c) total += (t.plane(0, c)[i] = std::exp(t.plane(0, c)[i]));
    for (int c = 0; c < k; ++c) t.plane(0, c)[i] /= total;
  }
  return t;
}

Model small_model(HeadKind kind, double dropout, std::uint64_t seed) {
  ExtractorConfig e;
  e.stage_widths = {8, 12, 16, 20};
  e.feature_width = 12;
  HeadConfig h;
  h.kind = kind;
  h.num_classes = 3;
  h.hidden_width = 8;
  h.dropout = dropout;
  return Model(e, h, seed);
}

double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double q : p)
    if (q > 0.0) h -= q * std::log(q);
  return h;
}

}  // namespace

TEST(Msm, Examples) {
  EXPECT_DOUBLE_EQ(score_msm(posterior_of({0, 1, 0, 0})).scores.data[0], 0.0);
  EXPECT_DOUBLE_EQ(score_msm(posterior_of({0.25, 0.25, 0.25, 0.25})).scores.data[0], 0.75);
  EXPECT_NEAR(score_msm(posterior_of({0.9, 0.1})).scores.data[0], 0.1, 1e-15);
  // cplus1 posteriors: only the inlier channels take part
  EXPECT_NEAR(score_msm(posterior_of({0.3, 0.1, 0.6}), 2).scores.data[0], 0.7, 1e-15);
}

TEST(Op, Examples) {
  PredictionMaps m;
  m.kind = HeadKind::kTwoHead;
  m.class_logits = Tensor(1, 3, 1, 3);
  m.outlier_logits = Tensor(1, 2, 1, 3);
  m.outlier_logits->at(0, 0, 0, 1) = -20.0;
  m.outlier_logits->at(0, 1, 0, 1) = 20.0;
  m.outlier_logits->at(0, 0, 0, 2) = 20.0;
  m.outlier_logits->at(0, 1, 0, 2) = -20.0;
  const Tensor p = outlier_posterior(m);
  const ScoreMap s = score_op(p);
  EXPECT_EQ(s.criterion, Criterion::kOp);
  EXPECT_DOUBLE_EQ(s.scores.data[0], 0.5);
  EXPECT_NEAR(s.scores.data[1], 1.0, 1e-15);
  EXPECT_NEAR(s.scores.data[2], 0.0, 1e-15);
}

TEST(Op, HeadWithoutOutlierPosteriorNamesCriterion) {
  PredictionMaps m;
  m.kind = HeadKind::kOeCway;
  m.class_logits = Tensor(1, 3, 2, 2);
  try {
    score_op(m, 8, 8);
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("op"), std::string::npos);
  }
}

TEST(Fused, Examples) {
  const ScoreMap a = score_fused(constant(Criterion::kOp, 1, 1, 1.0), constant(Criterion::kMsm, 1, 1, 0.0));
  EXPECT_EQ(a.scores.data[0], 0.0);
  const ScoreMap b = score_fused(constant(Criterion::kOp, 1, 1, 0.8), constant(Criterion::kMsm, 1, 1, 1.0 - 0.9));
  EXPECT_NEAR(b.scores.data[0], 0.08, 1e-15);
  EXPECT_THROW(score_fused(constant(Criterion::kMsm, 1, 1, 0), constant(Criterion::kOp, 1, 1, 0)),
               std::invalid_argument);
  EXPECT_THROW(score_fused(constant(Criterion::kOp, 1, 2, 0), constant(Criterion::kMsm, 1, 1, 0)), ShapeError);
}

TEST(Fused, ProductBoundedAndMonotone) {
  Rng rng(1);
  ScoreMap op{Criterion::kOp, RealMap(16, 16)}, msm{Criterion::kMsm, RealMap(16, 16)};
  for (double& v : op.scores.data) v = rng.uniform();
  for (double& v : msm.scores.data) v = rng.uniform();
  const ScoreMap f = score_fused(op, msm);
  ScoreMap op_up = op;
  for (double& v : op_up.scores.data) v = std::min(1.0, v + 0.1);
  const ScoreMap g = score_fused(op_up, msm);
  for (std::size_t i = 0; i < f.scores.size(); ++i) {
    EXPECT_NEAR(f.scores.data[i], op.scores.data[i] * msm.scores.data[i], 1e-12);
    EXPECT_LE(f.scores.data[i], std::min(op.scores.data[i], msm.scores.data[i]));
    EXPECT_GE(g.scores.data[i], f.scores.data[i]);
  }
}

TEST(Entropy, Examples) {
  EXPECT_DOUBLE_EQ(score_entropy(posterior_of({1, 0, 0, 0})).scores.data[0], 0.0);
  EXPECT_NEAR(score_entropy(posterior_of({0.25, 0.25, 0.25, 0.25})).scores.data[0], std::log(4.0), 1e-15);
  EXPECT_NEAR(score_entropy(posterior_of({0.5, 0.5, 0, 0})).scores.data[0], std::log(2.0), 1e-15);
}

TEST(Upsample, ShapeConstantAndRange) {
  RealMap flat(16, 16, 0.37);
  const RealMap up = upsample_scores(flat, 64, 64);
  EXPECT_EQ(up.height, 64);
  EXPECT_EQ(up.width, 64);
  for (double v : up.data) EXPECT_NEAR(v, 0.37, 1e-12);
  Rng rng(2);
  RealMap r(16, 16);
  for (double& v : r.data) v = rng.uniform();
  for (double v : upsample_scores(r, 64, 64).data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  const Tensor p = upsample_to_input(random_posterior(4, 8, 8, rng), 30, 32);
  EXPECT_EQ(p.h(), 30);
  EXPECT_EQ(p.w(), 32);
}

TEST(Decode, OverrideAndClosedSetLimits) {
  Rng rng(3);
  const Tensor p = random_posterior(4, 6, 7, rng);
  const OpenSetMap all = decode_open_set(p, constant(Criterion::kOp, 6, 7, 1.0), 4);
  EXPECT_EQ(all.labels.count(4), all.labels.size());
  const OpenSetMap none = decode_open_set(p, constant(Criterion::kOp, 6, 7, 0.0), 4);
  EXPECT_EQ(none.labels, argmax_labels(p, 4));
  // threshold is inclusive
  EXPECT_EQ(decode_open_set(p, constant(Criterion::kOp, 6, 7, 0.5), 4).labels.count(4), 42u);
  EXPECT_EQ(decode_open_set(p, constant(Criterion::kOp, 6, 7, 0.4999), 4).labels.count(4), 0u);
}

TEST(Decode, ArgmaxTiesAndScaleInvariance) {
  EXPECT_EQ(argmax_labels(posterior_of({0.4, 0.4, 0.2}), 3).data[0], 0);
  EXPECT_EQ(argmax_labels(posterior_of({0.2, 0.4, 0.4}), 3).data[0], 1);
  Rng rng(4);
  Tensor p = random_posterior(5, 9, 9, rng);
  const LabelMap before = argmax_labels(p, 5);
  p *= 3.5;
  EXPECT_EQ(argmax_labels(p, 5), before);
}

TEST(McDropout, DeterministicModelGivesZero) {
  const Model model = small_model(HeadKind::kTwoHead, 0.0, 5);
  Rng rng(5), img(6);
  const ScoreMap s = score_mc_dropout(model, random_tensor(1, 3, 32, 32, img), 4, rng);
  EXPECT_EQ(s.criterion, Criterion::kMcMi);
  EXPECT_EQ(s.scores.height, 32);
  for (double v : s.scores.data) EXPECT_NEAR(v, 0.0, 1e-12);
  EXPECT_THROW(score_mc_dropout(model, random_tensor(1, 3, 32, 32, img), 1, rng), std::invalid_argument);
}

TEST(McDropout, MatchesDirectEntropyComputation) {
  const Model model = small_model(HeadKind::kTwoHead, 0.5, 7);
  Rng img(8);
  const Tensor image = random_tensor(1, 3, 32, 32, img);
  const int T = 6;
  Rng a(9), b(9);
  const ScoreMap mi = score_mc_dropout(model, image, T, a);

  const FeatureBundle f = model.extractor().infer(image);
  std::vector<Tensor> passes;
  for (int t = 0; t < T; ++t) passes.push_back(class_posterior(model.head().infer(f, &b)));
  const int h = passes[0].h(), w = passes[0].w();
  RealMap oracle(h, w), pred(h, w);
  for (int i = 0; i < h * w; ++i) {
    std::vector<double> mean(3, 0.0);
    double mean_h = 0.0;
    for (const Tensor& p : passes) {
      std::vector<double> q(3);
      for (int c = 0; c < 3; ++c) mean[c] += (q[c] = p.plane(0, c)[i]) / T;
      mean_h += entropy(q) / T;
    }
    pred.data[i] = entropy(mean);
    oracle.data[i] = pred.data[i] - mean_h;
  }
  const RealMap want = upsample_scores(oracle, 32, 32);
  double spread = 0.0;
  for (std::size_t i = 0; i < want.size(); ++i) {
    EXPECT_NEAR(mi.scores.data[i], want.data[i], 1e-12);
    EXPECT_GE(mi.scores.data[i], -1e-9);
    spread += mi.scores.data[i];
  }
  EXPECT_GT(spread, 0.0);

  Rng c(9);
  const ScoreMap pe = score_mc_dropout(model, image, T, c, true);
  EXPECT_EQ(pe.criterion, Criterion::kMcEntropy);
  const RealMap want_pe = upsample_scores(pred, 32, 32);
  for (std::size_t i = 0; i < want_pe.size(); ++i) EXPECT_NEAR(pe.scores.data[i], want_pe.data[i], 1e-12);
}

TEST(McDropout, MutualInformationNonNegativeForRandomModels) {
  for (std::uint64_t seed = 10; seed < 14; ++seed) {
    const Model model = small_model(HeadKind::kOeCway, 0.3, seed);
    Rng img(seed), rng(seed + 100);
    const ScoreMap s = score_mc_dropout(model, random_tensor(1, 3, 32, 32, img), 5, rng);
    for (double v : s.scores.data) ASSERT_GE(v, -1e-9);
  }
}

TEST(ScoreImage, CriteriaAgreeWithBuildingBlocks) {
  const Model model = small_model(HeadKind::kTwoHead, 0.0, 15);
  Rng img(16);
  const Tensor image = random_tensor(1, 3, 40, 36, img);
  const ImageScores op = score_image(model, image, Criterion::kOp);
  const ImageScores msm = score_image(model, image, Criterion::kMsm);
  const ImageScores fused = score_image(model, image, Criterion::kFused);
  const ImageScores ent = score_image(model, image, Criterion::kEntropy);
  ASSERT_EQ(op.score.scores.height, 40);
  ASSERT_EQ(op.score.scores.width, 36);
  EXPECT_EQ(op.posterior.h(), 40);
  EXPECT_EQ(op.prediction, argmax_labels(op.posterior, 3));
  for (std::size_t i = 0; i < op.score.scores.size(); ++i) {
    EXPECT_NEAR(fused.score.scores.data[i], op.score.scores.data[i] * msm.score.scores.data[i], 1e-12);
    EXPECT_GE(ent.score.scores.data[i], 0.0);
    EXPECT_LE(ent.score.scores.data[i], std::log(3.0) + 1e-12);
  }
  EXPECT_THROW(score_image(model, image, Criterion::kMcMi), std::invalid_argument);
  const Model oe = small_model(HeadKind::kOeCway, 0.0, 17);
  EXPECT_THROW(score_image(oe, image, Criterion::kOp), std::invalid_argument);
}

TEST(ScoreImage, OpIgnoresClassBranch) {
  Model model = small_model(HeadKind::kTwoHead, 0.0, 18);
  Rng img(19);
  const Tensor image = random_tensor(1, 3, 32, 32, img);
  const PredictionMaps maps = model.infer(image);
  PredictionMaps changed = maps;
  for (double& v : changed.class_logits.values()) v = -v * 7.0;
  const ScoreMap a = score_op(maps, 32, 32), b = score_op(changed, 32, 32);
  EXPECT_EQ(a.scores.data, b.scores.data);
}

TEST(Criterion, NamesAndAlias) {
  for (Criterion c : {Criterion::kOp, Criterion::kMsm, Criterion::kFused, Criterion::kEntropy, Criterion::kMcMi,
                      Criterion::kMcEntropy})
    EXPECT_EQ(criterion_from_string(to_string(c)), c);
  EXPECT_EQ(criterion_from_string("fused"), Criterion::kFused);
  EXPECT_THROW(criterion_from_string("odin"), std::invalid_argument);
}

TEST(ScorePersistence, PngAndSidecar) {
  TempDir tmp("scores");
  ScoreMap s{Criterion::kEntropy, RealMap(3, 5)};
  for (std::size_t i = 0; i < s.scores.size(); ++i) s.scores.data[i] = std::log(4.0) * i / 14.0;
  write_score_sidecar(tmp / "s.bin", s);
  const RealMap back = read_score_sidecar(tmp / "s.bin");
  ASSERT_EQ(back.height, 3);
  ASSERT_EQ(back.width, 5);
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(back.data[i], static_cast<float>(s.scores.data[i]));
  write_score_png(tmp / "s.png", s, std::log(4.0));
  EXPECT_GT(std::filesystem::file_size(tmp / "s.png"), 0u);
  std::ofstream(tmp / "junk.bin") << "nope";
  EXPECT_THROW(read_score_sidecar(tmp / "junk.bin"), std::runtime_error);
}
