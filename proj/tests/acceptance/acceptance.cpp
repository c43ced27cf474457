// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance --cli <path to dosr> [--only 1,7] [--epochs N] [--work DIR]

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "dosr/trainer.hpp"
#include "test_support.hpp"

using namespace dosr;
using dosr::testing::central_difference;
using dosr::testing::close_rel;
using dosr::testing::random_labels;
using dosr::testing::random_tensor;
using dosr::testing::read_bytes;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Labels = std::vector<std::uint8_t>;

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

// --- independent metric oracles ---------------------------------------------

double brute_ap(const std::vector<double>& s, const Labels& y) {
  double sum = 0.0;
  int pos = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    ++pos;
    int above = 0, tp = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s[j] >= s[i]) {
        ++above;
        tp += y[j];
      }
    sum += static_cast<double>(tp) / above;
  }
  return sum / pos;
}

double brute_auroc(const std::vector<double>& s, const Labels& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

double brute_fpr95(const std::vector<double>& s, const Labels& y) {
  double p = 0, n = 0;
  for (auto v : y) (v ? p : n) += 1;
  std::set<double> thresholds(s.begin(), s.end());
  for (auto t = thresholds.rbegin(); t != thresholds.rend(); ++t) {
    double tp = 0, fp = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s[j] >= *t) (y[j] ? tp : fp) += 1;
    if (tp / p >= 0.95) return fp / n;
  }
  return 1.0;
}

std::pair<std::vector<double>, Labels> random_pool(Rng& rng) {
  const std::size_t n = rng.uniform_int(20, 2000);
  const double prevalence = rng.uniform(0.02, 0.6);
  const int levels = rng.uniform() < 0.5 ? 0 : rng.uniform_int(3, 40);
  std::vector<double> s(n);
  Labels y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = rng.uniform() < prevalence;
    const double v = rng.normal(y[i] ? 0.7 : 0.0, 1.0);
    s[i] = levels > 0 ? std::round(v * levels / 4.0) * 4.0 / levels : v;  // coarse grid forces ties
  }
  y[0] = 1;
  y[1] = 0;
  return {s, y};
}

Outcome metric_oracles() {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto [s, y] = random_pool(rng);
    const RankingMetrics m = ranking_metrics(s, y);
    worst = std::max({worst, std::abs(m.ap - brute_ap(s, y)), std::abs(m.auroc - brute_auroc(s, y)),
                      std::abs(m.fpr95 - brute_fpr95(s, y))});
  }
  double worst_iou = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int h = rng.uniform_int(1, 64), w = rng.uniform_int(1, 64), k = rng.uniform_int(2, 8);
    LabelMap gt(h, w), pred(h, w), outlier(h, w);
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt.data[i] = rng.uniform() < 0.1 ? kIgnore : rng.uniform_int(0, k - 1);
      pred.data[i] = rng.uniform_int(0, k);
      if (rng.uniform() < 0.1) {
        outlier.data[i] = 1;
        gt.data[i] = kIgnore;
      }
    }
    ConfusionMatrix cm(k);
    cm.add(pred, gt, outlier);
    double sum = 0.0;
    int defined = 0;
    for (int c = 0; c < k; ++c) {
      std::size_t inter = 0, uni = 0;
      for (std::size_t i = 0; i < gt.size(); ++i) {
        if (gt.data[i] == kIgnore) continue;
        inter += gt.data[i] == c && pred.data[i] == c;
        uni += gt.data[i] == c || pred.data[i] == c;
      }
      if (uni == 0) continue;
      sum += static_cast<double>(inter) / uni;
      ++defined;
    }
    worst_iou = std::max(worst_iou, std::abs(cm.miou() - sum / defined));
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {worst <= 1e-9 && worst_iou <= 1e-9 && secs < 60.0,
          "max ranking error " + fmt(worst) + ", max mIoU error " + fmt(worst_iou) + ", " + fmt(secs, 3) + " s"};
}

Outcome monotone_invariance() {
  Rng rng(102);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    auto [s, y] = random_pool(rng);
    for (double& v : s) v *= 0.5;
    const RankingMetrics m = ranking_metrics(s, y);
    std::vector<double> cube(s), sig(s);
    for (double& v : cube) v = v * v * v;
    for (double& v : sig) v = 1.0 / (1.0 + std::exp(-5.0 * v));
    for (const auto& t : {cube, sig}) {
      const RankingMetrics u = ranking_metrics(t, y);
      worst = std::max({worst, std::abs(u.ap - m.ap), std::abs(u.auroc - m.auroc), std::abs(u.fpr95 - m.fpr95)});
    }
  }
  return {worst <= 1e-12, "max change " + fmt(worst)};
}

// --- losses -----------------------------------------------------------------

struct Maps {
  std::vector<LabelMap> seg, outlier;
};

Maps random_maps(int n, int h, int w, int classes, Rng& rng) {
  Maps m;
  for (int b = 0; b < n; ++b) {
    LabelMap seg = random_labels(h, w, classes, rng), out(h, w);
    for (std::size_t i = 0; i < seg.size(); ++i) {
      const double u = rng.uniform();
      if (u < 0.3) {
        out.data[i] = 1;
        seg.data[i] = kIgnore;
      } else if (u < 0.4) {
        out.data[i] = seg.data[i] = kIgnore;
      } else if (u < 0.45) {
        seg.data[i] = kIgnore;
      }
    }
    m.seg.push_back(seg);
    m.outlier.push_back(out);
  }
  return m;
}

ExtractorConfig small_extractor() {
  ExtractorConfig e;
  e.stage_widths = {8, 12, 16, 20};
  e.feature_width = 12;
  return e;
}

Outcome mask_isolation(const std::vector<NegativeSample>& negatives) {
  Rng rng(103);
  bool same = true;
  for (int trial = 0; trial < 20; ++trial) {
    const Maps m = random_maps(2, 8, 8, 4, rng);
    Tensor logits = random_tensor(2, 4, 8, 8, rng);
    const LossResult a = masked_cls_loss(logits, m.seg, m.outlier);
    for (int n = 0; n < 2; ++n)
      for (std::size_t i = 0; i < m.outlier[n].size(); ++i)
        if (m.outlier[n].data[i] == 1)
          for (int c = 0; c < 4; ++c) logits.plane(n, c)[i] += rng.normal(0.0, 5.0);
    const LossResult b = masked_cls_loss(logits, m.seg, m.outlier);
    same = same && a.value == b.value;
    for (std::size_t i = 0; i < a.grad.size(); ++i) same = same && a.grad.data()[i] == b.grad.data()[i];
  }

  HeadConfig h;
  h.num_classes = 4;
  h.hidden_width = 8;
  Model model(small_extractor(), h, 7);
  std::vector<LabeledSample> samples;
  for (int i = 0; i < 4; ++i) samples.push_back(negative_as_sample(negatives[i]));
  const Batch batch = collate(samples);
  for (Param* p : model.parameters()) p->grad.fill(0.0);
  Rng dropout(1);
  const PredictionMaps maps = model.head().forward(model.extractor().forward(batch.images), dropout);
  const BatchLoss loss = evaluate_batch_loss(maps, batch.seg, batch.outlier, LossWeights{});
  model.extractor().backward(model.head().backward(loss.grad));
  double seg_grad = 0.0, od_grad = 0.0;
  for (const Param* p : std::as_const(model).parameters()) {
    double sum = 0.0;
    for (double g : p->grad.values()) sum += std::abs(g);
    if (p->name.rfind("seg.", 0) == 0 || p->name.rfind("aux", 0) == 0) seg_grad += sum;
    if (p->name.rfind("outlier.", 0) == 0) od_grad += sum;
  }
  return {same && seg_grad == 0.0 && od_grad > 0.0,
          std::string("outlier-pixel logits ") + (same ? "inert" : "leak") + ", segmentation grad " + fmt(seg_grad) +
              ", outlier grad " + fmt(od_grad)};
}

double worst_gradient_error(Tensor& x, const Tensor& grad, const std::function<double()>& f, int& bad) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double fd = central_difference(f, x.data()[i], 1e-6);
    if (!close_rel(grad.data()[i], fd, 1e-3, 1e-9)) ++bad;
    worst = std::max(worst, std::abs(grad.data()[i] - fd) / std::max(1e-9, std::abs(fd)));
  }
  return worst;
}

Outcome gradient_checks() {
  Rng rng(104);
  int bad = 0;
  std::map<std::string, double> worst;
  for (int trial = 0; trial < 3; ++trial) {
    const Maps m = random_maps(2, 8, 8, 4, rng);
    Tensor cls = random_tensor(2, 4, 8, 8, rng);
    worst["masked_ce"] = std::max(worst["masked_ce"], worst_gradient_error(cls, masked_cls_loss(cls, m.seg, m.outlier).grad,
                                                                            [&] { return masked_cls_loss(cls, m.seg, m.outlier).value; }, bad));
    Tensor od = random_tensor(2, 2, 8, 8, rng);
    worst["bce"] = std::max(worst["bce"], worst_gradient_error(od, outlier_bce_loss(od, m.outlier).grad,
                                                               [&] { return outlier_bce_loss(od, m.outlier).value; }, bad));
    Tensor oe = random_tensor(2, 4, 8, 8, rng);
    worst["oe"] = std::max(worst["oe"], worst_gradient_error(oe, oe_uniformity_loss(oe, m.outlier).grad,
                                                             [&] { return oe_uniformity_loss(oe, m.outlier).value; }, bad));
    const Maps full = random_maps(2, 32, 32, 4, rng);
    Tensor aux = random_tensor(2, 4, 8, 8, rng);
    worst["aux"] = std::max(worst["aux"], worst_gradient_error(aux, aux_soft_loss(aux, 4, full.seg, full.outlier).grad,
                                                               [&] { return aux_soft_loss(aux, 4, full.seg, full.outlier).value; }, bad));
    Tensor conf_cls = random_tensor(2, 4, 8, 8, rng), z = random_tensor(2, 1, 8, 8, rng);
    const ConfidenceLossResult r = confidence_loss(conf_cls, z, m.seg, m.outlier);
    auto conf = [&] { return confidence_loss(conf_cls, z, m.seg, m.outlier).value; };
    worst["confidence"] = std::max({worst["confidence"], worst_gradient_error(conf_cls, r.class_grad, conf, bad),
                                    worst_gradient_error(z, r.confidence_grad, conf, bad)});
  }
  std::string detail = std::to_string(bad) + " entries outside tolerance; worst rel error";
  for (const auto& [name, v] : worst) detail += " " + name + "=" + fmt(v, 2);
  return {bad == 0, detail};
}

// --- pasting and shapes -----------------------------------------------------

double ks_uniform_pvalue(std::vector<double> x, double lo, double hi) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = (x[i] - lo) / (hi - lo);
    d = std::max({d, (i + 1) / n - f, f - i / n});
  }
  const double sn = std::sqrt(n);
  const double lambda = (sn + 0.12 + 0.11 / sn) * d;
  double q = 0.0;
  for (int k = 1; k <= 100; ++k) q += 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(q, 0.0, 1.0);
}

Outcome pasting_contract() {
  Rng rng(105);
  PasteConfig cfg;
  cfg.mode = PasteMode::kRsp;
  int violations = 0;
  std::vector<double> shares;
  for (int t = 0; t < 1000; ++t) {
    const int h = rng.uniform_int(16, 96), w = rng.uniform_int(16, 96);
    LabeledSample in;
    in.id = "in";
    in.image = random_tensor(1, 3, h, w, rng);
    in.seg = random_labels(h, w, 5, rng);
    in.outlier = LabelMap(h, w, 0);
    NegativeSample neg;
    const int nh = rng.uniform_int(8, 80), nw = rng.uniform_int(8, 80);
    neg.image = random_tensor(1, 3, nh, nw, rng);
    neg.bbox.xmin = rng.uniform_int(0, nw - 2);
    neg.bbox.ymin = rng.uniform_int(0, nh - 2);
    neg.bbox.xmax = rng.uniform_int(neg.bbox.xmin + 1, nw);
    neg.bbox.ymax = rng.uniform_int(neg.bbox.ymin + 1, nh);
    PasteRect rect;
    const LabeledSample out = paste_negative(in, neg, cfg, rng, &rect);
    shares.push_back(rect.share);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const bool inside = y >= rect.y0 && y < rect.y0 + rect.height && x >= rect.x0 && x < rect.x0 + rect.width;
        if (inside) {
          violations += out.seg.at(y, x) != kIgnore || out.outlier.at(y, x) != 1;
          continue;
        }
        bool same = out.seg.at(y, x) == in.seg.at(y, x) && out.outlier.at(y, x) == in.outlier.at(y, x);
        for (int c = 0; c < 3; ++c) {
          const double a = out.image.at(0, c, y, x), b = in.image.at(0, c, y, x);
          same = same && std::memcmp(&a, &b, sizeof a) == 0;
        }
        violations += !same;
      }
  }
  const double p = ks_uniform_pvalue(shares, cfg.min_share, cfg.max_share);
  const auto [lo, hi] = std::minmax_element(shares.begin(), shares.end());
  return {violations == 0 && p > 0.01 && *lo >= 0.001 && *hi <= 0.10,
          std::to_string(violations) + " pixel violations, share KS p=" + fmt(p, 3)};
}

Outcome shape_contract() {
  const ExtractorConfig cfg;
  const Extractor extractor(cfg, 11);
  Rng rng(106);
  int bad = 0, checked = 0;
  std::vector<std::pair<int, int>> sizes;
  for (int s = 64; s <= 512; s += 32) sizes.push_back({s, s});
  sizes.insert(sizes.end(), {{64, 512}, {512, 64}, {96, 320}, {448, 160}});
  for (auto [h, w] : sizes) {
    const FeatureBundle f = extractor.infer(random_tensor(1, 3, h, w, rng));
    ++checked;
    bad += f.shared.c() != cfg.feature_width || f.shared.h() != h / 4 || f.shared.w() != w / 4;
  }
  return {bad == 0, std::to_string(checked - bad) + "/" + std::to_string(checked) + " sizes give H/4 x W/4 x " +
                        std::to_string(cfg.feature_width)};
}

Outcome fusion_unit(const Model& model, const std::vector<LabeledSample>& images) {
  double worst = 0.0;
  std::size_t above_min = 0, pixels = 0;
  for (const auto& s : images) {
    const ImageScores op = score_image(model, s.image, Criterion::kOp);
    const ImageScores msm = score_image(model, s.image, Criterion::kMsm);
    const ImageScores fused = score_image(model, s.image, Criterion::kFused);
    for (std::size_t i = 0; i < op.score.scores.size(); ++i) {
      const double a = op.score.scores.data[i], b = msm.score.scores.data[i], f = fused.score.scores.data[i];
      worst = std::max(worst, std::abs(f - a * b));
      above_min += f > std::min(a, b);
      ++pixels;
    }
  }
  return {worst <= 1e-12 && above_min == 0,
          "max |fused - op*msm| " + fmt(worst) + ", " + std::to_string(above_min) + " of " + std::to_string(pixels) +
              " pixels above min(op, msm)"};
}

// --- toy trends -------------------------------------------------------------

RunConfig toy_run(HeadKind kind, NegativeMode negatives, int epochs) {
  RunConfig r;
  r.head.kind = kind;
  r.head.num_classes = 4;
  r.head.hidden_width = 32;
  r.extractor.stage_widths = {16, 24, 32, 48};
  r.extractor.feature_width = 32;
  r.batch.batch_size = 8;
  r.batch.crop_size = 64;
  r.batch.jitter_base = 64;
  r.learning_rate = 2e-3;
  r.negatives = negatives;
  r.epochs = epochs;
  r.seed = 1;
  return r;
}

struct Trained {
  Model model;
  double seconds = 0.0;
};

Trained train_toy(const RunConfig& run, const ToyWorld& world, const fs::path& dir, const std::string& name) {
  const auto start = std::chrono::steady_clock::now();
  Trainer trainer(run);
  trainer.train(world.train, world.negatives, dir / name);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  spdlog::info("{}: {} steps in {:.0f} s", name, trainer.step(), secs);
  return {trainer.model(), secs};
}

AssayStats assay_ap(const Model& model, const std::vector<LabeledSample>& val, Criterion c) {
  EvalOptions opts;
  opts.criteria = {c};
  opts.assays = true;
  const auto results = evaluate(model, val, opts);
  if (!results[0].report || !results[0].report->ap) throw std::runtime_error("no assay AP for " + to_string(c));
  return *results[0].report->ap;
}

std::string show(const AssayStats& a) { return a.formatted(); }

/// a.mean - b.mean > 2 * pooled std
bool significantly_above(const AssayStats& a, const AssayStats& b) { return a.mean - b.mean > 2.0 * pooled_std(a, b); }

constexpr double kBudgetSeconds = 15 * 60;

Outcome toy_pasting_trend(const ToyWorld& world, int epochs, const fs::path& work) {
  const Trained paste = train_toy(toy_run(HeadKind::kTwoHead, NegativeMode::kPaste, epochs), world, work, "two_head");
  const Trained no_paste =
      train_toy(toy_run(HeadKind::kTwoHead, NegativeMode::kNoPaste, epochs), world, work, "two_head_no_paste");
  const Trained baseline = train_toy(toy_run(HeadKind::kOeCway, NegativeMode::kNone, epochs), world, work, "msm_baseline");
  const AssayStats a = assay_ap(paste.model, world.val_pasted, Criterion::kOp);
  const AssayStats b = assay_ap(no_paste.model, world.val_pasted, Criterion::kOp);
  const AssayStats c = assay_ap(baseline.model, world.val_pasted, Criterion::kMsm);
  const double slowest = std::max({paste.seconds, no_paste.seconds, baseline.seconds});
  const bool pass = significantly_above(a, b) && significantly_above(a, c) && slowest <= kBudgetSeconds;
  return {pass, "AP two heads " + show(a) + ", no pasting " + show(b) + ", msm baseline " + show(c) +
                    " (2x pooled std: " + fmt(200.0 * pooled_std(a, b), 3) + ", " + fmt(200.0 * pooled_std(a, c), 3) +
                    "); slowest model " + fmt(slowest, 3) + " s"};
}

ToyWorld val_world(ToyConfig cfg, double lo, double hi) {
  cfg.num_inliers = 4;
  cfg.num_negatives = 4;
  cfg.object_area_min = lo;
  cfg.object_area_max = hi;
  cfg.min_area_share = lo;
  return make_toy_world(cfg, 1);
}

Outcome toy_fusion_trend(const ToyWorld& world, int epochs, const fs::path& work) {
  RunConfig run = toy_run(HeadKind::kTwoHead, NegativeMode::kPaste, epochs);
  run.paste.mode = PasteMode::kRsp;
  run.batch.jitter = JitterMode::kScale;
  const Trained model = train_toy(run, world, work, "two_head_rsp_js");
  const ToyWorld small = val_world(world.config, 0.001, 0.005);
  const ToyWorld large = val_world(world.config, 0.05, 0.10);
  const AssayStats small_op = assay_ap(model.model, small.val_pasted, Criterion::kOp);
  const AssayStats small_fused = assay_ap(model.model, small.val_pasted, Criterion::kFused);
  const AssayStats large_op = assay_ap(model.model, large.val_pasted, Criterion::kOp);
  const AssayStats large_msm = assay_ap(model.model, large.val_pasted, Criterion::kMsm);
  const bool pass = small_fused.mean >= small_op.mean && significantly_above(large_op, large_msm) &&
                    model.seconds <= kBudgetSeconds;
  return {pass, "small outliers: op_x_msm " + show(small_fused) + " vs op " + show(small_op) +
                    "; large outliers: op " + show(large_op) + " vs msm " + show(large_msm) + " (2x pooled std " +
                    fmt(200.0 * pooled_std(large_op, large_msm), 3) + ")"};
}

// --- determinism through the command line ------------------------------------

int run_in(const fs::path& dir, const std::string& cli, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" + cli + "' " + args + " > cli.log 2>&1";
  return std::system(cmd.c_str());
}

Outcome cli_determinism(const std::string& cli, const fs::path& work) {
  if (cli.empty()) return {false, "no --cli given"};
  std::map<std::string, std::string> trees[2];
  for (int r = 0; r < 2; ++r) {
    const fs::path dir = work / ("cli_run_" + std::to_string(r));
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "run.json") << nlohmann::json(toy_run(HeadKind::kTwoHead, NegativeMode::kPaste, 3)).dump(2);
    const int rc = run_in(dir, cli, "--seed 9 --out toy gen-toy --n 16 --negatives 32 --size 64 --val-n 4 --assays 3") |
                   run_in(dir, cli, "--seed 9 --config run.json --out run train --inliers toy/train.json "
                                    "--negatives toy/negatives.json --rsp") |
                   run_in(dir, cli, "--out eval eval --checkpoint run/final.ckpt --data toy/val_pasted.json "
                                    "--criteria op,msm,fused --assays 3 --size-strata");
    if (rc != 0) return {false, "command failed in " + dir.string()};
    for (const char* sub : {"run", "eval"})
      for (const auto& e : fs::recursive_directory_iterator(dir / sub))
        if (e.is_regular_file()) trees[r][fs::relative(e.path(), dir).string()] = read_bytes(e.path());
  }
  std::size_t differing = 0;
  for (const auto& [name, bytes] : trees[0]) {
    const auto it = trees[1].find(name);
    differing += it == trees[1].end() || it->second != bytes;
  }
  const bool has_ckpt = trees[0].count("run/final.ckpt") && trees[0].count("eval/op.json");
  return {differing == 0 && trees[0].size() == trees[1].size() && has_ckpt,
          std::to_string(trees[0].size()) + " files compared, " + std::to_string(differing) + " differ"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string cli, only;
  int epochs = 160;
  std::string work = (fs::temp_directory_path() / "dosr_acceptance").string();
  app.add_option("--cli", cli, "Path to the dosr executable");
  app.add_option("--only", only, "Comma-separated criteria to run");
  app.add_option("--epochs", epochs, "Epochs per toy model");
  app.add_option("--work", work, "Scratch directory");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);

  std::set<int> selected;
  std::stringstream ss(only);
  for (std::string tok; std::getline(ss, tok, ',');) selected.insert(std::stoi(tok));
  auto wanted = [&](int k) { return selected.empty() || selected.count(k); };

  fs::create_directories(work);
  ToyConfig toy;
  const ToyWorld world = make_toy_world(toy, 1);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, metric_oracles},
      {2, monotone_invariance},
      {3, [&] { return mask_isolation(world.negatives); }},
      {4, gradient_checks},
      {5, pasting_contract},
      {6, shape_contract},
      {7, [&] { return toy_pasting_trend(world, epochs, work); }},
      {8, [&] { return toy_fusion_trend(world, epochs, work); }},
      {9,
       [&] {
         HeadConfig h;
         h.num_classes = 4;
         h.hidden_width = 16;
         const Model model(small_extractor(), h, 13);
         return fusion_unit(model, std::vector<LabeledSample>(world.val.begin(), world.val.begin() + 4));
       }},
      {10, [&] { return cli_determinism(cli, work); }},
  };

  int failed = 0;
  for (const auto& [k, check] : criteria) {
    if (!wanted(k)) continue;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << k << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
