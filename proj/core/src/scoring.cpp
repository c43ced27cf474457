#include "dosr/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "dosr/nn.hpp"

namespace dosr {
namespace {

int class_count(const Tensor& posterior, int num_classes) {
  if (num_classes <= 0) return posterior.c();
  if (num_classes > posterior.c()) throw ShapeError("posterior has fewer channels than classes");
  return num_classes;
}

double entropy_at(const Tensor& p, int n, int k, std::size_t i) {
  double total = 0.0;
  for (int c = 0; c < k; ++c) total += p.plane(n, c)[i];
  if (!(total > 0.0)) return 0.0;
  double h = 0.0;
  for (int c = 0; c < k; ++c) {
    const double q = p.plane(n, c)[i] / total;
    if (q > 0.0) h -= q * std::log(q);
  }
  return h;
}

RealMap entropy_map(const Tensor& p, int k) {
  RealMap out(p.h(), p.w());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = entropy_at(p, 0, k, i);
  return out;
}

}  // namespace

std::string to_string(Criterion c) {
  switch (c) {
    case Criterion::kOp: return "op";
    case Criterion::kMsm: return "msm";
    case Criterion::kFused: return "op_x_msm";
    case Criterion::kEntropy: return "entropy";
    case Criterion::kMcMi: return "mc_mi";
    case Criterion::kMcEntropy: return "mc_entropy";
  }
  return "?";
}

Criterion criterion_from_string(const std::string& name) {
  for (Criterion c : {Criterion::kOp, Criterion::kMsm, Criterion::kFused, Criterion::kEntropy, Criterion::kMcMi,
                      Criterion::kMcEntropy}) {
    if (to_string(c) == name) return c;
  }
  if (name == "fused") return Criterion::kFused;
  throw std::invalid_argument("unknown criterion '" + name + "' (op, msm, op_x_msm|fused, entropy, mc_mi, mc_entropy)");
}

Tensor upsample_to_input(const Tensor& maps, int height, int width) {
  return resize_bilinear(maps, height, width, static_cast<double>(Extractor::kOutputStride));
}

RealMap upsample_scores(const RealMap& map, int height, int width) {
  Tensor t(1, 1, map.height, map.width);
  std::copy(map.data.begin(), map.data.end(), t.data());
  const double scale = static_cast<double>(height) / map.height;
  const Tensor up = resize_bilinear(t, height, width, scale);
  RealMap out(height, width);
  std::copy(up.data(), up.data() + up.size(), out.data.begin());
  return out;
}

ScoreMap score_msm(const Tensor& posterior, int num_classes) {
  const int k = class_count(posterior, num_classes);
  ScoreMap s{Criterion::kMsm, RealMap(posterior.h(), posterior.w())};
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    double mx = 0.0;
    for (int c = 0; c < k; ++c) mx = std::max(mx, posterior.plane(0, c)[i]);
    s.scores.data[i] = 1.0 - mx;
  }
  return s;
}

ScoreMap score_op(const Tensor& outlier_probability) {
  if (outlier_probability.c() != 1) throw ShapeError("score_op expects a single-channel probability map");
  ScoreMap s{Criterion::kOp, RealMap(outlier_probability.h(), outlier_probability.w())};
  std::copy(outlier_probability.plane(0, 0), outlier_probability.plane(0, 0) + s.scores.size(), s.scores.data.begin());
  return s;
}

ScoreMap score_op(const PredictionMaps& maps, int height, int width) {
  if (maps.kind == HeadKind::kOeCway) {
    throw std::invalid_argument("criterion op requires an outlier posterior; head " + to_string(maps.kind) +
                                " has none (use msm or entropy)");
  }
  return score_op(upsample_to_input(outlier_posterior(maps), height, width));
}

ScoreMap score_fused(const ScoreMap& op, const ScoreMap& msm) {
  if (op.criterion != Criterion::kOp || msm.criterion != Criterion::kMsm) {
    throw std::invalid_argument("score_fused expects (op, msm), got (" + to_string(op.criterion) + ", " +
                                to_string(msm.criterion) + ")");
  }
  if (op.scores.height != msm.scores.height || op.scores.width != msm.scores.width) {
    throw ShapeError("score_fused: resolution mismatch");
  }
  ScoreMap s{Criterion::kFused, RealMap(op.scores.height, op.scores.width)};
  for (std::size_t i = 0; i < s.scores.size(); ++i) s.scores.data[i] = op.scores.data[i] * msm.scores.data[i];
  return s;
}

ScoreMap score_entropy(const Tensor& posterior, int num_classes) {
  return {Criterion::kEntropy, entropy_map(posterior, class_count(posterior, num_classes))};
}

ScoreMap score_mc_dropout(const Model& model, const Tensor& image, int passes, Rng& rng, bool predictive_entropy) {
  if (passes < 2) throw std::invalid_argument("MC-dropout needs at least 2 passes");
  const FeatureBundle features = model.extractor().infer(image);
  const int k = model.num_classes();
  Tensor mean;
  RealMap mean_entropy;
  for (int t = 0; t < passes; ++t) {
    const Tensor p = class_posterior(model.head().infer(features, &rng));
    const RealMap h = entropy_map(p, k);
    if (t == 0) {
      mean = p;
      mean_entropy = h;
    } else {
      mean += p;
      for (std::size_t i = 0; i < h.size(); ++i) mean_entropy.data[i] += h.data[i];
    }
  }
  mean *= 1.0 / passes;
  RealMap score = entropy_map(mean, k);
  if (!predictive_entropy) {
    for (std::size_t i = 0; i < score.size(); ++i) score.data[i] -= mean_entropy.data[i] / passes;
  }
  return {predictive_entropy ? Criterion::kMcEntropy : Criterion::kMcMi,
          upsample_scores(score, image.h(), image.w())};
}

LabelMap argmax_labels(const Tensor& posterior, int num_classes) {
  const int k = class_count(posterior, num_classes);
  LabelMap out(posterior.h(), posterior.w());
  for (std::size_t i = 0; i < out.size(); ++i) {
    int best = 0;
    for (int c = 1; c < k; ++c)
      if (posterior.plane(0, c)[i] > posterior.plane(0, best)[i]) best = c;
    out.data[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

OpenSetMap decode_open_set(const Tensor& posterior, const ScoreMap& score, int num_classes, double threshold) {
  if (score.scores.height != posterior.h() || score.scores.width != posterior.w()) {
    throw ShapeError("decode_open_set: score and posterior resolution differ");
  }
  OpenSetMap out{num_classes, argmax_labels(posterior, num_classes)};
  for (std::size_t i = 0; i < out.labels.size(); ++i)
    if (score.scores.data[i] >= threshold) out.labels.data[i] = static_cast<std::uint8_t>(num_classes);
  return out;
}

ImageScores score_image(const Model& model, const Tensor& image, Criterion criterion, Rng* rng, int mc_passes) {
  if (image.n() != 1) throw ShapeError("score_image expects a single image");
  const int H = image.h(), W = image.w(), C = model.num_classes();
  const PredictionMaps maps = model.infer(image);
  ImageScores out;
  out.posterior = upsample_to_input(class_posterior(maps), H, W);
  out.prediction = argmax_labels(out.posterior, C);
  switch (criterion) {
    case Criterion::kOp: out.score = score_op(maps, H, W); break;
    case Criterion::kMsm: out.score = score_msm(out.posterior, C); break;
    case Criterion::kFused: out.score = score_fused(score_op(maps, H, W), score_msm(out.posterior, C)); break;
    case Criterion::kEntropy: out.score = score_entropy(out.posterior, C); break;
    case Criterion::kMcMi:
    case Criterion::kMcEntropy:
      if (!rng) throw std::invalid_argument("MC-dropout scoring needs an rng stream");
      out.score = score_mc_dropout(model, image, mc_passes, *rng, criterion == Criterion::kMcEntropy);
      break;
  }
  return out;
}

void write_score_png(const std::filesystem::path& path, const ScoreMap& score, double max_value) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  cv::Mat m(score.scores.height, score.scores.width, CV_16UC1);
  for (int y = 0; y < m.rows; ++y) {
    auto* row = m.ptr<std::uint16_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      const double v = std::clamp(score.scores.at(y, x) / max_value, 0.0, 1.0);
      row[x] = static_cast<std::uint16_t>(std::lround(v * 65535.0));
    }
  }
  if (!cv::imwrite(path.string(), m)) throw std::runtime_error("cannot write " + path.string());
}

void write_score_sidecar(const std::filesystem::path& path, const ScoreMap& score) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  const std::int32_t h = score.scores.height, w = score.scores.width;
  out.write("DOSRSCR1", 8);
  out.write(reinterpret_cast<const char*>(&h), sizeof h);
  out.write(reinterpret_cast<const char*>(&w), sizeof w);
  for (double v : score.scores.data) {
    const float f = static_cast<float>(v);
    out.write(reinterpret_cast<const char*>(&f), sizeof f);
  }
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

RealMap read_score_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  std::int32_t h = 0, w = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&h), sizeof h);
  in.read(reinterpret_cast<char*>(&w), sizeof w);
  if (!in || std::memcmp(magic, "DOSRSCR1", 8) != 0 || h <= 0 || w <= 0) {
    throw std::runtime_error("not a score sidecar: " + path.string());
  }
  RealMap out(h, w);
  for (double& v : out.data) {
    float f = 0.0f;
    in.read(reinterpret_cast<char*>(&f), sizeof f);
    v = f;
  }
  if (!in) throw std::runtime_error("truncated score sidecar: " + path.string());
  return out;
}

}  // namespace dosr
