#include "dosr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dosr {
namespace {

void check_labels(const Tensor& logits, std::span<const LabelMap> maps, const char* what) {
  if (static_cast<int>(maps.size()) != logits.n()) {
    throw ShapeError(std::string(what) + ": " + std::to_string(maps.size()) + " label maps for batch " +
                     std::to_string(logits.n()));
  }
  for (const LabelMap& m : maps) {
    if (m.height != logits.h() || m.width != logits.w()) {
      throw ShapeError(std::string(what) + ": label map " + std::to_string(m.height) + "x" +
                       std::to_string(m.width) + " does not match logits " + logits.shape_str());
    }
  }
}

// Log-softmax of pixel i of sample n into `out` (size c).
void log_softmax_at(const Tensor& logits, int n, int i, std::vector<double>& out) {
  const int k = logits.c();
  out.resize(k);
  double mx = -INFINITY;
  for (int c = 0; c < k; ++c) mx = std::max(mx, logits.plane(n, c)[i]);
  double sum = 0.0;
  for (int c = 0; c < k; ++c) sum += std::exp(logits.plane(n, c)[i] - mx);
  const double lse = mx + std::log(sum);
  for (int c = 0; c < k; ++c) out[c] = logits.plane(n, c)[i] - lse;
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

// Hard-target cross-entropy; target(n, i) returns the class or -1 to skip.
template <class Target>
LossResult hard_ce(const Tensor& logits, Target target) {
  LossResult r;
  r.grad = Tensor(logits.n(), logits.c(), logits.h(), logits.w());
  const int plane = logits.h() * logits.w();
  std::vector<double> lp;
  double total = 0.0;
  for (int n = 0; n < logits.n(); ++n) {
    for (int i = 0; i < plane; ++i) {
      const int y = target(n, i);
      if (y < 0) continue;
      if (y >= logits.c()) {
        throw std::invalid_argument("label " + std::to_string(y) + " out of range for " +
                                    std::to_string(logits.c()) + " classes");
      }
      log_softmax_at(logits, n, i, lp);
      total -= lp[y];
      for (int c = 0; c < logits.c(); ++c) r.grad.plane(n, c)[i] = std::exp(lp[c]) - (c == y ? 1.0 : 0.0);
      ++r.count;
    }
  }
  if (r.count > 0) {
    r.value = total / static_cast<double>(r.count);
    r.grad *= 1.0 / static_cast<double>(r.count);
  }
  return r;
}

}  // namespace

void LossWeights::validate() const {
  if (cls < 0 || od < 0 || aux < 0 || oe < 0 || confidence_penalty < 0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"cls", w.cls}, {"od", w.od}, {"aux", w.aux}, {"oe", w.oe},
                     {"confidence_penalty", w.confidence_penalty}};
}

void from_json(const nlohmann::json& j, LossWeights& w) {
  LossWeights d;
  w.cls = j.value("cls", d.cls);
  w.od = j.value("od", d.od);
  w.aux = j.value("aux", d.aux);
  w.oe = j.value("oe", d.oe);
  w.confidence_penalty = j.value("confidence_penalty", d.confidence_penalty);
}

LabelMap downsample_labels(const LabelMap& labels, int out_h, int out_w, int stride) {
  LabelMap out(out_h, out_w);
  for (int i = 0; i < out_h; ++i) {
    const int y = std::min(i * stride + stride / 2, labels.height - 1);
    for (int j = 0; j < out_w; ++j) {
      const int x = std::min(j * stride + stride / 2, labels.width - 1);
      out.at(i, j) = labels.at(y, x);
    }
  }
  return out;
}

LossResult masked_cls_loss(const Tensor& class_logits, std::span<const LabelMap> seg,
                           std::span<const LabelMap> outlier) {
  check_labels(class_logits, seg, "masked_cls_loss");
  check_labels(class_logits, outlier, "masked_cls_loss");
  return hard_ce(class_logits, [&](int n, int i) {
    if (outlier[n].data[i] != 0 || seg[n].data[i] == kIgnore) return -1;
    return static_cast<int>(seg[n].data[i]);
  });
}

LossResult outlier_bce_loss(const Tensor& outlier_logits, std::span<const LabelMap> outlier) {
  if (outlier_logits.c() != 2) throw ShapeError("outlier_bce_loss expects 2 logits per pixel");
  check_labels(outlier_logits, outlier, "outlier_bce_loss");
  return hard_ce(outlier_logits, [&](int n, int i) {
    const std::uint8_t o = outlier[n].data[i];
    return o <= 1 ? static_cast<int>(o) : -1;
  });
}

LossResult aux_soft_loss(const Tensor& aux_logits, int stride, std::span<const LabelMap> seg_full,
                         std::span<const LabelMap> outlier_full) {
  if (static_cast<int>(seg_full.size()) != aux_logits.n() || outlier_full.size() != seg_full.size()) {
    throw ShapeError("aux_soft_loss: label count does not match batch");
  }
  const int k = aux_logits.c();
  LossResult r;
  r.grad = Tensor(aux_logits.n(), k, aux_logits.h(), aux_logits.w());
  std::vector<double> hist(k), lp;
  double total = 0.0;
  for (int n = 0; n < aux_logits.n(); ++n) {
    const LabelMap& seg = seg_full[n];
    const LabelMap& ood = outlier_full[n];
    if (seg.height > aux_logits.h() * stride || seg.width > aux_logits.w() * stride) {
      throw ShapeError("aux_soft_loss: labels larger than tap coverage");
    }
    for (int cy = 0; cy < aux_logits.h(); ++cy) {
      for (int cx = 0; cx < aux_logits.w(); ++cx) {
        std::fill(hist.begin(), hist.end(), 0.0);
        double valid = 0.0;
        const int y1 = std::min((cy + 1) * stride, seg.height);
        const int x1 = std::min((cx + 1) * stride, seg.width);
        for (int y = cy * stride; y < y1; ++y) {
          for (int x = cx * stride; x < x1; ++x) {
            const std::uint8_t s = seg.at(y, x);
            if (ood.at(y, x) != 0 || s == kIgnore) continue;
            if (s >= k) throw std::invalid_argument("aux_soft_loss: label out of range");
            hist[s] += 1.0;
            valid += 1.0;
          }
        }
        if (valid == 0.0) continue;
        const int i = cy * aux_logits.w() + cx;
        log_softmax_at(aux_logits, n, i, lp);
        for (int c = 0; c < k; ++c) {
          const double t = hist[c] / valid;
          if (t > 0.0) total -= t * lp[c];
          r.grad.plane(n, c)[i] = std::exp(lp[c]) - t;
        }
        ++r.count;
      }
    }
  }
  if (r.count > 0) {
    r.value = total / static_cast<double>(r.count);
    r.grad *= 1.0 / static_cast<double>(r.count);
  }
  return r;
}

LossResult oe_uniformity_loss(const Tensor& class_logits, std::span<const LabelMap> outlier) {
  check_labels(class_logits, outlier, "oe_uniformity_loss");
  const int k = class_logits.c();
  const double inv_k = 1.0 / k;
  const double log_k = std::log(static_cast<double>(k));
  LossResult r;
  r.grad = Tensor(class_logits.n(), k, class_logits.h(), class_logits.w());
  const int plane = class_logits.h() * class_logits.w();
  std::vector<double> lp;
  double total = 0.0;
  for (int n = 0; n < class_logits.n(); ++n) {
    for (int i = 0; i < plane; ++i) {
      if (outlier[n].data[i] != 1) continue;
      log_softmax_at(class_logits, n, i, lp);
      double kl = -log_k;
      for (int c = 0; c < k; ++c) {
        kl -= inv_k * lp[c];
        r.grad.plane(n, c)[i] = std::exp(lp[c]) - inv_k;
      }
      total += kl;
      ++r.count;
    }
  }
  if (r.count > 0) {
    r.value = total / static_cast<double>(r.count);
    r.grad *= 1.0 / static_cast<double>(r.count);
  }
  return r;
}

LossResult cplus1_loss(const Tensor& class_logits, std::span<const LabelMap> seg,
                       std::span<const LabelMap> outlier) {
  check_labels(class_logits, seg, "cplus1_loss");
  check_labels(class_logits, outlier, "cplus1_loss");
  const int outlier_class = class_logits.c() - 1;
  return hard_ce(class_logits, [&](int n, int i) {
    const std::uint8_t o = outlier[n].data[i];
    if (o == 1) return outlier_class;
    if (o != 0 || seg[n].data[i] == kIgnore) return -1;
    const int y = seg[n].data[i];
    if (y >= outlier_class) throw std::invalid_argument("cplus1_loss: inlier label collides with outlier class");
    return y;
  });
}

LossResult multilabel_bce_loss(const Tensor& class_logits, std::span<const LabelMap> seg,
                               std::span<const LabelMap> outlier) {
  check_labels(class_logits, seg, "multilabel_bce_loss");
  check_labels(class_logits, outlier, "multilabel_bce_loss");
  const int k = class_logits.c();
  LossResult r;
  r.grad = Tensor(class_logits.n(), k, class_logits.h(), class_logits.w());
  const int plane = class_logits.h() * class_logits.w();
  double total = 0.0;
  for (int n = 0; n < class_logits.n(); ++n) {
    for (int i = 0; i < plane; ++i) {
      const std::uint8_t o = outlier[n].data[i];
      const std::uint8_t s = seg[n].data[i];
      int positive = -1;
      if (o == 0) {
        if (s == kIgnore) continue;
        if (s >= k) throw std::invalid_argument("multilabel_bce_loss: label out of range");
        positive = s;
      } else if (o != 1) {
        continue;
      }
      for (int c = 0; c < k; ++c) {
        const double z = class_logits.plane(n, c)[i];
        const double t = c == positive ? 1.0 : 0.0;
        total += softplus(z) - t * z;
        r.grad.plane(n, c)[i] = sigmoid(z) - t;
      }
      ++r.count;
    }
  }
  if (r.count > 0) {
    r.value = total / static_cast<double>(r.count);
    r.grad *= 1.0 / static_cast<double>(r.count);
  }
  return r;
}

ConfidenceLossResult confidence_loss(const Tensor& class_logits, const Tensor& confidence_logit,
                                     std::span<const LabelMap> seg, std::span<const LabelMap> outlier,
                                     double lambda) {
  check_labels(class_logits, seg, "confidence_loss");
  check_labels(class_logits, outlier, "confidence_loss");
  if (confidence_logit.c() != 1 || confidence_logit.n() != class_logits.n() ||
      confidence_logit.h() != class_logits.h() || confidence_logit.w() != class_logits.w()) {
    throw ShapeError("confidence_loss: confidence logit shape " + confidence_logit.shape_str());
  }
  const int k = class_logits.c();
  ConfidenceLossResult r;
  r.class_grad = Tensor(class_logits.n(), k, class_logits.h(), class_logits.w());
  r.confidence_grad = Tensor(confidence_logit.n(), 1, confidence_logit.h(), confidence_logit.w());
  const int plane = class_logits.h() * class_logits.w();
  std::vector<double> lp;
  double total = 0.0;
  for (int n = 0; n < class_logits.n(); ++n) {
    for (int i = 0; i < plane; ++i) {
      if (outlier[n].data[i] != 0 || seg[n].data[i] == kIgnore) continue;
      const int y = seg[n].data[i];
      if (y >= k) throw std::invalid_argument("confidence_loss: label out of range");
      log_softmax_at(class_logits, n, i, lp);
      const double z = confidence_logit.plane(n, 0)[i];
      const double raw_c = sigmoid(z);
      const bool clamped = raw_c < kMinConfidence;
      const double c = clamped ? kMinConfidence : raw_c;
      const double py = std::exp(lp[y]);
      const double blended = c * py + (1.0 - c);
      total += -std::log(blended) - lambda * std::log(c);
      const double dl_dblend = -1.0 / blended;
      for (int j = 0; j < k; ++j) {
        const double pj = std::exp(lp[j]);
        r.class_grad.plane(n, j)[i] = dl_dblend * c * py * ((j == y ? 1.0 : 0.0) - pj);
      }
      const double dl_dc = dl_dblend * (py - 1.0) - lambda / c;
      r.confidence_grad.plane(n, 0)[i] = clamped ? 0.0 : dl_dc * raw_c * (1.0 - raw_c);
      ++r.count;
    }
  }
  if (r.count > 0) {
    const double inv = 1.0 / static_cast<double>(r.count);
    r.value = total * inv;
    r.class_grad *= inv;
    r.confidence_grad *= inv;
  }
  return r;
}

double compound_loss(const LossParts& parts, const LossWeights& weights, HeadKind kind) {
  auto need = [&](const std::optional<double>& part, const char* name) {
    if (!part) throw std::invalid_argument("compound_loss: missing '" + std::string(name) + "' part for " + to_string(kind));
    return *part;
  };
  double total = weights.cls * need(parts.cls, "cls") + weights.aux * need(parts.aux, "aux");
  if (kind == HeadKind::kTwoHead) total += weights.od * need(parts.od, "od");
  if (kind == HeadKind::kOeCway) total += weights.oe * need(parts.oe, "oe");
  return total;
}

BatchLoss evaluate_batch_loss(const PredictionMaps& maps, std::span<const LabelMap> seg,
                              std::span<const LabelMap> outlier, const LossWeights& weights, int logit_stride) {
  const Tensor& logits = maps.class_logits;
  if (static_cast<int>(seg.size()) != logits.n() || outlier.size() != seg.size()) {
    throw ShapeError("evaluate_batch_loss: label count does not match batch");
  }
  std::vector<LabelMap> seg_low, ood_low;
  for (std::size_t n = 0; n < seg.size(); ++n) {
    seg_low.push_back(downsample_labels(seg[n], logits.h(), logits.w(), logit_stride));
    ood_low.push_back(downsample_labels(outlier[n], logits.h(), logits.w(), logit_stride));
  }

  BatchLoss out;
  switch (maps.kind) {
    case HeadKind::kTwoHead: {
      LossResult cls = masked_cls_loss(logits, seg_low, ood_low);
      LossResult od = outlier_bce_loss(*maps.outlier_logits, ood_low);
      out.parts.cls = cls.value;
      out.parts.od = od.value;
      out.grad.class_logits = std::move(cls.grad);
      out.grad.class_logits *= weights.cls;
      out.grad.outlier_logits = std::move(od.grad);
      *out.grad.outlier_logits *= weights.od;
      break;
    }
    case HeadKind::kOeCway: {
      LossResult cls = masked_cls_loss(logits, seg_low, ood_low);
      LossResult oe = oe_uniformity_loss(logits, ood_low);
      out.parts.cls = cls.value;
      out.parts.oe = oe.value;
      out.grad.class_logits = std::move(cls.grad);
      out.grad.class_logits *= weights.cls;
      oe.grad *= weights.oe;
      out.grad.class_logits += oe.grad;
      break;
    }
    case HeadKind::kCPlus1: {
      LossResult cls = cplus1_loss(logits, seg_low, ood_low);
      out.parts.cls = cls.value;
      out.grad.class_logits = std::move(cls.grad);
      out.grad.class_logits *= weights.cls;
      break;
    }
    case HeadKind::kMultiLabel: {
      LossResult cls = multilabel_bce_loss(logits, seg_low, ood_low);
      out.parts.cls = cls.value;
      out.grad.class_logits = std::move(cls.grad);
      out.grad.class_logits *= weights.cls;
      break;
    }
    case HeadKind::kConfidence: {
      ConfidenceLossResult conf =
          confidence_loss(logits, *maps.confidence_logit, seg_low, ood_low, weights.confidence_penalty);
      out.parts.cls = conf.value;
      out.grad.class_logits = std::move(conf.class_grad);
      out.grad.class_logits *= weights.cls;
      out.grad.confidence_logit = std::move(conf.confidence_grad);
      *out.grad.confidence_logit *= weights.cls;
      break;
    }
  }

  double aux_sum = 0.0;
  const double taps = static_cast<double>(maps.aux_logits.size());
  for (const AuxTap& tap : maps.aux_logits) {
    LossResult a = aux_soft_loss(tap.features, tap.stride, seg, outlier);
    aux_sum += a.value;
    a.grad *= weights.aux / taps;
    out.grad.aux_logits.push_back(std::move(a.grad));
  }
  out.parts.aux = taps > 0 ? aux_sum / taps : 0.0;
  out.total = compound_loss(out.parts, weights, maps.kind);
  return out;
}

}  // namespace dosr
