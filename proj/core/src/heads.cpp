#include "dosr/heads.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <type_traits>

namespace dosr {
namespace {

template <class Conv>
Tensor apply(Conv& conv, const Tensor& x, bool train) {
  if constexpr (std::is_const_v<Conv>) {
    return conv.infer(x);
  } else {
    return train ? conv.forward(x) : conv.infer(x);
  }
}

}  // namespace

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::kTwoHead: return "two_head";
    case HeadKind::kConfidence: return "confidence";
    case HeadKind::kOeCway: return "oe_cway";
    case HeadKind::kCPlus1: return "cplus1";
    case HeadKind::kMultiLabel: return "multilabel";
  }
  return "unknown";
}

HeadKind head_kind_from_string(const std::string& name) {
  for (HeadKind k : {HeadKind::kTwoHead, HeadKind::kConfidence, HeadKind::kOeCway, HeadKind::kCPlus1,
                     HeadKind::kMultiLabel}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown head kind '" + name +
                              "' (expected two_head, confidence, oe_cway, cplus1 or multilabel)");
}

void HeadConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("head: class count C must be >= 2");
  if (hidden_width <= 0) throw std::invalid_argument("head: hidden width must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("head: dropout must be in [0, 1)");
}

int HeadConfig::class_channels() const { return kind == HeadKind::kCPlus1 ? num_classes + 1 : num_classes; }

void to_json(nlohmann::json& j, const HeadConfig& c) {
  j = nlohmann::json{{"kind", to_string(c.kind)},
                     {"num_classes", c.num_classes},
                     {"hidden_width", c.hidden_width},
                     {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, HeadConfig& c) {
  HeadConfig d;
  c.kind = head_kind_from_string(j.value("kind", to_string(d.kind)));
  c.num_classes = j.value("num_classes", d.num_classes);
  c.hidden_width = j.value("hidden_width", d.hidden_width);
  c.dropout = j.value("dropout", d.dropout);
}

Head::Head(const HeadConfig& config, int feature_width, const std::vector<int>& aux_strides, std::uint64_t seed)
    : config_(config), feature_width_(feature_width) {
  config_.validate();
  if (feature_width <= 0) throw ShapeError("head: feature width must be positive");
  Rng rng(seed);
  const auto fresh = ParamGroup::kFresh;
  const int hid = config_.hidden_width;
  segmentation_.hidden = Conv2d("seg.hidden", feature_width, hid, 3, 1, fresh, rng);
  segmentation_.classify = Conv2d("seg.classify", hid, config_.class_channels(), 1, 1, fresh, rng);
  if (config_.kind == HeadKind::kTwoHead || config_.kind == HeadKind::kConfidence) {
    const int out = config_.kind == HeadKind::kTwoHead ? 2 : 1;
    const std::string name = config_.kind == HeadKind::kTwoHead ? "outlier" : "confidence";
    Branch b;
    b.hidden = Conv2d(name + ".hidden", feature_width, hid, 3, 1, fresh, rng);
    b.classify = Conv2d(name + ".classify", hid, out, 1, 1, fresh, rng);
    detector_ = std::move(b);
  }
  // Taps arrive ordered by decreasing stride.
  for (int s : {32, 16, 8}) {
    if (std::find(aux_strides.begin(), aux_strides.end(), s) == aux_strides.end()) continue;
    aux_strides_.push_back(s);
    aux_.emplace_back("aux" + std::to_string(s), feature_width, config_.num_classes, 1, 1, fresh, rng);
  }
}

template <class Self>
PredictionMaps Head::run(Self& self, const FeatureBundle& features, Rng* rng, bool train) {
  constexpr bool kMutable = !std::is_const_v<Self>;
  const HeadConfig& cfg = self.config_;
  if (features.shared.c() != self.feature_width_) {
    throw ShapeError("head expects feature width " + std::to_string(self.feature_width_) + ", got " +
                     features.shared.shape_str());
  }
  if (features.aux_taps.size() != self.aux_.size()) throw ShapeError("head: aux tap count mismatch");

  Tensor mask;
  const bool drop = cfg.dropout > 0.0 && rng != nullptr;
  const Tensor shared = drop ? dropout(features.shared, cfg.dropout, *rng, &mask) : features.shared;

  auto run_branch = [&](auto& branch, auto* cache) {
    Tensor hidden = relu(apply(branch.hidden, shared, train));
    Tensor logits = apply(branch.classify, hidden, train);
    if constexpr (kMutable) {
      if (train) cache->hidden = std::move(hidden);
    }
    return logits;
  };

  PredictionMaps maps;
  maps.kind = cfg.kind;
  if constexpr (kMutable) {
    maps.class_logits = run_branch(self.segmentation_, &self.seg_cache_);
  } else {
    maps.class_logits = run_branch(self.segmentation_, static_cast<BranchCache*>(nullptr));
  }
  if (self.detector_) {
    Tensor det;
    if constexpr (kMutable) {
      det = run_branch(*self.detector_, &self.det_cache_);
    } else {
      det = run_branch(*self.detector_, static_cast<BranchCache*>(nullptr));
    }
    if (cfg.kind == HeadKind::kTwoHead) {
      maps.outlier_logits = std::move(det);
    } else {
      maps.confidence_logit = std::move(det);
    }
  }
  for (std::size_t i = 0; i < self.aux_.size(); ++i) {
    if (features.aux_taps[i].stride != self.aux_strides_[i]) throw ShapeError("head: aux tap stride mismatch");
    maps.aux_logits.push_back({self.aux_strides_[i], apply(self.aux_[i], features.aux_taps[i].features, train)});
  }
  if constexpr (kMutable) {
    if (train) {
      self.dropout_mask_ = drop ? std::move(mask) : Tensor();
      self.shared_h_ = features.shared.h();
      self.shared_w_ = features.shared.w();
      self.aux_shapes_.clear();
      for (const auto& t : features.aux_taps) self.aux_shapes_.emplace_back(t.features.h(), t.features.w());
    }
  }
  return maps;
}

PredictionMaps Head::infer(const FeatureBundle& features, Rng* dropout_rng) const {
  return run(*this, features, dropout_rng, false);
}

PredictionMaps Head::forward(const FeatureBundle& features, Rng& dropout_rng) {
  return run(*this, features, &dropout_rng, true);
}

FeatureGrad Head::backward(const PredictionGrad& grad) {
  FeatureGrad out;
  auto branch_back = [](Branch& b, BranchCache& cache, const Tensor& g) {
    Tensor gh = b.classify.backward(g);
    return b.hidden.backward(relu_backward(gh, cache.hidden));
  };
  out.shared = branch_back(segmentation_, seg_cache_, grad.class_logits);
  if (detector_) {
    const std::optional<Tensor>& g =
        config_.kind == HeadKind::kTwoHead ? grad.outlier_logits : grad.confidence_logit;
    if (g) out.shared += branch_back(*detector_, det_cache_, *g);
  }
  if (!dropout_mask_.empty()) {
    auto gv = out.shared.values();
    auto mv = dropout_mask_.values();
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= mv[i];
  }
  for (std::size_t i = 0; i < aux_.size(); ++i) {
    if (i < grad.aux_logits.size() && !grad.aux_logits[i].empty()) {
      out.aux_taps.push_back(aux_[i].backward(grad.aux_logits[i]));
    } else {
      out.aux_taps.emplace_back();
    }
  }
  return out;
}

std::vector<Param*> Head::parameters() {
  std::vector<Param*> out;
  segmentation_.hidden.collect(out);
  segmentation_.classify.collect(out);
  if (detector_) {
    detector_->hidden.collect(out);
    detector_->classify.collect(out);
  }
  for (auto& a : aux_) a.collect(out);
  return out;
}

std::vector<const Param*> Head::parameters() const {
  std::vector<const Param*> out;
  segmentation_.hidden.collect(out);
  segmentation_.classify.collect(out);
  if (detector_) {
    detector_->hidden.collect(out);
    detector_->classify.collect(out);
  }
  for (const auto& a : aux_) a.collect(out);
  return out;
}

std::vector<const Param*> Head::segmentation_parameters() const {
  std::vector<const Param*> out;
  segmentation_.hidden.collect(out);
  segmentation_.classify.collect(out);
  return out;
}

std::vector<const Param*> Head::detector_parameters() const {
  std::vector<const Param*> out;
  if (detector_) {
    detector_->hidden.collect(out);
    detector_->classify.collect(out);
  }
  return out;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor softmax_channels(const Tensor& logits) {
  Tensor p(logits.n(), logits.c(), logits.h(), logits.w());
  const int plane = logits.h() * logits.w();
  for (int n = 0; n < logits.n(); ++n) {
    for (int i = 0; i < plane; ++i) {
      double mx = -INFINITY;
      for (int c = 0; c < logits.c(); ++c) mx = std::max(mx, logits.plane(n, c)[i]);
      double sum = 0.0;
      for (int c = 0; c < logits.c(); ++c) {
        const double e = std::exp(logits.plane(n, c)[i] - mx);
        p.plane(n, c)[i] = e;
        sum += e;
      }
      for (int c = 0; c < logits.c(); ++c) p.plane(n, c)[i] /= sum;
    }
  }
  return p;
}

Tensor class_posterior(const PredictionMaps& maps) {
  if (maps.kind == HeadKind::kMultiLabel) {
    Tensor p = maps.class_logits;
    for (double& v : p.values()) v = sigmoid(v);
    return p;
  }
  return softmax_channels(maps.class_logits);
}

Tensor outlier_posterior(const PredictionMaps& maps) {
  const Tensor& logits = maps.class_logits;
  Tensor out(logits.n(), 1, logits.h(), logits.w());
  const int plane = logits.h() * logits.w();
  switch (maps.kind) {
    case HeadKind::kTwoHead: {
      if (!maps.outlier_logits) throw std::invalid_argument("two-head maps without outlier logits");
      const Tensor p = softmax_channels(*maps.outlier_logits);
      for (int n = 0; n < p.n(); ++n) std::copy(p.plane(n, 1), p.plane(n, 1) + plane, out.plane(n, 0));
      return out;
    }
    case HeadKind::kCPlus1: {
      const Tensor p = softmax_channels(logits);
      const int c = logits.c() - 1;
      for (int n = 0; n < p.n(); ++n) std::copy(p.plane(n, c), p.plane(n, c) + plane, out.plane(n, 0));
      return out;
    }
    case HeadKind::kMultiLabel: {
      for (int n = 0; n < logits.n(); ++n) {
        for (int i = 0; i < plane; ++i) {
          double mx = 0.0;
          for (int c = 0; c < logits.c(); ++c) mx = std::max(mx, sigmoid(logits.plane(n, c)[i]));
          out.plane(n, 0)[i] = 1.0 - mx;
        }
      }
      return out;
    }
    case HeadKind::kConfidence: {
      if (!maps.confidence_logit) throw std::invalid_argument("confidence maps without confidence logit");
      const Tensor& z = *maps.confidence_logit;
      for (std::size_t i = 0; i < z.size(); ++i) out.data()[i] = 1.0 - sigmoid(z.data()[i]);
      return out;
    }
    case HeadKind::kOeCway:
      break;
  }
  throw std::invalid_argument("head kind " + to_string(maps.kind) +
                              " has no outlier posterior; use the max-softmax criterion");
}

}  // namespace dosr
