#pragma once

// Training objectives. Every loss is a mean over the pixels it counts (so the
// scale does not depend on resolution) and returns its gradient with respect
// to the logits it consumes. Label maps for the per-pixel losses must already
// be at logit resolution (see downsample_labels); the auxiliary loss takes
// full-resolution labels and pools them itself.

#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "dosr/heads.hpp"
#include "dosr/tensor.hpp"

namespace dosr {

struct LossWeights {
  double cls = 0.6;
  double od = 0.6 * 0.2;
  double aux = 0.4;
  /// Weight of the uniformity term for kOeCway.
  double oe = 0.6 * 0.2;
  /// Weight of the -log c penalty inside the confidence loss.
  double confidence_penalty = 0.5;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

struct LossResult {
  double value = 0.0;
  Tensor grad;
  /// Number of pixels (or cells) that entered the mean.
  std::size_t count = 0;
};

/// Nearest-neighbour label downsampling: cell (i, j) takes the label at full
/// resolution pixel (i * stride + stride / 2, j * stride + stride / 2), clamped.
LabelMap downsample_labels(const LabelMap& labels, int out_h, int out_w, int stride);

/// Cross-entropy over pixels with outlier == 0 and seg != IGNORE.
LossResult masked_cls_loss(const Tensor& class_logits, std::span<const LabelMap> seg,
                           std::span<const LabelMap> outlier);

/// Two-way cross-entropy over pixels with outlier in {0, 1}.
LossResult outlier_bce_loss(const Tensor& outlier_logits, std::span<const LabelMap> outlier);

/// Soft-target cross-entropy at tap stride `stride`. The target of each cell
/// is the class histogram of its stride x stride window at full resolution,
/// counting only inlier pixels with a class label; empty cells are skipped.
LossResult aux_soft_loss(const Tensor& aux_logits, int stride, std::span<const LabelMap> seg_full,
                         std::span<const LabelMap> outlier_full);

/// Mean KL(uniform || softmax) over pixels with outlier == 1.
LossResult oe_uniformity_loss(const Tensor& class_logits, std::span<const LabelMap> outlier);

/// Cross-entropy over C + 1 classes: inliers keep their class, outliers map
/// to class C, everything else is ignored.
LossResult cplus1_loss(const Tensor& class_logits, std::span<const LabelMap> seg,
                       std::span<const LabelMap> outlier);

/// Sum over classes of one-vs-all binary cross-entropy, averaged over pixels
/// with outlier in {0, 1}. Outlier pixels are negatives for every class.
LossResult multilabel_bce_loss(const Tensor& class_logits, std::span<const LabelMap> seg,
                               std::span<const LabelMap> outlier);

struct ConfidenceLossResult {
  double value = 0.0;
  Tensor class_grad;
  Tensor confidence_grad;
  std::size_t count = 0;
};

inline constexpr double kMinConfidence = 1e-6;

/// Hint-blended cross-entropy with a learned confidence c = sigmoid(z):
///   p' = c * p + (1 - c) * onehot(y),  loss = -log p'_y - lambda * log c,
/// with c clamped to >= 1e-6. Inlier pixels only.
ConfidenceLossResult confidence_loss(const Tensor& class_logits, const Tensor& confidence_logit,
                                     std::span<const LabelMap> seg, std::span<const LabelMap> outlier,
                                     double lambda = 0.5);

/// Individual loss terms; which are required depends on the head kind.
struct LossParts {
  std::optional<double> cls;         // masked CE / C+1 CE / multi-label BCE / confidence loss
  std::optional<double> od;          // kTwoHead
  std::optional<double> oe;          // kOeCway
  std::optional<double> aux;         // all kinds
};

/// Weighted sum of the parts required by `kind`. Throws std::invalid_argument
/// naming the first missing part.
double compound_loss(const LossParts& parts, const LossWeights& weights, HeadKind kind);

/// Everything the trainer needs from one batch.
struct BatchLoss {
  LossParts parts;
  double total = 0.0;
  PredictionGrad grad;
};

/// Computes all parts for `maps.kind`, the compound total and the weighted
/// gradient with respect to every prediction tensor. Label maps are at full
/// (unpadded input) resolution.
BatchLoss evaluate_batch_loss(const PredictionMaps& maps, std::span<const LabelMap> seg,
                              std::span<const LabelMap> outlier, const LossWeights& weights,
                              int logit_stride = 4);

}  // namespace dosr
