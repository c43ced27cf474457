#pragma once

// Pixel-level evaluation: ranking metrics over pooled pixels, mIoU,
// size-stratified detection and assay aggregation.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dosr/tensor.hpp"

namespace dosr {

/// Flattened scores and binary labels (1 = outlier = positive). IGNORE
/// pixels never enter the pool.
struct EvalPool {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  std::vector<std::string> ids;  // images in insertion order
  int stride = 1;

  /// Adds pixels with y % stride == 0 and x % stride == 0 whose label is 0 or 1.
  void add(const RealMap& score, const LabelMap& outlier, const std::string& id);
  std::size_t size() const { return scores.size(); }
  std::size_t positives() const;
};

/// Tie-grouped average precision: mean over positives of the precision at
/// that positive's score group. NaN when there are no positives or negatives.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels);
/// P(score of a positive > score of a negative), ties counted 1/2.
double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels);
/// FPR at the largest observed threshold t with TPR(score >= t) >= 0.95.
double fpr_at_95_tpr(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct RankingMetrics {
  double ap = 0.0, auroc = 0.0, fpr95 = 0.0;
  std::size_t positives = 0, negatives = 0;
};

RankingMetrics ranking_metrics(std::span<const double> scores, std::span<const std::uint8_t> labels);
inline RankingMetrics ranking_metrics(const EvalPool& pool) { return ranking_metrics(pool.scores, pool.labels); }

struct PrPoint {
  double threshold, precision, recall;
};
/// One point per score group, from the highest threshold down. With
/// `max_points` > 0 the curve is thinned to about that many points, always
/// keeping the first and last group.
std::vector<PrPoint> precision_recall_curve(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                            std::size_t max_points = 0);

/// Confusion matrix over pixels with a class label that are not outliers.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  /// Predictions outside [0, C) (e.g. the open-set outlier id) count as
  /// misses of the ground-truth class.
  void add(const LabelMap& prediction, const LabelMap& seg, const LabelMap& outlier);
  int num_classes() const { return num_classes_; }
  std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt) * (num_classes_ + 1) + pred]; }
  std::uint64_t total() const;

  /// IoU per class; NaN for classes absent from both ground truth and prediction.
  std::vector<double> iou() const;
  /// Mean over classes with a defined IoU; NaN when nothing was counted.
  double miou() const;

 private:
  int num_classes_;
  std::vector<std::uint64_t> counts_;  // C x (C + 1), last column = other
};

/// Connected components (8-connected) of outlier == 1 pixels; 0 = background.
/// Returns labels and the pixel count of each component (index 0 unused).
std::pair<std::vector<int>, std::vector<std::size_t>> outlier_instances(const LabelMap& outlier);

/// Log-spaced bin edges over [lo, hi].
std::vector<double> log_bins(double lo = 1e-4, double hi = 1.0, int bins = 8);

struct SizeBin {
  double lo = 0.0, hi = 0.0;
  std::size_t positives = 0;
  double ap = 0.0, fpr95 = 0.0;
};

/// Negatives shared by all bins plus positives tagged by the area share of
/// their instance.
class SizeStratifiedPool {
 public:
  /// With `clamp`, shares outside the edges fall into the first or last bin
  /// so the bins partition all positives; otherwise they are dropped.
  SizeStratifiedPool(std::vector<double> edges, bool clamp = true, int stride = 1);

  void add(const RealMap& score, const LabelMap& outlier);
  /// Bin of an area share, or -1 when it is dropped.
  int bin_of(double share) const;
  std::vector<SizeBin> evaluate() const;
  const std::vector<double>& edges() const { return edges_; }

 private:
  std::vector<double> edges_;
  bool clamp_;
  int stride_;
  std::vector<double> negatives_;
  std::vector<std::pair<double, int>> positives_;
};

struct AssayStats {
  double mean = 0.0, std = 0.0;
  std::size_t count = 0;
  std::string formatted(int precision = 1, double scale = 100.0) const;
};

/// Sample mean and (n - 1) standard deviation; NaN entries are skipped.
AssayStats assay_aggregate(std::span<const double> values);

/// sqrt((s1^2 + s2^2) / 2).
double pooled_std(const AssayStats& a, const AssayStats& b);

struct MetricsReport {
  std::string criterion;
  std::string dataset;
  RankingMetrics pooled;
  std::optional<AssayStats> ap, auroc, fpr95;
  std::optional<double> miou;
  std::vector<double> class_iou;
  std::vector<SizeBin> size_bins;
  std::size_t pool_size = 0;
  int stride = 1;
  nlohmann::json args;
};

void to_json(nlohmann::json& j, const MetricsReport& r);

/// Writes <stem>.json and <stem>.csv (one row per metric).
void write_report(const std::filesystem::path& stem, const MetricsReport& report);
void write_pr_curve_csv(const std::filesystem::path& path, const std::vector<PrPoint>& curve);
void write_size_bins_csv(const std::filesystem::path& path, const std::vector<SizeBin>& bins);
/// Simple line plots rendered with OpenCV.
void plot_pr_curve(const std::filesystem::path& path, const std::vector<PrPoint>& curve, const std::string& title);
void plot_size_bins(const std::filesystem::path& path, const std::vector<SizeBin>& bins, const std::string& title);

}  // namespace dosr
