#include "dosr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

namespace dosr {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_pool(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("metrics: scores and labels differ in length");
  for (double s : scores)
    if (std::isnan(s)) throw std::invalid_argument("metrics: NaN score");
  for (std::uint8_t l : labels)
    if (l > 1) throw std::invalid_argument("metrics: labels must be 0 or 1");
}

struct Group {
  double score;
  std::size_t tp, fp;  // cumulative through this group
  std::size_t group_tp;
};

/// Score groups from positive and negative scores, both sorted descending.
std::vector<Group> merge_groups(std::span<const double> pos, std::span<const double> neg) {
  std::vector<Group> out;
  std::size_t i = 0, j = 0;
  while (i < pos.size() || j < neg.size()) {
    const double s = j == neg.size() || (i < pos.size() && pos[i] >= neg[j]) ? pos[i] : neg[j];
    std::size_t gtp = 0;
    while (i < pos.size() && pos[i] == s) ++i, ++gtp;
    while (j < neg.size() && neg[j] == s) ++j;
    out.push_back({s, i, j, gtp});
  }
  return out;
}

std::vector<double> sorted_desc(std::vector<double> v) {
  std::sort(v.begin(), v.end(), std::greater<>());
  return v;
}

std::vector<Group> groups(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  std::vector<double> pos, neg;
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] ? pos : neg).push_back(scores[i]);
  return merge_groups(sorted_desc(std::move(pos)), sorted_desc(std::move(neg)));
}

double ap_from(const std::vector<Group>& gs, std::size_t positives) {
  double ap = 0.0;
  for (const Group& g : gs)
    if (g.group_tp) ap += static_cast<double>(g.group_tp) * (static_cast<double>(g.tp) / static_cast<double>(g.tp + g.fp));
  return ap / static_cast<double>(positives);
}

double auroc_from(const std::vector<Group>& gs, std::size_t positives, std::size_t negatives) {
  // each positive beats the negatives ranked below it and ties with its group's
  double wins = 0.0;
  std::size_t neg_above = 0;
  for (const Group& g : gs) {
    const std::size_t group_fp = g.fp - neg_above;
    wins += static_cast<double>(g.group_tp) *
            (static_cast<double>(negatives - g.fp) + 0.5 * static_cast<double>(group_fp));
    neg_above = g.fp;
  }
  return wins / (static_cast<double>(positives) * static_cast<double>(negatives));
}

double fpr95_from(const std::vector<Group>& gs, std::size_t positives, std::size_t negatives) {
  for (const Group& g : gs)
    if (static_cast<double>(g.tp) >= 0.95 * static_cast<double>(positives))
      return static_cast<double>(g.fp) / static_cast<double>(negatives);
  return 1.0;
}

std::pair<std::size_t, std::size_t> counts(std::span<const std::uint8_t> labels) {
  const auto p = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  return {p, labels.size() - p};
}

bool degenerate(std::span<const std::uint8_t> labels, const char* what) {
  const auto [p, n] = counts(labels);
  if (p == 0 || n == 0) {
    spdlog::warn("{}: pool has {} positives and {} negatives; result undefined", what, p, n);
    return true;
  }
  return false;
}

std::string fmt_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

void EvalPool::add(const RealMap& score, const LabelMap& outlier, const std::string& id) {
  if (score.height != outlier.height || score.width != outlier.width) {
    throw ShapeError("EvalPool::add: score map and labels differ in size (" + id + ")");
  }
  if (stride < 1) throw std::invalid_argument("EvalPool: stride must be >= 1");
  for (int y = 0; y < score.height; y += stride)
    for (int x = 0; x < score.width; x += stride) {
      const std::uint8_t l = outlier.at(y, x);
      if (l > 1) continue;
      scores.push_back(score.at(y, x));
      labels.push_back(l);
    }
  ids.push_back(id);
}

std::size_t EvalPool::positives() const { return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1)); }

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_pool(scores, labels);
  if (degenerate(labels, "AP")) return kNaN;
  return ap_from(groups(scores, labels), counts(labels).first);
}

double auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_pool(scores, labels);
  if (degenerate(labels, "AUROC")) return kNaN;
  const auto [positives, negatives] = counts(labels);
  return auroc_from(groups(scores, labels), positives, negatives);
}

double fpr_at_95_tpr(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_pool(scores, labels);
  if (degenerate(labels, "FPR95")) return kNaN;
  const auto [positives, negatives] = counts(labels);
  return fpr95_from(groups(scores, labels), positives, negatives);
}

RankingMetrics ranking_metrics(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  check_pool(scores, labels);
  RankingMetrics m;
  std::tie(m.positives, m.negatives) = counts(labels);
  if (degenerate(labels, "ranking metrics")) {
    m.ap = m.auroc = m.fpr95 = kNaN;
    return m;
  }
  const auto gs = groups(scores, labels);
  m.ap = ap_from(gs, m.positives);
  m.auroc = auroc_from(gs, m.positives, m.negatives);
  m.fpr95 = fpr95_from(gs, m.positives, m.negatives);
  return m;
}

std::vector<PrPoint> precision_recall_curve(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                            std::size_t max_points) {
  check_pool(scores, labels);
  const auto positives = counts(labels).first;
  std::vector<PrPoint> out;
  if (positives == 0) return out;
  const auto gs = groups(scores, labels);
  const std::size_t every = max_points > 0 ? std::max<std::size_t>(1, gs.size() / max_points) : 1;
  for (std::size_t i = 0; i < gs.size(); ++i) {
    if (i % every != 0 && i + 1 != gs.size()) continue;
    const Group& g = gs[i];
    out.push_back({g.score, static_cast<double>(g.tp) / static_cast<double>(g.tp + g.fp),
                   static_cast<double>(g.tp) / static_cast<double>(positives)});
  }
  return out;
}

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : num_classes_(num_classes), counts_(static_cast<std::size_t>(num_classes) * (num_classes + 1), 0) {
  if (num_classes < 1) throw std::invalid_argument("ConfusionMatrix: need at least one class");
}

void ConfusionMatrix::add(const LabelMap& prediction, const LabelMap& seg, const LabelMap& outlier) {
  if (prediction.height != seg.height || prediction.width != seg.width || outlier.height != seg.height ||
      outlier.width != seg.width) {
    throw ShapeError("ConfusionMatrix::add: map sizes differ");
  }
  for (std::size_t i = 0; i < seg.size(); ++i) {
    const int gt = seg.data[i];
    if (gt == kIgnore || outlier.data[i] == 1) continue;
    if (gt >= num_classes_) throw std::invalid_argument("ConfusionMatrix: ground-truth class out of range");
    const int pred = prediction.data[i] < num_classes_ ? prediction.data[i] : num_classes_;
    ++counts_[static_cast<std::size_t>(gt) * (num_classes_ + 1) + pred];
  }
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

std::vector<double> ConfusionMatrix::iou() const {
  std::vector<double> out(num_classes_, kNaN);
  for (int c = 0; c < num_classes_; ++c) {
    std::uint64_t tp = at(c, c), gt = 0, pred = 0;
    for (int k = 0; k <= num_classes_; ++k) gt += at(c, k);
    for (int k = 0; k < num_classes_; ++k) pred += at(k, c);
    const std::uint64_t uni = gt + pred - tp;
    if (uni > 0) out[c] = static_cast<double>(tp) / static_cast<double>(uni);
  }
  return out;
}

double ConfusionMatrix::miou() const {
  if (total() == 0) {
    spdlog::warn("mIoU: no labeled inlier pixels");
    return kNaN;
  }
  double sum = 0.0;
  int n = 0;
  for (double v : iou())
    if (!std::isnan(v)) sum += v, ++n;
  return n ? sum / n : kNaN;
}

std::pair<std::vector<int>, std::vector<std::size_t>> outlier_instances(const LabelMap& outlier) {
  cv::Mat mask(outlier.height, outlier.width, CV_8UC1);
  for (int y = 0; y < outlier.height; ++y)
    for (int x = 0; x < outlier.width; ++x) mask.at<std::uint8_t>(y, x) = outlier.at(y, x) == 1;
  cv::Mat labels;
  const int n = cv::connectedComponents(mask, labels, 8, CV_32S);
  std::vector<int> flat(outlier.size());
  std::vector<std::size_t> area(static_cast<std::size_t>(n), 0);
  for (int y = 0; y < outlier.height; ++y)
    for (int x = 0; x < outlier.width; ++x) {
      const int l = labels.at<int>(y, x);
      flat[static_cast<std::size_t>(y) * outlier.width + x] = l;
      if (l > 0) ++area[l];
    }
  return {flat, area};
}

std::vector<double> log_bins(double lo, double hi, int bins) {
  if (!(lo > 0 && hi > lo) || bins < 1) throw std::invalid_argument("log_bins: need 0 < lo < hi and bins >= 1");
  std::vector<double> edges(bins + 1);
  const double a = std::log10(lo), b = std::log10(hi);
  for (int i = 0; i <= bins; ++i) edges[i] = std::pow(10.0, a + (b - a) * i / bins);
  edges.front() = lo;
  edges.back() = hi;
  return edges;
}

SizeStratifiedPool::SizeStratifiedPool(std::vector<double> edges, bool clamp, int stride)
    : edges_(std::move(edges)), clamp_(clamp), stride_(stride) {
  if (edges_.size() < 2 || !std::is_sorted(edges_.begin(), edges_.end())) {
    throw std::invalid_argument("SizeStratifiedPool: need >= 2 ascending edges");
  }
  if (stride_ < 1) throw std::invalid_argument("SizeStratifiedPool: stride must be >= 1");
}

int SizeStratifiedPool::bin_of(double share) const {
  const int bins = static_cast<int>(edges_.size()) - 1;
  if (share < edges_.front()) return clamp_ ? 0 : -1;
  if (share > edges_.back()) return clamp_ ? bins - 1 : -1;
  if (share == edges_.back()) return bins - 1;
  const auto it = std::upper_bound(edges_.begin(), edges_.end(), share);
  return static_cast<int>(it - edges_.begin()) - 1;
}

void SizeStratifiedPool::add(const RealMap& score, const LabelMap& outlier) {
  if (score.height != outlier.height || score.width != outlier.width) throw ShapeError("SizeStratifiedPool::add");
  const auto [instances, area] = outlier_instances(outlier);
  const double total = static_cast<double>(outlier.size());
  for (int y = 0; y < score.height; y += stride_)
    for (int x = 0; x < score.width; x += stride_) {
      const std::uint8_t l = outlier.at(y, x);
      if (l == 0) {
        negatives_.push_back(score.at(y, x));
      } else if (l == 1) {
        const int inst = instances[static_cast<std::size_t>(y) * outlier.width + x];
        const int bin = bin_of(static_cast<double>(area[inst]) / total);
        if (bin >= 0) positives_.emplace_back(score.at(y, x), bin);
      }
    }
}

std::vector<SizeBin> SizeStratifiedPool::evaluate() const {
  const int bins = static_cast<int>(edges_.size()) - 1;
  const std::vector<double> neg = sorted_desc(negatives_);
  std::vector<std::vector<double>> pos(bins);
  for (const auto& [s, bin] : positives_) pos[bin].push_back(s);
  std::vector<SizeBin> out(bins);
  for (int b = 0; b < bins; ++b) {
    out[b].lo = edges_[b];
    out[b].hi = edges_[b + 1];
    out[b].positives = pos[b].size();
    if (pos[b].empty() || neg.empty()) {
      out[b].ap = out[b].fpr95 = kNaN;
      continue;
    }
    const auto gs = merge_groups(sorted_desc(std::move(pos[b])), neg);
    out[b].ap = ap_from(gs, out[b].positives);
    out[b].fpr95 = fpr95_from(gs, out[b].positives, neg.size());
  }
  return out;
}

std::string AssayStats::formatted(int precision, double scale) const {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << mean * scale << " ± " << std * scale;
  return s.str();
}

AssayStats assay_aggregate(std::span<const double> values) {
  AssayStats a;
  double sum = 0.0;
  for (double v : values)
    if (!std::isnan(v)) sum += v, ++a.count;
  if (a.count == 0) return {kNaN, kNaN, 0};
  a.mean = sum / static_cast<double>(a.count);
  if (a.count < 2) {
    a.std = kNaN;
    return a;
  }
  double ss = 0.0;
  for (double v : values)
    if (!std::isnan(v)) ss += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(ss / static_cast<double>(a.count - 1));
  return a;
}

double pooled_std(const AssayStats& a, const AssayStats& b) { return std::sqrt((a.std * a.std + b.std * b.std) / 2.0); }

void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"criterion", r.criterion},
                     {"dataset", r.dataset},
                     {"pool_size", r.pool_size},
                     {"stride", r.stride},
                     {"positives", r.pooled.positives},
                     {"negatives", r.pooled.negatives},
                     {"ap", number_or_null(r.pooled.ap)},
                     {"auroc", number_or_null(r.pooled.auroc)},
                     {"fpr95", number_or_null(r.pooled.fpr95)}};
  auto stats = [](const AssayStats& a) {
    return nlohmann::json{{"mean", number_or_null(a.mean)}, {"std", number_or_null(a.std)}, {"assays", a.count},
                          {"formatted", a.formatted()}};
  };
  if (r.ap) j["assay_ap"] = stats(*r.ap);
  if (r.auroc) j["assay_auroc"] = stats(*r.auroc);
  if (r.fpr95) j["assay_fpr95"] = stats(*r.fpr95);
  if (r.miou) {
    j["miou"] = number_or_null(*r.miou);
    nlohmann::json per_class = nlohmann::json::array();
    for (double v : r.class_iou) per_class.push_back(number_or_null(v));
    j["class_iou"] = per_class;
  }
  if (!r.size_bins.empty()) {
    nlohmann::json bins = nlohmann::json::array();
    for (const SizeBin& b : r.size_bins) {
      bins.push_back({{"lo", b.lo}, {"hi", b.hi}, {"positives", b.positives}, {"ap", number_or_null(b.ap)},
                      {"fpr95", number_or_null(b.fpr95)}});
    }
    j["size_bins"] = bins;
  }
  if (!r.args.is_null()) j["args"] = r.args;
}

void write_report(const std::filesystem::path& stem, const MetricsReport& report) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::ofstream json(stem.string() + ".json");
  json << nlohmann::json(report).dump(2) << "\n";
  std::ofstream csv(stem.string() + ".csv");
  csv << "criterion,metric,value\n";
  auto row = [&](const std::string& name, double v) { csv << report.criterion << "," << name << "," << fmt_double(v) << "\n"; };
  row("ap", report.pooled.ap);
  row("auroc", report.pooled.auroc);
  row("fpr95", report.pooled.fpr95);
  if (report.ap) row("assay_ap_mean", report.ap->mean), row("assay_ap_std", report.ap->std);
  if (report.auroc) row("assay_auroc_mean", report.auroc->mean), row("assay_auroc_std", report.auroc->std);
  if (report.fpr95) row("assay_fpr95_mean", report.fpr95->mean), row("assay_fpr95_std", report.fpr95->std);
  if (report.miou) row("miou", *report.miou);
  if (!json || !csv) throw std::runtime_error("cannot write report " + stem.string());
}

void write_pr_curve_csv(const std::filesystem::path& path, const std::vector<PrPoint>& curve) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out << "threshold,precision,recall\n";
  for (const PrPoint& p : curve) out << fmt_double(p.threshold) << "," << fmt_double(p.precision) << "," << fmt_double(p.recall) << "\n";
}

void write_size_bins_csv(const std::filesystem::path& path, const std::vector<SizeBin>& bins) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  out << "area_lo,area_hi,positives,ap,fpr95\n";
  for (const SizeBin& b : bins) {
    out << fmt_double(b.lo) << "," << fmt_double(b.hi) << "," << b.positives << "," << fmt_double(b.ap) << ","
        << fmt_double(b.fpr95) << "\n";
  }
}

namespace {

struct Plot {
  static constexpr int kW = 560, kH = 420, kLeft = 60, kRight = 20, kTop = 40, kBottom = 50;
  cv::Mat img{kH, kW, CV_8UC3, cv::Scalar(255, 255, 255)};

  cv::Point map(double fx, double fy) const {
    return {kLeft + static_cast<int>(std::lround(fx * (kW - kLeft - kRight))),
            kH - kBottom - static_cast<int>(std::lround(fy * (kH - kTop - kBottom)))};
  }

  void axes(const std::string& title, const std::string& xlabel, const std::string& ylabel) {
    cv::rectangle(img, map(0, 1), map(1, 0), cv::Scalar(0, 0, 0), 1);
    for (int i = 0; i <= 4; ++i) {
      const double t = i / 4.0;
      std::ostringstream s;
      s << std::setprecision(2) << t;
      cv::putText(img, s.str(), map(0, t) + cv::Point(-40, 5), cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0));
      cv::line(img, map(0, t), map(0, t) + cv::Point(5, 0), cv::Scalar(0, 0, 0));
    }
    cv::putText(img, title, {kLeft, 25}, cv::FONT_HERSHEY_SIMPLEX, 0.55, cv::Scalar(0, 0, 0));
    cv::putText(img, xlabel, {kW / 2 - 40, kH - 12}, cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 0, 0));
    cv::putText(img, ylabel, {5, kTop - 8}, cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 0, 0));
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    if (!cv::imwrite(path.string(), img)) throw std::runtime_error("cannot write plot " + path.string());
  }
};

}  // namespace

void plot_pr_curve(const std::filesystem::path& path, const std::vector<PrPoint>& curve, const std::string& title) {
  Plot p;
  p.axes(title, "recall", "precision");
  std::vector<cv::Point> pts;
  for (const PrPoint& q : curve) pts.push_back(p.map(q.recall, q.precision));
  if (pts.size() > 1) cv::polylines(p.img, pts, false, cv::Scalar(200, 60, 20), 2, cv::LINE_AA);
  p.save(path);
}

void plot_size_bins(const std::filesystem::path& path, const std::vector<SizeBin>& bins, const std::string& title) {
  Plot p;
  p.axes(title, "outlier area share (log bins)", "AP / FPR95");
  const int n = static_cast<int>(bins.size());
  std::vector<cv::Point> ap, fpr;
  for (int i = 0; i < n; ++i) {
    const double fx = (i + 0.5) / n;
    if (!std::isnan(bins[i].ap)) ap.push_back(p.map(fx, bins[i].ap));
    if (!std::isnan(bins[i].fpr95)) fpr.push_back(p.map(fx, bins[i].fpr95));
    std::ostringstream s;
    s << std::setprecision(1) << std::scientific << bins[i].lo;
    cv::putText(p.img, s.str(), p.map(static_cast<double>(i) / n, 0) + cv::Point(0, 15), cv::FONT_HERSHEY_SIMPLEX, 0.3,
                cv::Scalar(0, 0, 0));
  }
  if (ap.size() > 1) cv::polylines(p.img, ap, false, cv::Scalar(200, 60, 20), 2, cv::LINE_AA);
  if (fpr.size() > 1) cv::polylines(p.img, fpr, false, cv::Scalar(30, 30, 200), 2, cv::LINE_AA);
  for (const auto& q : ap) cv::circle(p.img, q, 3, cv::Scalar(200, 60, 20), cv::FILLED);
  for (const auto& q : fpr) cv::circle(p.img, q, 3, cv::Scalar(30, 30, 200), cv::FILLED);
  p.save(path);
}

}  // namespace dosr
