#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dosr/backbone.hpp"

namespace dosr {

/// Open-set recognition module variants.
enum class HeadKind {
  kTwoHead,     // C-way segmentation + binary outlier head
  kConfidence,  // C-way segmentation + trained confidence, no negatives
  kOeCway,      // C-way multi-class trained toward uniform output on negatives
  kCPlus1,      // negatives as an extra (C+1)-th class
  kMultiLabel,  // C one-vs-all sigmoid classifiers
};

std::string to_string(HeadKind kind);
/// Accepts two_head, confidence, oe_cway, cplus1, multilabel.
HeadKind head_kind_from_string(const std::string& name);

struct HeadConfig {
  HeadKind kind = HeadKind::kTwoHead;
  int num_classes = 19;
  /// Width of the hidden 3x3 layer in each branch.
  int hidden_width = 128;
  /// Dropout on the shared features; > 0 enables MC-dropout inference.
  double dropout = 0.0;

  void validate() const;
  /// Channels of class_logits: C, or C + 1 for kCPlus1.
  int class_channels() const;
};

void to_json(nlohmann::json& j, const HeadConfig& c);
void from_json(const nlohmann::json& j, HeadConfig& c);

struct PredictionMaps {
  HeadKind kind = HeadKind::kTwoHead;
  Tensor class_logits;                    // N x K x h x w
  std::optional<Tensor> outlier_logits;   // N x 2 x h x w (kTwoHead)
  std::optional<Tensor> confidence_logit; // N x 1 x h x w (kConfidence)
  std::vector<AuxTap> aux_logits;         // N x C x (H/s) x (W/s) per tap
};

struct PredictionGrad {
  Tensor class_logits;
  std::optional<Tensor> outlier_logits;
  std::optional<Tensor> confidence_logit;
  std::vector<Tensor> aux_logits;  // by tap position; empty entries allowed
};

enum class HeadMode {
  kTrain,       // caches activations, applies dropout
  kEval,        // deterministic, no dropout
  kMonteCarlo,  // no caching, applies dropout
};

class Head {
 public:
  Head() = default;
  Head(const HeadConfig& config, int feature_width, const std::vector<int>& aux_strides, std::uint64_t seed);

  const HeadConfig& config() const { return config_; }
  int feature_width() const { return feature_width_; }

  PredictionMaps infer(const FeatureBundle& features, Rng* dropout_rng = nullptr) const;
  PredictionMaps forward(const FeatureBundle& features, Rng& dropout_rng);
  FeatureGrad backward(const PredictionGrad& grad);

  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;
  /// Parameters owned only by the segmentation branch.
  std::vector<const Param*> segmentation_parameters() const;
  /// Parameters owned only by the outlier / confidence branch.
  std::vector<const Param*> detector_parameters() const;

 private:
  struct Branch {
    Conv2d hidden, classify;
  };
  struct BranchCache {
    Tensor hidden;
  };

  template <class Self>
  static PredictionMaps run(Self& self, const FeatureBundle& features, Rng* rng, bool train);

  HeadConfig config_;
  int feature_width_ = 0;
  Branch segmentation_;
  std::optional<Branch> detector_;
  std::vector<Conv2d> aux_;
  std::vector<int> aux_strides_;

  BranchCache seg_cache_, det_cache_;
  Tensor dropout_mask_;
  int shared_h_ = 0, shared_w_ = 0;
  std::vector<std::pair<int, int>> aux_shapes_;
};

/// Softmax over channels (multi-class heads) or per-channel sigmoid
/// (kMultiLabel). Result has the shape of class_logits.
Tensor class_posterior(const PredictionMaps& maps);

/// Per-pixel outlier probability, N x 1 x h x w.
///   kTwoHead: softmax of the outlier logits, index 1.
///   kCPlus1: posterior of class C.
///   kMultiLabel: 1 - max_c sigmoid_c.
///   kConfidence: 1 - sigmoid(confidence logit).
/// Throws std::invalid_argument for kOeCway, which has no outlier posterior.
Tensor outlier_posterior(const PredictionMaps& maps);

/// Numerically stable softmax over the channel axis.
Tensor softmax_channels(const Tensor& logits);
double sigmoid(double x);

}  // namespace dosr
