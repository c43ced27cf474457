#pragma once

// Dense outlier scores and open-set decoding at full input resolution.

#include <filesystem>
#include <string>

#include "dosr/model.hpp"
#include "dosr/rng.hpp"

namespace dosr {

enum class Criterion {
  kOp,         // trained outlier probability
  kMsm,        // 1 - max softmax
  kFused,      // OP x MSM
  kEntropy,    // entropy of the class posterior
  kMcMi,       // MC-dropout mutual information
  kMcEntropy,  // MC-dropout predictive entropy
};

std::string to_string(Criterion c);
/// Accepts op, msm, op_x_msm (alias fused), entropy, mc_mi, mc_entropy.
Criterion criterion_from_string(const std::string& name);

struct ScoreMap {
  Criterion criterion = Criterion::kOp;
  RealMap scores;  // higher = more outlier
};

/// Segmentation map with values in {0..C-1} plus kOutlierId = C.
struct OpenSetMap {
  int num_classes = 0;
  LabelMap labels;
};

/// Bilinear upsampling of logit-resolution maps (stride 4) to H x W. The
/// logit grid is anchored at the input's top-left corner.
Tensor upsample_to_input(const Tensor& maps, int height, int width);
RealMap upsample_scores(const RealMap& map, int height, int width);

/// 1 - max over the first `num_classes` channels of sample 0 (all channels
/// when num_classes <= 0).
ScoreMap score_msm(const Tensor& posterior, int num_classes = 0);
/// Outlier posterior of sample 0; `posterior` is the N x 1 x H x W output of
/// outlier_posterior after upsampling.
ScoreMap score_op(const Tensor& outlier_probability);
/// Upsampled outlier probability from raw head output. Throws for heads with
/// no outlier posterior.
ScoreMap score_op(const PredictionMaps& maps, int height, int width);
ScoreMap score_fused(const ScoreMap& op, const ScoreMap& msm);
ScoreMap score_entropy(const Tensor& posterior, int num_classes = 0);

/// Runs the heads `passes` times with dropout on the shared features.
/// Returns mutual information, or predictive entropy when
/// `predictive_entropy` is set.
ScoreMap score_mc_dropout(const Model& model, const Tensor& image, int passes, Rng& rng,
                          bool predictive_entropy = false);

/// Argmax over the first num_classes channels (ties to the lowest index);
/// pixels with score >= threshold become num_classes.
OpenSetMap decode_open_set(const Tensor& posterior, const ScoreMap& score, int num_classes, double threshold = 0.5);
/// Closed-set argmax (same tie rule).
LabelMap argmax_labels(const Tensor& posterior, int num_classes);

/// Everything evaluation needs from one image.
struct ImageScores {
  Tensor posterior;  // 1 x K x H x W class posterior at input resolution
  LabelMap prediction;
  ScoreMap score;
};

/// Computes `criterion` for a single 1 x 3 x H x W image. `rng` is required
/// only for the MC-dropout criteria.
ImageScores score_image(const Model& model, const Tensor& image, Criterion criterion, Rng* rng = nullptr,
                        int mc_passes = 50);

/// 16-bit PNG of round(s * 65535). Entropy-type scores are divided by ln K
/// first; `max_value` is that bound (1 for probability scores).
void write_score_png(const std::filesystem::path& path, const ScoreMap& score, double max_value = 1.0);
/// Exact float32 sidecar: "DOSRSCR1", int32 height, int32 width, values.
void write_score_sidecar(const std::filesystem::path& path, const ScoreMap& score);
RealMap read_score_sidecar(const std::filesystem::path& path);

}  // namespace dosr
