#pragma once

// Training-data engine: crop/flip/scale jitter, negative-patch pasting and
// mixed inlier/negative batches.

#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "dosr/datasets.hpp"
#include "dosr/rng.hpp"

namespace dosr {

enum class PasteMode { kFixed, kRsp };

struct PasteConfig {
  PasteMode mode = PasteMode::kFixed;
  double fixed_share = 0.05;
  double min_share = 0.001;
  double max_share = 0.10;

  void validate() const;
  /// Draws s_n (an area share of the inlier image).
  double draw_share(Rng& rng) const;
};

void to_json(nlohmann::json& j, const PasteConfig& c);
void from_json(const nlohmann::json& j, PasteConfig& c);

enum class JitterMode { kOff, kScale };

struct BatchSpec {
  int batch_size = 8;
  int crop_size = 512;
  JitterMode jitter = JitterMode::kOff;
  /// Shorter-side target of the jitter: kept with probability base_share,
  /// otherwise uniform in [base, 3 * base].
  int jitter_base = 512;
  double base_share = 0.3;
  double flip_probability = 0.5;

  void validate() const;
};

void to_json(nlohmann::json& j, const BatchSpec& s);
void from_json(const nlohmann::json& j, BatchSpec& s);

/// How negatives enter training.
enum class NegativeMode {
  kPaste,    // pasted into inliers + standalone
  kNoPaste,  // standalone only
  kNone,     // inliers only
};

const char* to_string(NegativeMode m);
NegativeMode negative_mode_from_string(const std::string& s);

/// Shorter-side length drawn by the jitter (the base size when jitter is off).
int draw_jitter_side(const BatchSpec& spec, Rng& rng);

/// Random crop of spec.crop_size with optional scale jitter and horizontal
/// flip. Undersized images are mirror-padded; padded labels are IGNORE.
LabeledSample crop_and_jitter(const LabeledSample& sample, const BatchSpec& spec, Rng& rng);

struct PasteRect {
  int y0 = 0, x0 = 0, height = 0, width = 0;
  double share = 0.0;  // requested s_n
  std::size_t area() const { return static_cast<std::size_t>(height) * width; }
};

/// Patch size for a bbox of bbox_h x bbox_w pasted with area share `share`
/// into an image_h x image_w inlier. Aspect is preserved; dimensions larger
/// than the inlier are clamped and the other side grows to keep the area.
std::pair<int, int> patch_size(int bbox_h, int bbox_w, int image_h, int image_w, double share);

/// Pastes the bbox content of `neg` into `inlier`. The rectangle becomes
/// seg = IGNORE, outlier = 1; every other pixel is left untouched.
LabeledSample paste_negative(const LabeledSample& inlier, const NegativeSample& neg, const PasteConfig& cfg, Rng& rng,
                             PasteRect* rect = nullptr);

/// Standalone negative: seg IGNORE everywhere, outlier 1 inside the bbox and
/// IGNORE outside.
LabeledSample negative_as_sample(const NegativeSample& neg);

/// Number of inlier images consumed by one batch.
int inliers_per_batch(const BatchSpec& spec, NegativeMode mode);

/// Builds a batch from `inliers` (exactly inliers_per_batch of them) and
/// negatives drawn uniformly with replacement. With kPaste/kNoPaste the batch
/// is ceil(B/2) inlier-derived samples followed by floor(B/2) negatives.
std::vector<LabeledSample> make_mixed_batch(const std::vector<const LabeledSample*>& inliers,
                                            const std::vector<NegativeSample>& negatives, const BatchSpec& spec,
                                            const PasteConfig& cfg, NegativeMode mode, Rng& rng);

struct Batch {
  Tensor images;
  std::vector<LabelMap> seg;
  std::vector<LabelMap> outlier;
  std::vector<std::string> ids;
};

Batch collate(const std::vector<LabeledSample>& samples);

}  // namespace dosr
