#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "dosr/nn.hpp"

namespace dosr {

/// Shape of the dense feature extractor.
///
/// The encoder has one stride-2 stem convolution followed by four stages; each
/// stage halves the resolution with a strided 3x3 convolution and refines with
/// a two-convolution residual block, giving strides 4, 8, 16 and 32. Spatial
/// pyramid pooling runs on the stride-32 features. The decoder is a ladder of
/// three upsampling blocks; each projects the same-stride encoder skip to the
/// feature width, adds it to the bilinearly upsampled decoder state and applies
/// a single 3x3 convolution.
struct ExtractorConfig {
  std::vector<int> stage_widths{32, 64, 128, 256};
  int feature_width = 256;             // D
  std::vector<int> spp_grids{1, 2, 4};
  int upsample_blocks = 3;
  std::vector<int> aux_strides{32, 16, 8};
  /// Blend inside upsampling blocks. Only "sum" (after skip projection) exists.
  std::string blend = "sum";

  /// Throws std::invalid_argument on an unusable configuration.
  void validate() const;
};

void to_json(nlohmann::json& j, const ExtractorConfig& c);
void from_json(const nlohmann::json& j, ExtractorConfig& c);

struct AuxTap {
  int stride = 0;
  Tensor features;
};

struct FeatureBundle {
  Tensor shared;                // N x D x ceil(H/4) x ceil(W/4)
  std::vector<AuxTap> aux_taps;  // at the padded input resolution / stride
  int input_h = 0;
  int input_w = 0;
  int padded_h = 0;
  int padded_w = 0;
};

/// Gradients flowing back into the extractor. Aux gradients are matched to
/// taps by position and may be left empty.
struct FeatureGrad {
  Tensor shared;
  std::vector<Tensor> aux_taps;
};

class Extractor {
 public:
  static constexpr int kOutputStride = 4;
  static constexpr int kMaxStride = 32;

  Extractor() = default;
  Extractor(const ExtractorConfig& config, std::uint64_t seed);

  const ExtractorConfig& config() const { return config_; }

  /// Evaluation-mode forward pass; const and cache-free.
  FeatureBundle infer(const Tensor& images) const;
  /// Training-mode forward pass; caches activations for backward().
  FeatureBundle forward(const Tensor& images);
  /// Accumulates parameter gradients for the last forward() call.
  void backward(const FeatureGrad& grad);

  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;

  /// Number of parametric layers on each path.
  int encoder_depth() const;
  int decoder_depth() const;

 private:
  struct Cache {
    int in_h = 0, in_w = 0, pad_h = 0, pad_w = 0;
    Tensor stem;
    std::vector<Tensor> down, mid, skip;  // per stage
    Tensor spp_bottleneck;
    std::vector<Tensor> spp_branch;        // per grid, after relu at grid size
    Tensor spp_out;
    std::vector<Tensor> up_proj, up_out;   // per U block
    Tensor decoder_out;
  };

  template <class Self>
  static FeatureBundle run(Self& self, const Tensor& images, Cache* cache);

  struct Stage {
    Conv2d down, res_a, res_b;
  };
  struct UpBlock {
    Conv2d skip_proj, blend;
  };

  ExtractorConfig config_;
  Conv2d stem_;
  std::vector<Stage> stages_;
  Conv2d spp_bottleneck_;
  std::vector<Conv2d> spp_branches_;
  Conv2d spp_fuse_;
  std::vector<UpBlock> up_;
  Cache cache_;
};

}  // namespace dosr
