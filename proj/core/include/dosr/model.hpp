#pragma once

#include <cstdint>
#include <vector>

#include "dosr/backbone.hpp"
#include "dosr/heads.hpp"

namespace dosr {

/// Shared feature extractor followed by an open-set head.
class Model {
 public:
  Model() = default;
  Model(const ExtractorConfig& extractor, const HeadConfig& head, std::uint64_t seed);

  const Extractor& extractor() const { return extractor_; }
  Extractor& extractor() { return extractor_; }
  const Head& head() const { return head_; }
  Head& head() { return head_; }
  int num_classes() const { return head_.config().num_classes; }
  HeadKind kind() const { return head_.config().kind; }

  /// Deterministic evaluation pass.
  PredictionMaps infer(const Tensor& images) const;

  std::vector<Param*> parameters();
  std::vector<const Param*> parameters() const;

 private:
  Extractor extractor_;
  Head head_;
};

}  // namespace dosr
