#include "dosr/model.hpp"

#include "dosr/rng.hpp"

namespace dosr {

Model::Model(const ExtractorConfig& extractor, const HeadConfig& head, std::uint64_t seed)
    : extractor_(extractor, Rng(seed).split(1).seed()),
      head_(head, extractor.feature_width, extractor.aux_strides, Rng(seed).split(2).seed()) {}

PredictionMaps Model::infer(const Tensor& images) const { return head_.infer(extractor_.infer(images)); }

std::vector<Param*> Model::parameters() {
  std::vector<Param*> out = extractor_.parameters();
  for (Param* p : head_.parameters()) out.push_back(p);
  return out;
}

std::vector<const Param*> Model::parameters() const {
  std::vector<const Param*> out = extractor_.parameters();
  for (const Param* p : head_.parameters()) out.push_back(p);
  return out;
}

}  // namespace dosr
