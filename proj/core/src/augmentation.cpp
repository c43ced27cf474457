#include "dosr/augmentation.hpp"

#include <algorithm>
#include <cmath>

#include "dosr/nn.hpp"

namespace dosr {
namespace {

LabelMap pad_labels(const LabelMap& labels, int height, int width) {
  LabelMap out(height, width, kIgnore);
  for (int y = 0; y < labels.height; ++y)
    for (int x = 0; x < labels.width; ++x) out.at(y, x) = labels.at(y, x);
  return out;
}

}  // namespace

void PasteConfig::validate() const {
  if (!(fixed_share > 0 && fixed_share < 1)) throw std::invalid_argument("paste: fixed share must be in (0, 1)");
  if (!(min_share > 0 && min_share <= max_share && max_share < 1)) {
    throw std::invalid_argument("paste: share range must satisfy 0 < min <= max < 1");
  }
}

double PasteConfig::draw_share(Rng& rng) const {
  return mode == PasteMode::kRsp ? rng.uniform(min_share, max_share) : fixed_share;
}

void to_json(nlohmann::json& j, const PasteConfig& c) {
  j = nlohmann::json{{"mode", c.mode == PasteMode::kRsp ? "rsp" : "fixed"},
                     {"fixed_share", c.fixed_share},
                     {"min_share", c.min_share},
                     {"max_share", c.max_share}};
}

void from_json(const nlohmann::json& j, PasteConfig& c) {
  PasteConfig d;
  const std::string mode = j.value("mode", std::string("fixed"));
  if (mode != "fixed" && mode != "rsp") throw std::invalid_argument("paste: unknown mode '" + mode + "'");
  c.mode = mode == "rsp" ? PasteMode::kRsp : PasteMode::kFixed;
  c.fixed_share = j.value("fixed_share", d.fixed_share);
  c.min_share = j.value("min_share", d.min_share);
  c.max_share = j.value("max_share", d.max_share);
}

void BatchSpec::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch: size must be >= 1");
  if (crop_size < 1) throw std::invalid_argument("batch: crop size must be >= 1");
  if (jitter_base < 1) throw std::invalid_argument("batch: jitter base must be >= 1");
  if (base_share < 0 || base_share > 1) throw std::invalid_argument("batch: base share must be in [0, 1]");
  if (flip_probability < 0 || flip_probability > 1) throw std::invalid_argument("batch: flip probability in [0, 1]");
}

void to_json(nlohmann::json& j, const BatchSpec& s) {
  j = nlohmann::json{{"batch_size", s.batch_size},
                     {"crop_size", s.crop_size},
                     {"jitter", s.jitter == JitterMode::kScale ? "scale" : "off"},
                     {"jitter_base", s.jitter_base},
                     {"base_share", s.base_share},
                     {"flip_probability", s.flip_probability}};
}

void from_json(const nlohmann::json& j, BatchSpec& s) {
  BatchSpec d;
  s.batch_size = j.value("batch_size", d.batch_size);
  s.crop_size = j.value("crop_size", d.crop_size);
  const std::string jitter = j.value("jitter", std::string("off"));
  if (jitter != "off" && jitter != "scale") throw std::invalid_argument("batch: unknown jitter '" + jitter + "'");
  s.jitter = jitter == "scale" ? JitterMode::kScale : JitterMode::kOff;
  s.jitter_base = j.value("jitter_base", d.jitter_base);
  s.base_share = j.value("base_share", d.base_share);
  s.flip_probability = j.value("flip_probability", d.flip_probability);
}

const char* to_string(NegativeMode m) {
  switch (m) {
    case NegativeMode::kPaste: return "paste";
    case NegativeMode::kNoPaste: return "no_paste";
    case NegativeMode::kNone: return "none";
  }
  return "?";
}

NegativeMode negative_mode_from_string(const std::string& s) {
  if (s == "paste") return NegativeMode::kPaste;
  if (s == "no_paste") return NegativeMode::kNoPaste;
  if (s == "none") return NegativeMode::kNone;
  throw std::invalid_argument("unknown negative mode '" + s + "'");
}

int draw_jitter_side(const BatchSpec& spec, Rng& rng) {
  if (spec.jitter == JitterMode::kOff) return spec.jitter_base;
  if (rng.bernoulli(spec.base_share)) return spec.jitter_base;
  return static_cast<int>(std::lround(rng.uniform(spec.jitter_base, 3.0 * spec.jitter_base)));
}

LabeledSample crop_and_jitter(const LabeledSample& sample, const BatchSpec& spec, Rng& rng) {
  LabeledSample s = sample;
  if (spec.jitter == JitterMode::kScale) {
    const int side = draw_jitter_side(spec, rng);
    const double scale = static_cast<double>(side) / std::min(s.height(), s.width());
    const int h = std::max(1, static_cast<int>(std::lround(s.height() * scale)));
    const int w = std::max(1, static_cast<int>(std::lround(s.width() * scale)));
    s.image = resize_image(s.image, h, w, Interp::kBilinear);
    s.seg = resize_labels(s.seg, h, w);
    s.outlier = resize_labels(s.outlier, h, w);
    if (s.content) s.content = resize_labels(*s.content, h, w);
  }
  const int crop = spec.crop_size;
  if (s.height() < crop || s.width() < crop) {
    const int h = std::max(s.height(), crop), w = std::max(s.width(), crop);
    s.image = reflect_pad(s.image, h, w);
    s.seg = pad_labels(s.seg, h, w);
    s.outlier = pad_labels(s.outlier, h, w);
    if (s.content) s.content = pad_labels(*s.content, h, w);
  }
  const int y0 = rng.uniform_int(0, s.height() - crop);
  const int x0 = rng.uniform_int(0, s.width() - crop);
  s.image = crop_image(s.image, y0, x0, crop, crop);
  s.seg = crop_labels(s.seg, y0, x0, crop, crop);
  s.outlier = crop_labels(s.outlier, y0, x0, crop, crop);
  if (s.content) s.content = crop_labels(*s.content, y0, x0, crop, crop);
  if (rng.bernoulli(spec.flip_probability)) {
    s.image = flip_image(s.image);
    s.seg = flip_labels(s.seg);
    s.outlier = flip_labels(s.outlier);
    if (s.content) s.content = flip_labels(*s.content);
  }
  return s;
}

std::pair<int, int> patch_size(int bbox_h, int bbox_w, int image_h, int image_w, double share) {
  if (bbox_h < 1 || bbox_w < 1 || image_h < 1 || image_w < 1) throw std::invalid_argument("patch_size: empty extent");
  const double area = share * image_h * image_w;
  const double aspect = static_cast<double>(bbox_h) / bbox_w;
  int h = static_cast<int>(std::floor(std::sqrt(area * aspect)));
  int w = static_cast<int>(std::floor(std::sqrt(area / aspect)));
  if (h > image_h) {
    h = image_h;
    w = static_cast<int>(std::floor(area / h));
  }
  if (w > image_w) {
    w = image_w;
    h = std::min(image_h, static_cast<int>(std::floor(area / w)));
  }
  return {std::clamp(h, 1, image_h), std::clamp(w, 1, image_w)};
}

LabeledSample paste_negative(const LabeledSample& inlier, const NegativeSample& neg, const PasteConfig& cfg, Rng& rng,
                             PasteRect* rect) {
  const BBox& b = neg.bbox;
  if (!b.valid_for(neg.image.w(), neg.image.h())) throw std::invalid_argument("paste_negative: invalid bbox");
  const double share = cfg.draw_share(rng);
  const auto [ph, pw] = patch_size(b.height(), b.width(), inlier.height(), inlier.width(), share);
  const Tensor patch = resize_image(crop_image(neg.image, b.ymin, b.xmin, b.height(), b.width()), ph, pw, Interp::kArea);
  std::optional<LabelMap> patch_content;
  if (neg.content) patch_content = resize_labels(crop_labels(*neg.content, b.ymin, b.xmin, b.height(), b.width()), ph, pw);

  const int y0 = rng.uniform_int(0, inlier.height() - ph);
  const int x0 = rng.uniform_int(0, inlier.width() - pw);
  LabeledSample out = inlier;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < ph; ++y)
      for (int x = 0; x < pw; ++x) out.image.at(0, c, y0 + y, x0 + x) = patch.at(0, c, y, x);
  for (int y = 0; y < ph; ++y)
    for (int x = 0; x < pw; ++x) {
      out.seg.at(y0 + y, x0 + x) = kIgnore;
      out.outlier.at(y0 + y, x0 + x) = 1;
      if (out.content) out.content->at(y0 + y, x0 + x) = patch_content ? patch_content->at(y, x) : kForeignContent;
    }
  if (rect) *rect = {y0, x0, ph, pw, share};
  return out;
}

LabeledSample negative_as_sample(const NegativeSample& neg) {
  LabeledSample s;
  s.id = neg.id;
  s.image = neg.image;
  const int h = neg.image.h(), w = neg.image.w();
  s.seg = LabelMap(h, w, kIgnore);
  s.outlier = LabelMap(h, w, kIgnore);
  for (int y = neg.bbox.ymin; y < neg.bbox.ymax; ++y)
    for (int x = neg.bbox.xmin; x < neg.bbox.xmax; ++x) s.outlier.at(y, x) = 1;
  s.content = neg.content;
  return s;
}

int inliers_per_batch(const BatchSpec& spec, NegativeMode mode) {
  return mode == NegativeMode::kNone ? spec.batch_size : (spec.batch_size + 1) / 2;
}

std::vector<LabeledSample> make_mixed_batch(const std::vector<const LabeledSample*>& inliers,
                                            const std::vector<NegativeSample>& negatives, const BatchSpec& spec,
                                            const PasteConfig& cfg, NegativeMode mode, Rng& rng) {
  spec.validate();
  const int n_in = inliers_per_batch(spec, mode);
  const int n_neg = spec.batch_size - n_in;
  if (static_cast<int>(inliers.size()) != n_in) {
    throw std::invalid_argument("make_mixed_batch: expected " + std::to_string(n_in) + " inliers, got " +
                                std::to_string(inliers.size()));
  }
  if (mode != NegativeMode::kNone && negatives.empty()) throw std::invalid_argument("make_mixed_batch: no negatives");
  if (mode != NegativeMode::kNone && spec.batch_size < 2) {
    throw std::invalid_argument("make_mixed_batch: mixing needs batch size >= 2");
  }
  auto draw_negative = [&]() -> const NegativeSample& {
    return negatives[rng.uniform_int(0, static_cast<int>(negatives.size()) - 1)];
  };

  std::vector<LabeledSample> batch;
  batch.reserve(spec.batch_size);
  for (const LabeledSample* in : inliers) {
    LabeledSample s = crop_and_jitter(*in, spec, rng);
    if (mode == NegativeMode::kPaste) s = paste_negative(s, draw_negative(), cfg, rng);
    batch.push_back(std::move(s));
  }
  for (int i = 0; i < n_neg; ++i) batch.push_back(crop_and_jitter(negative_as_sample(draw_negative()), spec, rng));
  return batch;
}

Batch collate(const std::vector<LabeledSample>& samples) {
  Batch b;
  std::vector<const Tensor*> images;
  for (const LabeledSample& s : samples) {
    images.push_back(&s.image);
    b.seg.push_back(s.seg);
    b.outlier.push_back(s.outlier);
    b.ids.push_back(s.id);
  }
  b.images = stack_images(images);
  return b;
}

}  // namespace dosr
