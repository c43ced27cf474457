#include "dosr/backbone.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>
#include <type_traits>

namespace dosr {
namespace {

template <class Conv>
Tensor apply(Conv& conv, const Tensor& x) {
  if constexpr (std::is_const_v<Conv>) {
    return conv.infer(x);
  } else {
    return conv.forward(x);
  }
}

int round_up(int v, int m) { return (v + m - 1) / m * m; }
int ceil_div(int v, int m) { return (v + m - 1) / m; }

}  // namespace

void ExtractorConfig::validate() const {
  if (stage_widths.size() != 4) throw std::invalid_argument("extractor: exactly 4 encoder stages required");
  for (int w : stage_widths)
    if (w <= 0) throw std::invalid_argument("extractor: stage widths must be positive");
  if (feature_width <= 0) throw std::invalid_argument("extractor: feature width D must be positive");
  if (upsample_blocks != 3) {
    throw std::invalid_argument("extractor: exactly 3 upsampling blocks required, got " +
                                std::to_string(upsample_blocks));
  }
  if (spp_grids.empty()) throw std::invalid_argument("extractor: at least one SPP grid required");
  for (int g : spp_grids)
    if (g < 1) throw std::invalid_argument("extractor: SPP grid sizes must be >= 1");
  std::set<int> seen;
  for (int s : aux_strides) {
    if (s != 32 && s != 16 && s != 8) throw std::invalid_argument("extractor: aux tap stride must be 32, 16 or 8");
    if (!seen.insert(s).second) throw std::invalid_argument("extractor: duplicate aux tap stride");
  }
  if (blend != "sum") throw std::invalid_argument("extractor: unsupported blend '" + blend + "'");
}

void to_json(nlohmann::json& j, const ExtractorConfig& c) {
  j = nlohmann::json{{"stage_widths", c.stage_widths},   {"feature_width", c.feature_width},
                     {"spp_grids", c.spp_grids},         {"upsample_blocks", c.upsample_blocks},
                     {"aux_strides", c.aux_strides},     {"blend", c.blend}};
}

void from_json(const nlohmann::json& j, ExtractorConfig& c) {
  ExtractorConfig d;
  c.stage_widths = j.value("stage_widths", d.stage_widths);
  c.feature_width = j.value("feature_width", d.feature_width);
  c.spp_grids = j.value("spp_grids", d.spp_grids);
  c.upsample_blocks = j.value("upsample_blocks", d.upsample_blocks);
  c.aux_strides = j.value("aux_strides", d.aux_strides);
  c.blend = j.value("blend", d.blend);
}

Extractor::Extractor(const ExtractorConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const auto& w = config_.stage_widths;
  const int d = config_.feature_width;
  const auto pre = ParamGroup::kPretrained;
  const auto fresh = ParamGroup::kFresh;

  stem_ = Conv2d("stem", 3, w[0], 3, 2, pre, rng);
  int in = w[0];
  for (int k = 0; k < 4; ++k) {
    const std::string name = "stage" + std::to_string(k);
    Stage s;
    s.down = Conv2d(name + ".down", in, w[k], 3, 2, pre, rng);
    s.res_a = Conv2d(name + ".res_a", w[k], w[k], 3, 1, pre, rng);
    s.res_b = Conv2d(name + ".res_b", w[k], w[k], 3, 1, pre, rng);
    stages_.push_back(std::move(s));
    in = w[k];
  }

  spp_bottleneck_ = Conv2d("spp.bottleneck", w[3], d, 1, 1, fresh, rng);
  const int branch_width = std::max(1, d / 4);
  for (int g : config_.spp_grids) {
    spp_branches_.emplace_back("spp.branch" + std::to_string(g), d, branch_width, 1, 1, fresh, rng);
  }
  spp_fuse_ = Conv2d("spp.fuse", d + branch_width * static_cast<int>(config_.spp_grids.size()), d, 1, 1, fresh, rng);

  for (int k = 0; k < config_.upsample_blocks; ++k) {
    const std::string name = "up" + std::to_string(k + 1);
    UpBlock u;
    u.skip_proj = Conv2d(name + ".skip_proj", w[2 - k], d, 1, 1, fresh, rng);
    u.blend = Conv2d(name + ".blend", d, d, 3, 1, fresh, rng);
    up_.push_back(std::move(u));
  }
}

FeatureBundle Extractor::infer(const Tensor& images) const { return run(*this, images, nullptr); }

FeatureBundle Extractor::forward(const Tensor& images) { return run(*this, images, &cache_); }

// Self is const in evaluation mode, so every layer goes through its
// cache-free infer() path.
template <class Self>
FeatureBundle Extractor::run(Self& self, const Tensor& images, Cache* cache) {
  constexpr bool kTrain = !std::is_const_v<Self>;

  if (images.c() != 3) throw ShapeError("extractor expects 3-channel images, got " + images.shape_str());
  if (images.h() < 1 || images.w() < 1) throw ShapeError("extractor: empty image");

  FeatureBundle out;
  out.input_h = images.h();
  out.input_w = images.w();
  out.padded_h = round_up(images.h(), kMaxStride);
  out.padded_w = round_up(images.w(), kMaxStride);
  const Tensor padded = reflect_pad(images, out.padded_h, out.padded_w);

  Tensor x = relu(apply(self.stem_, padded));
  if constexpr (kTrain) cache->stem = x;
  std::vector<Tensor> skips;
  std::vector<Tensor> downs, mids;
  for (auto& stage : self.stages_) {
    Tensor d = relu(apply(stage.down, x));
    Tensor a = relu(apply(stage.res_a, d));
    Tensor b = apply(stage.res_b, a);
    b += d;
    Tensor y = relu(b);
    if constexpr (kTrain) {
      downs.push_back(d);
      mids.push_back(std::move(a));
    }
    skips.push_back(y);
    x = std::move(y);
  }

  // Spatial pyramid pooling on the stride-32 features.
  Tensor bottleneck = relu(apply(self.spp_bottleneck_, skips[3]));
  std::vector<Tensor> branch_small;
  std::vector<Tensor> branch_full;
  for (std::size_t i = 0; i < self.spp_branches_.size(); ++i) {
    const int grid = self.config_.spp_grids[i];
    Tensor q = relu(apply(self.spp_branches_[i], grid_avg_pool(bottleneck, grid)));
    branch_full.push_back(grid_broadcast(q, bottleneck.h(), bottleneck.w()));
    if constexpr (kTrain) branch_small.push_back(std::move(q));
  }
  std::vector<const Tensor*> parts{&bottleneck};
  for (const Tensor& b : branch_full) parts.push_back(&b);
  Tensor spp_out = relu(apply(self.spp_fuse_, concat_channels(parts)));

  auto tap = [&](int stride, const Tensor& t) {
    if (std::find(self.config_.aux_strides.begin(), self.config_.aux_strides.end(), stride) !=
        self.config_.aux_strides.end()) {
      out.aux_taps.push_back({stride, t});
    }
  };
  // Taps are emitted in decreasing stride order: 32, 16, 8.
  tap(32, spp_out);

  Tensor state = spp_out;
  std::vector<Tensor> projs, ups;
  for (int k = 0; k < static_cast<int>(self.up_.size()); ++k) {
    auto& block = self.up_[k];
    const Tensor& skip = skips[2 - k];
    Tensor proj = relu(apply(block.skip_proj, skip));
    Tensor sum = resize_bilinear(state, skip.h(), skip.w(), 2.0);
    sum += proj;
    Tensor y = relu(apply(block.blend, sum));
    if (k == 0) tap(16, y);
    if (k == 1) tap(8, y);
    if constexpr (kTrain) {
      projs.push_back(std::move(proj));
      ups.push_back(y);
    }
    state = std::move(y);
  }

  out.shared = crop(state, ceil_div(images.h(), kOutputStride), ceil_div(images.w(), kOutputStride));

  if constexpr (kTrain) {
    cache->in_h = images.h();
    cache->in_w = images.w();
    cache->pad_h = out.padded_h;
    cache->pad_w = out.padded_w;
    cache->down = std::move(downs);
    cache->mid = std::move(mids);
    cache->skip = std::move(skips);
    cache->spp_bottleneck = std::move(bottleneck);
    cache->spp_branch = std::move(branch_small);
    cache->spp_out = std::move(spp_out);
    cache->up_proj = std::move(projs);
    cache->up_out = std::move(ups);
  }
  return out;
}

void Extractor::backward(const FeatureGrad& grad) {
  Cache& c = cache_;
  if (c.skip.empty()) throw std::logic_error("extractor backward without forward");

  // Taps are emitted in the order 32, 16, 8 regardless of config order.
  auto tap_grad = [&](int stride) -> const Tensor* {
    int idx = 0;
    for (int s : {32, 16, 8}) {
      const bool present =
          std::find(config_.aux_strides.begin(), config_.aux_strides.end(), s) != config_.aux_strides.end();
      if (!present) continue;
      if (s == stride) {
        if (idx < static_cast<int>(grad.aux_taps.size()) && !grad.aux_taps[idx].empty()) return &grad.aux_taps[idx];
        return nullptr;
      }
      ++idx;
    }
    return nullptr;
  };

  const Tensor& top = c.up_out.back();
  Tensor g = crop_backward(grad.shared, top.h(), top.w());
  std::vector<Tensor> skip_grad(4);
  for (int k = static_cast<int>(up_.size()) - 1; k >= 0; --k) {
    auto& block = up_[k];
    Tensor gs = block.blend.backward(relu_backward(g, c.up_out[k]));
    skip_grad[2 - k] = block.skip_proj.backward(relu_backward(gs, c.up_proj[k]));
    const Tensor& prev = k == 0 ? c.spp_out : c.up_out[k - 1];
    g = resize_bilinear_backward(gs, prev.h(), prev.w(), 2.0);
    const int prev_stride = k == 0 ? 32 : (k == 1 ? 16 : 8);
    if (const Tensor* tg = tap_grad(prev_stride)) g += *tg;
  }

  // SPP
  Tensor g_cat = spp_fuse_.backward(relu_backward(g, c.spp_out));
  std::vector<int> widths{config_.feature_width};
  for (const auto& b : spp_branches_) widths.push_back(b.out_channels());
  std::vector<Tensor> parts = split_channels(g_cat, widths);
  Tensor g_bottleneck = std::move(parts[0]);
  const Tensor& bn = c.spp_bottleneck;
  for (std::size_t i = 0; i < spp_branches_.size(); ++i) {
    const int grid = config_.spp_grids[i];
    Tensor gq = grid_broadcast_backward(parts[i + 1], grid);
    Tensor gp = spp_branches_[i].backward(relu_backward(gq, c.spp_branch[i]));
    g_bottleneck += grid_avg_pool_backward(gp, bn.h(), bn.w());
  }
  g = spp_bottleneck_.backward(relu_backward(g_bottleneck, bn));

  for (int k = 3; k >= 0; --k) {
    if (k < 3) g += skip_grad[k];
    auto& stage = stages_[k];
    Tensor gy = relu_backward(g, c.skip[k]);
    Tensor ga = stage.res_b.backward(gy);
    Tensor gd = stage.res_a.backward(relu_backward(ga, c.mid[k]));
    gd += gy;
    g = stage.down.backward(relu_backward(gd, c.down[k]));
  }
  // The image gradient is not needed.
  stem_.backward(relu_backward(g, c.stem));
}

std::vector<Param*> Extractor::parameters() {
  std::vector<Param*> out;
  stem_.collect(out);
  for (auto& s : stages_) {
    s.down.collect(out);
    s.res_a.collect(out);
    s.res_b.collect(out);
  }
  spp_bottleneck_.collect(out);
  for (auto& b : spp_branches_) b.collect(out);
  spp_fuse_.collect(out);
  for (auto& u : up_) {
    u.skip_proj.collect(out);
    u.blend.collect(out);
  }
  return out;
}

std::vector<const Param*> Extractor::parameters() const {
  std::vector<const Param*> out;
  for (Param* p : const_cast<Extractor*>(this)->parameters()) out.push_back(p);
  return out;
}

int Extractor::encoder_depth() const { return 1 + 3 * static_cast<int>(stages_.size()); }
int Extractor::decoder_depth() const { return 2 * static_cast<int>(up_.size()); }

}  // namespace dosr
