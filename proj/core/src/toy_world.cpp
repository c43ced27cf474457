#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>

#include "dosr/datasets.hpp"
#include "dosr/rng.hpp"

namespace fs = std::filesystem;

namespace dosr {
namespace {

using Rgb = std::array<double, 3>;

// Inlier classes: muted colors with low-contrast patterns.
constexpr std::array<Rgb, 4> kInlierBase{{
    {0.45, 0.45, 0.47},
    {0.27, 0.50, 0.22},
    {0.55, 0.70, 0.88},
    {0.60, 0.42, 0.32},
}};

// Foreign families: saturated colors and busier patterns.
constexpr std::array<Rgb, kNumForeignFamilies> kForeignBase{{
    {0.90, 0.15, 0.80},
    {0.95, 0.88, 0.12},
    {0.10, 0.88, 0.90},
    {1.00, 0.50, 0.05},
    {0.50, 0.12, 0.90},
    {0.90, 0.12, 0.12},
    {0.50, 1.00, 0.20},
    {1.00, 0.62, 0.72},
}};

Rgb hsv_color(double hue, double sat, double val) {
  const double h = std::fmod(hue, 1.0) * 6.0;
  const int i = static_cast<int>(h);
  const double f = h - i, p = val * (1 - sat), q = val * (1 - sat * f), t = val * (1 - sat * (1 - f));
  switch (i % 6) {
    case 0: return {val, t, p};
    case 1: return {q, val, p};
    case 2: return {p, val, t};
    case 3: return {p, q, val};
    case 4: return {t, p, val};
    default: return {val, p, q};
  }
}

Rgb family_base(int family, int num_classes) {
  if (family >= kForeignFamilyBase) return kForeignBase[(family - kForeignFamilyBase) % kNumForeignFamilies];
  if (family < static_cast<int>(kInlierBase.size())) return kInlierBase[family];
  return hsv_color(static_cast<double>(family) / num_classes + 0.13, 0.35, 0.55);
}

/// Bilinearly interpolated lattice noise in [-1, 1].
std::vector<double> value_noise(int h, int w, double cell, Rng& rng) {
  const int gh = static_cast<int>(std::ceil(h / cell)) + 2;
  const int gw = static_cast<int>(std::ceil(w / cell)) + 2;
  std::vector<double> grid(static_cast<std::size_t>(gh) * gw);
  for (double& g : grid) g = rng.uniform(-1.0, 1.0);
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    const double fy = y / cell;
    const int iy = static_cast<int>(fy);
    const double ty = fy - iy;
    for (int x = 0; x < w; ++x) {
      const double fx = x / cell;
      const int ix = static_cast<int>(fx);
      const double tx = fx - ix;
      const double a = grid[iy * gw + ix], b = grid[iy * gw + ix + 1];
      const double c = grid[(iy + 1) * gw + ix], d = grid[(iy + 1) * gw + ix + 1];
      out[static_cast<std::size_t>(y) * w + x] = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
    }
  }
  return out;
}

/// One instance of a texture family rendered over an h x w canvas.
class Texture {
 public:
  Texture(int family, int num_classes, int h, int w, Rng& rng) : family_(family), w_(w) {
    const bool foreign = family >= kForeignFamilyBase;
    base_ = family_base(family, num_classes);
    const double jitter = foreign ? 0.10 : 0.05;
    for (double& v : base_) v = std::clamp(v + rng.uniform(-jitter, jitter), 0.0, 1.0);
    pattern_ = foreign ? (family - kForeignFamilyBase) % 4 : family % 4;
    period_ = foreign ? rng.uniform(5.0, 9.0) : rng.uniform(5.0, 8.0);
    phase_ = rng.uniform(0.0, 2.0 * std::numbers::pi);
    angle_ = rng.uniform(0.0, std::numbers::pi);
    cy_ = rng.uniform(0.0, h);
    cx_ = rng.uniform(0.0, w);
    amplitude_ = foreign ? 0.22 : 0.09;
    const double cell = foreign ? (pattern_ == 2 ? 2.0 : 12.0) : 10.0;
    noise_ = value_noise(h, w, cell, rng);
  }

  Rgb at(int y, int x) const {
    const double n = noise_[static_cast<std::size_t>(y) * w_ + x];
    double m = 0.0;
    const double k = 2.0 * std::numbers::pi / period_;
    if (family_ >= kForeignFamilyBase) {
      switch (pattern_) {
        case 0: m = std::sin(k * (x * std::cos(angle_) + y * std::sin(angle_)) + phase_); break;
        case 1: m = std::sin(k * std::hypot(y - cy_, x - cx_) + phase_); break;
        case 2: m = n; break;
        default: m = n > 0 ? 1.0 : -1.0; break;
      }
    } else {
      switch (pattern_) {
        case 0: m = n; break;
        case 1: m = std::sin(k * y + phase_); break;
        case 2: m = ((static_cast<int>((x + phase_) / period_) + static_cast<int>((y + phase_) / period_)) % 2) ? 1 : -1; break;
        default: m = std::sin(k * x + phase_) * std::sin(k * y + phase_); break;
      }
      m = 0.7 * m + 0.3 * n;
    }
    Rgb out;
    for (int c = 0; c < 3; ++c) out[c] = base_[c] + amplitude_ * m;
    return out;
  }

 private:
  int family_;
  int w_;
  Rgb base_{};
  int pattern_ = 0;
  double period_ = 6.0, phase_ = 0.0, angle_ = 0.0, cy_ = 0.0, cx_ = 0.0, amplitude_ = 0.1;
  std::vector<double> noise_;
};

struct Canvas {
  int h, w;
  std::vector<Rgb> rgb;
  LabelMap content;  // family id per pixel (foreign families stored as 100+)

  Canvas(int height, int width) : h(height), w(width), rgb(static_cast<std::size_t>(height) * width), content(height, width) {}

  void paint(const LabelMap& mask, std::uint8_t value, const Texture& tex) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (mask.at(y, x)) {
          rgb[static_cast<std::size_t>(y) * w + x] = tex.at(y, x);
          content.at(y, x) = value;
        }
  }

  Tensor finish(double noise, Rng& rng) const {
    std::vector<std::uint8_t> bytes(rgb.size() * 3);
    for (std::size_t i = 0; i < rgb.size(); ++i)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(rgb[i][c] + rng.normal(0.0, noise), 0.0, 1.0);
        bytes[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    return image_from_rgb8(bytes.data(), h, w, Normalization{});
  }
};

/// Voronoi partition with `k` cells; returns the cell index per pixel.
LabelMap voronoi(int h, int w, int k, Rng& rng) {
  std::vector<std::array<double, 2>> seeds(k);
  for (auto& s : seeds) s = {rng.uniform(0.0, h), rng.uniform(0.0, w)};
  // anisotropic metric gives elongated, street-like regions
  const double sy = rng.uniform(0.6, 1.4);
  LabelMap cells(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int best = 0;
      double best_d = 1e300;
      for (int i = 0; i < k; ++i) {
        const double dy = (y - seeds[i][0]) * sy, dx = x - seeds[i][1];
        const double d = dy * dy + dx * dx;
        if (d < best_d) best_d = d, best = i;
      }
      cells.at(y, x) = static_cast<std::uint8_t>(best);
    }
  return cells;
}

LabelMap cell_mask(const LabelMap& cells, int index) {
  LabelMap m(cells.height, cells.width);
  for (std::size_t i = 0; i < cells.size(); ++i) m.data[i] = cells.data[i] == index;
  return m;
}

/// Irregular blob centered at (cy, cx) with mean radii (ry, rx).
LabelMap blob_mask(int h, int w, double cy, double cx, double ry, double rx, Rng& rng) {
  std::array<double, 3> amp{}, phase{};
  for (int k = 0; k < 3; ++k) {
    amp[k] = rng.uniform(0.0, 0.18);
    phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  LabelMap m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
      const double theta = std::atan2(dy, dx);
      double r = 1.0;
      for (int k = 0; k < 3; ++k) r += amp[k] * std::sin((k + 2) * theta + phase[k]);
      m.at(y, x) = std::hypot(dy, dx) <= r;
    }
  return m;
}

std::vector<std::string> default_class_names(int c) {
  static const std::array<const char*, 4> names{"road", "vegetation", "sky", "building"};
  std::vector<std::string> out;
  for (int i = 0; i < c; ++i) out.push_back(i < 4 ? names[i] : "class" + std::to_string(i));
  return out;
}

std::string numbered(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%04d", prefix, i);
  return buf;
}

std::uint8_t foreign_content(int family) { return static_cast<std::uint8_t>(family); }

LabelMap to_truth(const LabelMap& content) {
  LabelMap out = content;
  for (auto& v : out.data)
    if (v >= kForeignFamilyBase) v = kForeignContent;
  return out;
}

struct NegativeBuild {
  NegativeSample sample;
  int family;
};

NegativeBuild make_negative(const ToyConfig& config, const std::string& id, std::uint64_t seed) {
  Rng rng(seed);
  const int s = config.negative_size;
  Canvas canvas(s, s);
  const int regions = rng.uniform_int(3, 6);
  const LabelMap cells = voronoi(s, s, regions, rng);
  for (int r = 0; r < regions; ++r) {
    const int family = rng.bernoulli(config.negative_inlier_share)
                           ? rng.uniform_int(0, config.num_classes - 1)
                           : kForeignFamilyBase + rng.uniform_int(0, kNumForeignFamilies - 1);
    canvas.paint(cell_mask(cells, r), foreign_content(family), Texture(family, config.num_classes, s, s, rng));
  }

  const int bw = rng.uniform_int(static_cast<int>(0.4 * s), static_cast<int>(0.9 * s));
  const int bh = rng.uniform_int(static_cast<int>(0.4 * s), static_cast<int>(0.9 * s));
  BBox box;
  box.xmin = rng.uniform_int(0, s - bw);
  box.ymin = rng.uniform_int(0, s - bh);
  box.xmax = box.xmin + bw;
  box.ymax = box.ymin + bh;
  // the annotated object is always foreign; inlier textures only leak in
  // through the background left inside the box
  const int family = kForeignFamilyBase + rng.uniform_int(0, kNumForeignFamilies - 1);
  const double fill = rng.uniform(0.85, 1.0);
  LabelMap blob = blob_mask(s, s, box.ymin + bh / 2.0, box.xmin + bw / 2.0, fill * bh / 2.0, fill * bw / 2.0, rng);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      if (x < box.xmin || x >= box.xmax || y < box.ymin || y >= box.ymax) blob.at(y, x) = 0;
  canvas.paint(blob, foreign_content(family), Texture(family, config.num_classes, s, s, rng));

  NegativeBuild out;
  out.sample.id = id;
  out.sample.image = canvas.finish(config.pixel_noise, rng);
  out.sample.bbox = box;
  out.sample.content = to_truth(canvas.content);
  out.family = family;
  return out;
}

}  // namespace

void ToyConfig::validate() const {
  if (num_classes < 2) throw std::invalid_argument("toy config: class count C must be >= 2");
  if (num_classes > 100) throw std::invalid_argument("toy config: at most 100 inlier classes");
  if (image_size < 32 || negative_size < 32) throw std::invalid_argument("toy config: images must be >= 32 px");
  if (num_inliers < 1 || num_negatives < 1 || num_val_inliers < 1 || num_val_objects < 1 || num_val_negatives < 1) {
    throw std::invalid_argument("toy config: dataset sizes must be positive");
  }
  if (assays < 1) throw std::invalid_argument("toy config: assays must be >= 1");
  if (!(min_area_share > 0 && min_area_share < 1)) throw std::invalid_argument("toy config: min_area_share in (0, 1)");
  if (!(object_area_min > 0 && object_area_min <= object_area_max && object_area_max < 0.5)) {
    throw std::invalid_argument("toy config: object area range must satisfy 0 < min <= max < 0.5");
  }
  if (negative_inlier_share < 0 || negative_inlier_share > 1) throw std::invalid_argument("toy config: share in [0, 1]");
  if (pixel_noise < 0) throw std::invalid_argument("toy config: pixel_noise must be >= 0");
}

void to_json(nlohmann::json& j, const ToyConfig& c) {
  j = nlohmann::json{{"num_classes", c.num_classes},
                     {"image_size", c.image_size},
                     {"num_inliers", c.num_inliers},
                     {"num_negatives", c.num_negatives},
                     {"negative_size", c.negative_size},
                     {"num_val_inliers", c.num_val_inliers},
                     {"num_val_objects", c.num_val_objects},
                     {"num_val_negatives", c.num_val_negatives},
                     {"assays", c.assays},
                     {"min_area_share", c.min_area_share},
                     {"object_area_min", c.object_area_min},
                     {"object_area_max", c.object_area_max},
                     {"negative_inlier_share", c.negative_inlier_share},
                     {"pixel_noise", c.pixel_noise}};
}

void from_json(const nlohmann::json& j, ToyConfig& c) {
  ToyConfig d;
  c.num_classes = j.value("num_classes", d.num_classes);
  c.image_size = j.value("image_size", d.image_size);
  c.num_inliers = j.value("num_inliers", d.num_inliers);
  c.num_negatives = j.value("num_negatives", d.num_negatives);
  c.negative_size = j.value("negative_size", d.negative_size);
  c.num_val_inliers = j.value("num_val_inliers", d.num_val_inliers);
  c.num_val_objects = j.value("num_val_objects", d.num_val_objects);
  c.num_val_negatives = j.value("num_val_negatives", d.num_val_negatives);
  c.assays = j.value("assays", d.assays);
  c.min_area_share = j.value("min_area_share", d.min_area_share);
  c.object_area_min = j.value("object_area_min", d.object_area_min);
  c.object_area_max = j.value("object_area_max", d.object_area_max);
  c.negative_inlier_share = j.value("negative_inlier_share", d.negative_inlier_share);
  c.pixel_noise = j.value("pixel_noise", d.pixel_noise);
}

LabeledSample make_toy_scene(const ToyConfig& config, const std::string& id, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const int s = config.image_size;
  const int C = config.num_classes;
  Canvas canvas(s, s);
  const int regions = C + rng.uniform_int(1, 4);
  const LabelMap cells = voronoi(s, s, regions, rng);

  std::vector<int> classes(regions);
  for (int r = 0; r < regions; ++r) classes[r] = r < C ? r : rng.uniform_int(0, C - 1);
  for (int r = regions - 1; r > 0; --r) std::swap(classes[r], classes[rng.uniform_int(0, r)]);
  for (int r = 0; r < regions; ++r) {
    canvas.paint(cell_mask(cells, r), static_cast<std::uint8_t>(classes[r]), Texture(classes[r], C, s, s, rng));
  }

  // small inlier things (poles, signs) so that small blobs are not always foreign
  const int things = rng.uniform_int(0, 3);
  for (int t = 0; t < things; ++t) {
    const int cls = rng.uniform_int(0, C - 1);
    const double area = rng.uniform(0.002, 0.02) * s * s;
    const double aspect = rng.uniform(0.4, 2.5);
    const double ry = std::sqrt(area * aspect / std::numbers::pi), rx = area / (std::numbers::pi * ry);
    const LabelMap blob = blob_mask(s, s, rng.uniform(0.0, s), rng.uniform(0.0, s), ry, rx, rng);
    canvas.paint(blob, static_cast<std::uint8_t>(cls), Texture(cls, C, s, s, rng));
  }

  LabeledSample out;
  out.id = id;
  out.image = canvas.finish(config.pixel_noise, rng);
  out.seg = canvas.content;
  out.outlier = LabelMap(s, s, 0);
  out.content = canvas.content;
  return out;
}

ForeignObject make_toy_object(const ToyConfig& config, double area, std::uint64_t seed) {
  if (!(area >= 1.0)) throw std::invalid_argument("make_toy_object: area must be >= 1 px");
  Rng rng(seed);
  const double aspect = rng.uniform(0.6, 1.6);
  const double ry = std::sqrt(area * aspect / std::numbers::pi), rx = area / (std::numbers::pi * ry);
  const int h = std::max(1, static_cast<int>(std::ceil(2.6 * ry)));
  const int w = std::max(1, static_cast<int>(std::ceil(2.6 * rx)));
  const int family = kForeignFamilyBase + rng.uniform_int(0, kNumForeignFamilies - 1);
  LabelMap mask = blob_mask(h, w, h / 2.0, w / 2.0, ry, rx, rng);
  if (mask.count(1) == 0) mask.at(h / 2, w / 2) = 1;
  Canvas canvas(h, w);
  canvas.paint(LabelMap(h, w, 1), foreign_content(family), Texture(family, config.num_classes, h, w, rng));
  return {canvas.finish(config.pixel_noise, rng), mask};
}

Tensor make_toy_foreign_image(const ToyConfig& config, int height, int width, std::uint64_t seed) {
  Rng rng(seed);
  Canvas canvas(height, width);
  const int regions = rng.uniform_int(3, 7);
  const LabelMap cells = voronoi(height, width, regions, rng);
  for (int r = 0; r < regions; ++r) {
    const int family = kForeignFamilyBase + rng.uniform_int(0, kNumForeignFamilies - 1);
    canvas.paint(cell_mask(cells, r), foreign_content(family), Texture(family, config.num_classes, height, width, rng));
  }
  return canvas.finish(config.pixel_noise, rng);
}

ToyWorld make_toy_world(const ToyConfig& config, std::uint64_t seed) {
  config.validate();
  const Rng root(seed);
  ToyWorld world;
  world.config = config;
  world.class_names = default_class_names(config.num_classes);

  const Rng train_rng = root.split(1), val_rng = root.split(2), neg_rng = root.split(3);
  const Rng obj_rng = root.split(4), whole_rng = root.split(5);
  for (int i = 0; i < config.num_inliers; ++i) {
    world.train.push_back(make_toy_scene(config, numbered("train_", i), train_rng.split(i).seed()));
  }
  for (int i = 0; i < config.num_val_inliers; ++i) {
    world.val.push_back(make_toy_scene(config, numbered("val_", i), val_rng.split(i).seed()));
  }
  for (int i = 0; i < config.num_negatives; ++i) {
    NegativeBuild nb = make_negative(config, numbered("neg_", i), neg_rng.split(i).seed());
    world.negatives.push_back(std::move(nb.sample));
    world.negative_families.push_back(nb.family);
  }
  const double px = static_cast<double>(config.image_size) * config.image_size;
  for (int i = 0; i < config.num_val_objects; ++i) {
    Rng r = obj_rng.split(i);
    const double share = r.uniform(config.object_area_min, config.object_area_max);
    world.val_objects.push_back(make_toy_object(config, share * px, r.split(1).seed()));
  }
  for (int i = 0; i < config.num_val_negatives; ++i) {
    world.val_negative_images.push_back(
        make_toy_foreign_image(config, config.image_size, config.image_size, whole_rng.split(i).seed()));
  }
  world.val_pasted = synthesize_pasted_val(world.val, world.val_objects, config.min_area_share, root.split(6).seed(),
                                           config.assays);
  world.val_whole = synthesize_whole_negative_val(world.val, world.val_negative_images, root.split(7).seed());
  return world;
}

ToyManifests write_toy_world(const ToyWorld& world, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  auto manifest = [&](const std::string& split) {
    DatasetManifest m;
    m.root = out_dir;
    m.split = split;
    m.num_classes = world.config.num_classes;
    m.class_names = world.class_names;
    return m;
  };
  auto write = [&](const std::string& split, auto&& save) {
    DatasetManifest m = manifest(split);
    save(m);
    DatasetManifest on_disk = m;
    on_disk.root = ".";
    const fs::path path = out_dir / (split + ".json");
    write_manifest(path, on_disk);
    return path;
  };
  ToyManifests out;
  out.inliers = write("train", [&](const DatasetManifest& m) { save_labeled_dataset(m, world.train); });
  out.val = write("val", [&](const DatasetManifest& m) { save_labeled_dataset(m, world.val); });
  out.negatives = write("negatives", [&](const DatasetManifest& m) { save_negative_dataset(m, world.negatives); });
  out.val_pasted = write("val_pasted", [&](const DatasetManifest& m) { save_labeled_dataset(m, world.val_pasted); });
  out.val_whole = write("val_whole", [&](const DatasetManifest& m) { save_labeled_dataset(m, world.val_whole); });

  nlohmann::json families = world.negative_families;
  std::ofstream(out_dir / "negative_families.json") << families.dump() << "\n";
  std::ofstream(out_dir / "toy_config.json") << nlohmann::json(world.config).dump(2) << "\n";
  return out;
}

ToyManifests generate_toy_world(const ToyConfig& config, std::uint64_t seed, const fs::path& out_dir) {
  return write_toy_world(make_toy_world(config, seed), out_dir);
}

}  // namespace dosr
