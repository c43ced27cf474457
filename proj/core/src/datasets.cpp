#include "dosr/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <spdlog/spdlog.h>

#include "dosr/rng.hpp"

namespace fs = std::filesystem;

namespace dosr {
namespace {

std::vector<fs::path> list_pngs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) throw DatasetError("missing directory " + dir.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::optional<int> parse_int(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

std::string trim(std::string s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
  return s.substr(i);
}

}  // namespace

void DatasetManifest::validate() const {
  if (num_classes < 2) throw std::invalid_argument("manifest: class count C must be >= 2");
  if (!class_names.empty() && static_cast<int>(class_names.size()) != num_classes) {
    throw std::invalid_argument("manifest: class_names length does not match num_classes");
  }
  for (double s : normalization.std)
    if (!(s > 0)) throw std::invalid_argument("manifest: normalization std must be positive");
}

void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = nlohmann::json{{"root", m.root.string()},
                     {"split", m.split},
                     {"num_classes", m.num_classes},
                     {"class_names", m.class_names},
                     {"mean", m.normalization.mean},
                     {"std", m.normalization.std}};
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m.root = j.at("root").get<std::string>();
  m.split = j.at("split").get<std::string>();
  m.num_classes = j.at("num_classes").get<int>();
  m.class_names = j.value("class_names", std::vector<std::string>{});
  Normalization d;
  const auto mean = j.value("mean", std::vector<double>(d.mean.begin(), d.mean.end()));
  const auto std = j.value("std", std::vector<double>(d.std.begin(), d.std.end()));
  if (mean.size() != 3 || std.size() != 3) throw std::invalid_argument("manifest: mean/std must have 3 entries");
  std::copy(mean.begin(), mean.end(), m.normalization.mean.begin());
  std::copy(std.begin(), std.end(), m.normalization.std.begin());
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open manifest " + path.string());
  DatasetManifest m = nlohmann::json::parse(in).get<DatasetManifest>();
  if (const char* override_root = std::getenv("DOSR_DATA_ROOT"); override_root && *override_root) {
    m.root = override_root;
  } else if (m.root.is_relative()) {
    m.root = path.parent_path() / m.root;
  }
  m.validate();
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& manifest) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << nlohmann::json(manifest).dump(2) << "\n";
  if (!out) throw DatasetError("cannot write manifest " + path.string());
}

void validate_sample(const LabeledSample& s, int num_classes) {
  const int h = s.image.h(), w = s.image.w();
  if (s.image.n() != 1 || s.image.c() != 3) throw DatasetError(s.id + ": image must be 1x3xHxW");
  if (s.seg.height != h || s.seg.width != w || s.outlier.height != h || s.outlier.width != w) {
    throw DatasetError(s.id + ": label maps do not match image size");
  }
  for (std::size_t i = 0; i < s.seg.size(); ++i) {
    const std::uint8_t y = s.seg.data[i];
    const std::uint8_t o = s.outlier.data[i];
    if (y != kIgnore && y >= num_classes) {
      throw DatasetError(s.id + ": segmentation label " + std::to_string(y) + " outside {0.." +
                         std::to_string(num_classes - 1) + ", 255}");
    }
    if (o != 0 && o != 1 && o != kIgnore) throw DatasetError(s.id + ": outlier label " + std::to_string(o));
    if (o == 1 && y != kIgnore) throw DatasetError(s.id + ": outlier pixel carries a class label");
  }
}

std::vector<LabeledSample> load_inlier_dataset(const DatasetManifest& manifest) {
  manifest.validate();
  const fs::path dir = manifest.split_dir();
  std::vector<LabeledSample> out;
  for (const fs::path& image_path : list_pngs(dir / "images")) {
    const std::string id = image_path.stem().string();
    const fs::path seg_path = dir / "seg" / (id + ".png");
    const fs::path ood_path = dir / "ood" / (id + ".png");
    if (!fs::exists(seg_path)) throw DatasetError("missing label file " + seg_path.string());
    if (!fs::exists(ood_path)) throw DatasetError("missing label file " + ood_path.string());
    LabeledSample s;
    s.id = id;
    s.image = read_rgb_png(image_path, manifest.normalization);
    s.seg = read_label_png(seg_path);
    s.outlier = read_label_png(ood_path);
    if (const fs::path content = dir / "content" / (id + ".png"); fs::exists(content)) {
      s.content = read_label_png(content);
    }
    validate_sample(s, manifest.num_classes);
    out.push_back(std::move(s));
  }
  return out;
}

void save_labeled_dataset(const DatasetManifest& manifest, const std::vector<LabeledSample>& samples) {
  const fs::path dir = manifest.split_dir();
  for (const LabeledSample& s : samples) {
    validate_sample(s, manifest.num_classes);
    write_rgb_png(dir / "images" / (s.id + ".png"), s.image, manifest.normalization);
    write_label_png(dir / "seg" / (s.id + ".png"), s.seg);
    write_label_png(dir / "ood" / (s.id + ".png"), s.outlier);
    if (s.content) write_label_png(dir / "content" / (s.id + ".png"), *s.content);
  }
}

NegativeDataset load_negative_dataset(const DatasetManifest& manifest) {
  const fs::path dir = manifest.split_dir();
  const fs::path csv = dir / "bboxes.csv";
  if (!fs::exists(csv)) throw DatasetError("missing bbox sidecar " + csv.string());
  const std::vector<fs::path> images = list_pngs(dir / "images");

  NegativeDataset out;
  std::map<std::string, std::vector<BBox>> rows;
  std::ifstream in(csv);
  std::string line;
  bool first_line = true;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    const auto fields = split_csv(line);
    if (first_line) {
      first_line = false;
      if (!fields.empty() && trim(fields[0]) == "file") continue;
    }
    if (fields.size() != 5) {
      ++out.malformed_rows;
      continue;
    }
    auto xmin = parse_int(fields[1]), ymin = parse_int(fields[2]);
    auto xmax = parse_int(fields[3]), ymax = parse_int(fields[4]);
    if (!xmin || !ymin || !xmax || !ymax) {
      ++out.malformed_rows;
      continue;
    }
    rows[fs::path(trim(fields[0])).stem().string()].push_back({*xmin, *ymin, *xmax, *ymax});
  }

  for (const fs::path& image_path : images) {
    const std::string id = image_path.stem().string();
    auto it = rows.find(id);
    if (it == rows.end()) {
      ++out.skipped;
      continue;
    }
    Tensor image = read_rgb_png(image_path, manifest.normalization);
    std::optional<BBox> chosen;
    for (const BBox& b : it->second) {
      if (!b.valid_for(image.w(), image.h())) {
        ++out.malformed_rows;
        continue;
      }
      if (!chosen) chosen = b;  // first valid row wins; later rows are ignored
    }
    rows.erase(it);
    if (!chosen) {
      ++out.skipped;
      continue;
    }
    NegativeSample s;
    s.id = id;
    s.image = std::move(image);
    s.bbox = *chosen;
    if (const fs::path content = dir / "content" / (id + ".png"); fs::exists(content)) {
      s.content = read_label_png(content);
    }
    out.samples.push_back(std::move(s));
  }
  for (const auto& [id, boxes] : rows) out.malformed_rows += boxes.size();  // rows naming absent images
  if (out.malformed_rows > 0) {
    spdlog::warn("{}: {} malformed bbox rows skipped", csv.string(), out.malformed_rows);
  }
  return out;
}

void save_negative_dataset(const DatasetManifest& manifest, const std::vector<NegativeSample>& samples) {
  const fs::path dir = manifest.split_dir();
  fs::create_directories(dir / "images");
  std::ofstream csv(dir / "bboxes.csv");
  csv << "file,xmin,ymin,xmax,ymax\n";
  for (const NegativeSample& s : samples) {
    if (!s.bbox.valid_for(s.image.w(), s.image.h())) throw DatasetError(s.id + ": invalid bbox");
    write_rgb_png(dir / "images" / (s.id + ".png"), s.image, manifest.normalization);
    if (s.content) write_label_png(dir / "content" / (s.id + ".png"), *s.content);
    csv << s.id << ".png," << s.bbox.xmin << "," << s.bbox.ymin << "," << s.bbox.xmax << "," << s.bbox.ymax << "\n";
  }
  if (!csv) throw DatasetError("cannot write " + (dir / "bboxes.csv").string());
}

std::vector<LabeledSample> synthesize_pasted_val(const std::vector<LabeledSample>& inliers,
                                                 const std::vector<ForeignObject>& objects, double min_area_share,
                                                 std::uint64_t seed, int assays) {
  if (!(min_area_share > 0.0 && min_area_share < 1.0)) {
    throw std::invalid_argument("synthesize_pasted_val: min_area_share must be in (0, 1)");
  }
  if (objects.empty()) throw std::invalid_argument("synthesize_pasted_val: no foreign objects");
  if (assays < 1) throw std::invalid_argument("synthesize_pasted_val: assays must be >= 1");
  for (const ForeignObject& o : objects) {
    if (o.mask.height != o.image.h() || o.mask.width != o.image.w()) {
      throw std::invalid_argument("synthesize_pasted_val: object mask does not match its image");
    }
    if (o.mask.count(1) == 0) throw std::invalid_argument("synthesize_pasted_val: empty object mask");
  }

  const Rng root(seed);
  std::vector<LabeledSample> out;
  out.reserve(inliers.size() * static_cast<std::size_t>(assays));
  for (int a = 0; a < assays; ++a) {
    Rng rng = root.split(static_cast<std::uint64_t>(a));
    for (const LabeledSample& inlier : inliers) {
      const ForeignObject& obj = objects[rng.uniform_int(0, static_cast<int>(objects.size()) - 1)];
      const int H = inlier.height(), W = inlier.width();
      const auto min_px = static_cast<std::size_t>(std::ceil(min_area_share * H * W));

      int oh = obj.image.h(), ow = obj.image.w();
      LabelMap mask = obj.mask;
      if (mask.count(1) < min_px) {
        double scale = std::sqrt(static_cast<double>(min_px) / static_cast<double>(mask.count(1)));
        for (;;) {
          oh = std::max(1, static_cast<int>(std::ceil(obj.image.h() * scale)));
          ow = std::max(1, static_cast<int>(std::ceil(obj.image.w() * scale)));
          mask = resize_labels(obj.mask, oh, ow);
          if (mask.count(1) >= min_px || oh >= H || ow >= W) break;
          scale *= 1.02;
        }
      }
      if (oh > H || ow > W) {
        const double fit = std::min(static_cast<double>(H) / oh, static_cast<double>(W) / ow);
        oh = std::max(1, std::min(H, static_cast<int>(std::floor(oh * fit))));
        ow = std::max(1, std::min(W, static_cast<int>(std::floor(ow * fit))));
        mask = resize_labels(obj.mask, oh, ow);
      }
      const Tensor patch = resize_image(obj.image, oh, ow, Interp::kArea);
      const int y0 = rng.uniform_int(0, H - oh);
      const int x0 = rng.uniform_int(0, W - ow);

      LabeledSample s = inlier;
      s.id = "a" + std::string(a < 10 ? "0" : "") + std::to_string(a) + "_" + inlier.id;
      for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
          if (mask.at(y, x) != 1) continue;
          for (int c = 0; c < 3; ++c) s.image.at(0, c, y0 + y, x0 + x) = patch.at(0, c, y, x);
          s.seg.at(y0 + y, x0 + x) = kIgnore;
          s.outlier.at(y0 + y, x0 + x) = 1;
          if (s.content) s.content->at(y0 + y, x0 + x) = kForeignContent;
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<LabeledSample> synthesize_whole_negative_val(const std::vector<LabeledSample>& inliers,
                                                         const std::vector<Tensor>& negative_images,
                                                         std::uint64_t seed) {
  if (negative_images.empty()) throw std::invalid_argument("synthesize_whole_negative_val: no negative images");
  if (inliers.empty()) throw std::invalid_argument("synthesize_whole_negative_val: no inliers");
  Rng rng(seed);
  std::vector<int> order(negative_images.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);

  std::vector<LabeledSample> out = inliers;
  const int H = inliers.front().height(), W = inliers.front().width();
  for (std::size_t k = 0; k < inliers.size(); ++k) {
    const int idx = k < order.size() ? order[k] : rng.uniform_int(0, static_cast<int>(order.size()) - 1);
    LabeledSample s;
    std::ostringstream id;
    id << "neg_" << k;
    s.id = id.str();
    s.image = resize_image(negative_images[idx], H, W, Interp::kArea);
    s.seg = LabelMap(H, W, kIgnore);
    s.outlier = LabelMap(H, W, 1);
    s.content = LabelMap(H, W, kForeignContent);
    out.push_back(std::move(s));
  }
  return out;
}

int assay_of(const std::string& id) {
  if (id.size() < 3 || id[0] != 'a') return -1;
  const auto underscore = id.find('_');
  if (underscore == std::string::npos || underscore < 2) return -1;
  auto v = parse_int(std::string_view(id).substr(1, underscore - 1));
  return v ? *v : -1;
}

}  // namespace dosr
