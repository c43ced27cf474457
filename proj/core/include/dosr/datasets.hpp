#pragma once

// Inlier / negative / evaluation datasets.
//
// On-disk layout of a labeled split:
//   <root>/<split>/images/<id>.png   RGB
//   <root>/<split>/seg/<id>.png      8-bit class index, 255 = ignore
//   <root>/<split>/ood/<id>.png      0 inlier, 1 outlier, 255 = ignore
// Negative datasets:
//   <root>/<split>/images/<id>.png
//   <root>/<split>/bboxes.csv        file,xmin,ymin,xmax,ymax (first row per file wins)
// Manifests are JSON files describing one split.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dosr/image.hpp"
#include "dosr/tensor.hpp"

namespace dosr {

struct LabeledSample {
  std::string id;
  Tensor image;            // 1 x 3 x H x W, normalized
  LabelMap seg;            // {0..C-1, IGNORE}
  LabelMap outlier;        // {0, 1, IGNORE}
  /// Generating content per pixel, known only for synthetic data: an inlier
  /// class index, or kForeignContent. Travels with the sample through
  /// augmentation so label-noise statistics can be checked.
  std::optional<LabelMap> content;

  int height() const { return image.h(); }
  int width() const { return image.w(); }
};

inline constexpr std::uint8_t kForeignContent = 254;

struct BBox {
  int xmin = 0, ymin = 0, xmax = 0, ymax = 0;  // half-open: [xmin, xmax) x [ymin, ymax)
  int width() const { return xmax - xmin; }
  int height() const { return ymax - ymin; }
  bool valid_for(int image_w, int image_h) const {
    return 0 <= xmin && xmin < xmax && xmax <= image_w && 0 <= ymin && ymin < ymax && ymax <= image_h;
  }
};

struct NegativeSample {
  std::string id;
  Tensor image;  // 1 x 3 x h x w
  BBox bbox;
  std::optional<LabelMap> content;
};

/// A foreign object with an irregular alpha silhouette, for pasted validation.
struct ForeignObject {
  Tensor image;    // 1 x 3 x h x w
  LabelMap mask;   // 1 where the object is, 0 elsewhere
};

struct DatasetManifest {
  std::filesystem::path root;
  std::string split;
  int num_classes = 0;
  std::vector<std::string> class_names;
  Normalization normalization;

  std::filesystem::path split_dir() const { return root / split; }
  void validate() const;
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Thrown for malformed datasets (missing files, invalid labels).
class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checks the LabeledSample invariants against class count `num_classes`.
void validate_sample(const LabeledSample& sample, int num_classes);

/// Loads every sample of a labeled split, sorted by id.
std::vector<LabeledSample> load_inlier_dataset(const DatasetManifest& manifest);
/// Writes samples using the labeled layout.
void save_labeled_dataset(const DatasetManifest& manifest, const std::vector<LabeledSample>& samples);

struct NegativeDataset {
  std::vector<NegativeSample> samples;
  /// Images with no usable bbox row.
  std::size_t skipped = 0;
  /// Rows that could not be parsed or violate the bbox invariants.
  std::size_t malformed_rows = 0;
};

NegativeDataset load_negative_dataset(const DatasetManifest& manifest);
void save_negative_dataset(const DatasetManifest& manifest, const std::vector<NegativeSample>& samples);

/// Pastes one foreign object into each inlier per assay. Objects smaller than
/// `min_area_share` of the image are upscaled until they reach it; objects
/// larger than the image are downscaled to fit. Placement is uniform over
/// positions that keep the object inside. Output is assay-major with ids
/// "a<assay>_<inlier id>".
std::vector<LabeledSample> synthesize_pasted_val(const std::vector<LabeledSample>& inliers,
                                                 const std::vector<ForeignObject>& objects, double min_area_share,
                                                 std::uint64_t seed, int assays = 1);

/// Inliers followed by as many whole negative images (all pixels outlier),
/// resized to the first inlier's resolution.
std::vector<LabeledSample> synthesize_whole_negative_val(const std::vector<LabeledSample>& inliers,
                                                         const std::vector<Tensor>& negative_images,
                                                         std::uint64_t seed);

/// Assay index encoded in an id produced by synthesize_pasted_val, or -1.
int assay_of(const std::string& id);

// ----------------------------------------------------------------------------
// Procedural toy world.

struct ToyConfig {
  int num_classes = 4;
  int image_size = 128;
  int num_inliers = 64;
  int num_negatives = 256;
  int negative_size = 96;
  int num_val_inliers = 10;
  int num_val_objects = 10;
  int num_val_negatives = 40;
  int assays = 50;
  double min_area_share = 0.01;
  /// Native area share range of validation objects before the minimum rule.
  double object_area_min = 0.01;
  double object_area_max = 0.08;
  /// Probability that a negative background region shows an inlier texture.
  double negative_inlier_share = 0.5;
  double pixel_noise = 0.04;

  void validate() const;
};

void to_json(nlohmann::json& j, const ToyConfig& c);
void from_json(const nlohmann::json& j, ToyConfig& c);

/// Texture family ids: inlier classes use [0, C); foreign families use
/// kForeignFamilyBase and up.
inline constexpr int kForeignFamilyBase = 100;
inline constexpr int kNumForeignFamilies = 8;

struct ToyWorld {
  ToyConfig config;
  std::vector<std::string> class_names;
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> val;           // plain inlier validation scenes
  std::vector<NegativeSample> negatives;
  std::vector<ForeignObject> val_objects;
  std::vector<Tensor> val_negative_images;  // whole-image outliers
  std::vector<LabeledSample> val_pasted;
  std::vector<LabeledSample> val_whole;
  /// Texture family used for each negative's bbox content.
  std::vector<int> negative_families;
};

/// Builds the toy world in memory. Deterministic in (config, seed).
ToyWorld make_toy_world(const ToyConfig& config, std::uint64_t seed);

/// Procedural scene of inlier textures with dense labels.
LabeledSample make_toy_scene(const ToyConfig& config, const std::string& id, std::uint64_t seed);
/// Foreign-family object with a blob silhouette covering about `area` pixels.
ForeignObject make_toy_object(const ToyConfig& config, double area, std::uint64_t seed);
/// Whole foreign-texture image (whole-image outlier).
Tensor make_toy_foreign_image(const ToyConfig& config, int height, int width, std::uint64_t seed);

struct ToyManifests {
  std::filesystem::path inliers;
  std::filesystem::path val;
  std::filesystem::path negatives;
  std::filesystem::path val_pasted;
  std::filesystem::path val_whole;
};

/// Writes all splits of `world` under `out_dir` and returns manifest paths.
ToyManifests write_toy_world(const ToyWorld& world, const std::filesystem::path& out_dir);

/// make_toy_world + write_toy_world.
ToyManifests generate_toy_world(const ToyConfig& config, std::uint64_t seed, const std::filesystem::path& out_dir);

}  // namespace dosr
