#pragma once

// Optimization loop, checkpoints and evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dosr/augmentation.hpp"
#include "dosr/losses.hpp"
#include "dosr/metrics.hpp"
#include "dosr/model.hpp"
#include "dosr/scoring.hpp"

namespace dosr {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct RunConfig {
  HeadConfig head;
  ExtractorConfig extractor;
  LossWeights weights;
  BatchSpec batch;
  PasteConfig paste;
  NegativeMode negatives = NegativeMode::kPaste;
  AdamConfig adam;
  /// Learning rate of fresh parameters; encoder parameters use lr / divisor.
  double learning_rate = 4e-4;
  double pretrained_divisor = 4.0;
  int epochs = 1;
  std::uint64_t seed = 0;
  /// Steps between validation checkpoints; 0 validates only at the end.
  int validate_every = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig read_run_config(const std::filesystem::path& path);

class Adam {
 public:
  Adam() = default;
  Adam(const AdamConfig& config, double lr, double pretrained_divisor);

  /// Applies one update to every parameter with a nonzero gradient. Moments
  /// are keyed by parameter order, which must not change between calls.
  void step(const std::vector<Param*>& params);
  std::int64_t steps() const { return t_; }

  void save(std::ostream& out) const;
  void load(std::istream& in, const std::vector<Param*>& params);

 private:
  AdamConfig config_;
  double lr_ = 0.0;
  double divisor_ = 1.0;
  std::int64_t t_ = 0;
  std::vector<Tensor> m_, v_;
  std::vector<std::int64_t> updates_;  // per-parameter update count for bias correction
};

struct StepLog {
  std::int64_t step = 0;
  int epoch = 0;
  double total = 0.0;
  LossParts parts;
};

nlohmann::json to_json(const StepLog& s);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Trainer {
 public:
  explicit Trainer(const RunConfig& config);

  /// Restores model, optimizer state and step counter.
  static Trainer resume(const std::filesystem::path& checkpoint);

  const RunConfig& config() const { return config_; }
  const Model& model() const { return model_; }
  Model& model() { return model_; }
  std::int64_t step() const { return step_; }

  int steps_per_epoch(std::size_t num_inliers) const;
  std::int64_t total_steps(std::size_t num_inliers) const;

  /// Assembles the batch of the current step. Deterministic in (seed, step).
  std::vector<LabeledSample> next_batch(const std::vector<LabeledSample>& inliers,
                                        const std::vector<NegativeSample>& negatives) const;

  /// One optimization step. When `dump_dir` is set, a non-finite loss
  /// writes the offending batch there before throwing TrainingError.
  StepLog train_step(const std::vector<LabeledSample>& inliers, const std::vector<NegativeSample>& negatives,
                     const std::optional<std::filesystem::path>& dump_dir = std::nullopt);

  /// Runs until config().epochs are complete. Writes train_log.jsonl,
  /// checkpoints at each validation point and final.ckpt under out_dir.
  void train(const std::vector<LabeledSample>& inliers, const std::vector<NegativeSample>& negatives,
             const std::filesystem::path& out_dir,
             const std::function<nlohmann::json(const Model&)>& validate = nullptr);

  /// Binary blob at `path` plus a JSON sidecar at path + ".json".
  void save(const std::filesystem::path& path) const;

 private:
  Trainer() = default;
  RunConfig config_;
  Model model_;
  Adam adam_;
  std::int64_t step_ = 0;
};

/// Loads only the model of a checkpoint.
Model load_model(const std::filesystem::path& checkpoint);
RunConfig load_checkpoint_config(const std::filesystem::path& checkpoint);

struct EvalOptions {
  std::vector<Criterion> criteria{Criterion::kOp};
  int stride = 1;
  /// Group samples by the assay encoded in their ids and report mean ± std.
  bool assays = false;
  bool size_strata = false;
  std::vector<double> size_edges = log_bins();
  /// Average AP over images instead of pooling pixels globally.
  bool per_image_mean = false;
  int mc_passes = 50;
  std::uint64_t seed = 0;
  std::string dataset;
};

struct CriterionResult {
  Criterion criterion;
  std::optional<MetricsReport> report;
  std::string error;  // set when the head cannot provide this criterion
  std::vector<PrPoint> pr_curve;
};

/// Scores every sample under each criterion and aggregates metrics.
std::vector<CriterionResult> evaluate(const Model& model, const std::vector<LabeledSample>& samples,
                                      const EvalOptions& options);

/// Whether `model` can produce `criterion`.
bool supports(const Model& model, Criterion criterion);

}  // namespace dosr
