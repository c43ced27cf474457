#include "dosr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include <spdlog/spdlog.h>

namespace fs = std::filesystem;

namespace dosr {
namespace {

constexpr char kCheckpointMagic[8] = {'D', 'O', 'S', 'R', 'C', 'K', 'P', '1'};
constexpr int kCheckpointVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw std::runtime_error("checkpoint truncated");
  return v;
}

void put_tensor(std::ostream& out, const Tensor& t) {
  put<std::int32_t>(out, t.n());
  put<std::int32_t>(out, t.c());
  put<std::int32_t>(out, t.h());
  put<std::int32_t>(out, t.w());
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor get_tensor(std::istream& in) {
  const int n = get<std::int32_t>(in), c = get<std::int32_t>(in), h = get<std::int32_t>(in), w = get<std::int32_t>(in);
  if (n < 0 || c < 0 || h < 0 || w < 0) throw std::runtime_error("checkpoint: bad tensor shape");
  Tensor t(n, c, h, w);
  in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  if (!in) throw std::runtime_error("checkpoint truncated");
  return t;
}

bool all_zero(const Tensor& t) {
  return std::all_of(t.data(), t.data() + t.size(), [](double v) { return v == 0.0; });
}

nlohmann::json read_sidecar(const fs::path& checkpoint) {
  const fs::path sidecar = checkpoint.string() + ".json";
  std::ifstream in(sidecar);
  if (!in) throw std::runtime_error("missing checkpoint sidecar " + sidecar.string());
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.value("format_version", 0) != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint format version in " + sidecar.string());
  }
  return j;
}

/// Reads parameter values into `params`; returns the stream positioned at the
/// optimizer section and the stored step.
std::int64_t read_parameters(std::istream& in, const std::vector<Param*>& params, const fs::path& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw std::runtime_error("not a checkpoint: " + path.string());
  if (get<std::uint32_t>(in) != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version");
  const auto step = get<std::int64_t>(in);
  const auto count = get<std::uint32_t>(in);
  if (count != params.size()) throw std::runtime_error("checkpoint parameter count does not match the architecture");
  for (Param* p : params) {
    const auto len = get<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (name != p->name) throw std::runtime_error("checkpoint parameter '" + name + "' where '" + p->name + "' expected");
    Tensor value = get_tensor(in);
    if (!value.same_shape(p->value)) throw std::runtime_error("checkpoint shape mismatch for " + name);
    p->value = std::move(value);
  }
  return step;
}

void dump_batch(const fs::path& dir, const std::vector<LabeledSample>& batch, const StepLog& log) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::string stem = std::to_string(i) + "_" + batch[i].id;
    write_rgb_png(dir / (stem + "_image.png"), batch[i].image, Normalization{});
    write_label_png(dir / (stem + "_seg.png"), batch[i].seg);
    write_label_png(dir / (stem + "_ood.png"), batch[i].outlier);
  }
  std::ofstream(dir / "step.json") << to_json(log).dump(2) << "\n";
}

}  // namespace

void RunConfig::validate() const {
  head.validate();
  extractor.validate();
  batch.validate();
  paste.validate();
  if (!(learning_rate > 0)) throw std::invalid_argument("run: learning rate must be > 0");
  if (!(pretrained_divisor >= 1)) throw std::invalid_argument("run: pretrained LR divisor must be >= 1");
  if (epochs < 1) throw std::invalid_argument("run: epochs must be >= 1");
  if (validate_every < 0) throw std::invalid_argument("run: validate_every must be >= 0");
  if (negatives != NegativeMode::kNone && batch.batch_size < 2) {
    throw std::invalid_argument("run: mixing negatives needs batch size >= 2");
  }
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"head", c.head},
                     {"extractor", c.extractor},
                     {"weights", c.weights},
                     {"batch", c.batch},
                     {"paste", c.paste},
                     {"negatives", to_string(c.negatives)},
                     {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}}},
                     {"learning_rate", c.learning_rate},
                     {"pretrained_divisor", c.pretrained_divisor},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"validate_every", c.validate_every}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  RunConfig d;
  if (j.contains("head")) c.head = j.at("head").get<HeadConfig>();
  if (j.contains("extractor")) c.extractor = j.at("extractor").get<ExtractorConfig>();
  if (j.contains("weights")) c.weights = j.at("weights").get<LossWeights>();
  if (j.contains("batch")) c.batch = j.at("batch").get<BatchSpec>();
  if (j.contains("paste")) c.paste = j.at("paste").get<PasteConfig>();
  c.negatives = negative_mode_from_string(j.value("negatives", std::string(to_string(d.negatives))));
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    c.adam.beta1 = a.value("beta1", d.adam.beta1);
    c.adam.beta2 = a.value("beta2", d.adam.beta2);
    c.adam.epsilon = a.value("epsilon", d.adam.epsilon);
  }
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.pretrained_divisor = j.value("pretrained_divisor", d.pretrained_divisor);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.validate_every = j.value("validate_every", d.validate_every);
}

RunConfig read_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open run config " + path.string());
  RunConfig c = nlohmann::json::parse(in).get<RunConfig>();
  c.validate();
  return c;
}

Adam::Adam(const AdamConfig& config, double lr, double pretrained_divisor)
    : config_(config), lr_(lr), divisor_(pretrained_divisor) {}

void Adam::step(const std::vector<Param*>& params) {
  if (m_.empty()) {
    for (const Param* p : params) {
      m_.emplace_back(p->value.n(), p->value.c(), p->value.h(), p->value.w());
      v_.emplace_back(p->value.n(), p->value.c(), p->value.h(), p->value.w());
    }
    updates_.assign(params.size(), 0);
  }
  if (m_.size() != params.size()) throw std::logic_error("Adam: parameter list changed");
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Param& p = *params[k];
    if (all_zero(p.grad)) continue;
    const std::int64_t t = ++updates_[k];
    const double lr = p.group == ParamGroup::kPretrained ? lr_ / divisor_ : lr_;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    double* w = p.value.data();
    const double* g = p.grad.data();
    double* m = m_[k].data();
    double* v = v_[k].data();
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.epsilon);
    }
  }
}

void Adam::save(std::ostream& out) const {
  put<std::int64_t>(out, t_);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m_.size()));
  for (std::size_t k = 0; k < m_.size(); ++k) {
    put<std::int64_t>(out, updates_[k]);
    put_tensor(out, m_[k]);
    put_tensor(out, v_[k]);
  }
}

void Adam::load(std::istream& in, const std::vector<Param*>& params) {
  t_ = get<std::int64_t>(in);
  const auto count = get<std::uint32_t>(in);
  m_.clear();
  v_.clear();
  updates_.clear();
  if (count == 0) return;
  if (count != params.size()) throw std::runtime_error("checkpoint optimizer state does not match parameters");
  for (std::uint32_t k = 0; k < count; ++k) {
    updates_.push_back(get<std::int64_t>(in));
    m_.push_back(get_tensor(in));
    v_.push_back(get_tensor(in));
    if (!m_.back().same_shape(params[k]->value)) throw std::runtime_error("checkpoint optimizer shape mismatch");
  }
}

nlohmann::json to_json(const StepLog& s) {
  nlohmann::json j{{"step", s.step}, {"epoch", s.epoch}, {"total", s.total}};
  if (s.parts.cls) j["cls"] = *s.parts.cls;
  if (s.parts.od) j["od"] = *s.parts.od;
  if (s.parts.oe) j["oe"] = *s.parts.oe;
  if (s.parts.aux) j["aux"] = *s.parts.aux;
  return j;
}

Trainer::Trainer(const RunConfig& config)
    : config_(config),
      model_((config.validate(), config.extractor), config.head, Rng(config.seed).split(0).seed()),
      adam_(config.adam, config.learning_rate, config.pretrained_divisor) {}

int Trainer::steps_per_epoch(std::size_t num_inliers) const {
  const int per_batch = inliers_per_batch(config_.batch, config_.negatives);
  const int steps = static_cast<int>(num_inliers) / per_batch;
  if (steps < 1) {
    throw std::invalid_argument("trainer: " + std::to_string(num_inliers) + " inliers cannot fill one batch of " +
                                std::to_string(per_batch));
  }
  return steps;
}

std::int64_t Trainer::total_steps(std::size_t num_inliers) const {
  return static_cast<std::int64_t>(steps_per_epoch(num_inliers)) * config_.epochs;
}

std::vector<LabeledSample> Trainer::next_batch(const std::vector<LabeledSample>& inliers,
                                               const std::vector<NegativeSample>& negatives) const {
  const int spe = steps_per_epoch(inliers.size());
  const int epoch = static_cast<int>(step_ / spe);
  const int position = static_cast<int>(step_ % spe);
  const Rng root(config_.seed);

  std::vector<int> order(inliers.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle = root.split(0x10000 + static_cast<std::uint64_t>(epoch));
  for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) std::swap(order[i], order[shuffle.uniform_int(0, i)]);

  const int per_batch = inliers_per_batch(config_.batch, config_.negatives);
  std::vector<const LabeledSample*> chosen;
  for (int i = 0; i < per_batch; ++i) chosen.push_back(&inliers[order[position * per_batch + i]]);
  Rng rng = root.split(0x100000000ULL + static_cast<std::uint64_t>(step_));
  return make_mixed_batch(chosen, negatives, config_.batch, config_.paste, config_.negatives, rng);
}

StepLog Trainer::train_step(const std::vector<LabeledSample>& inliers, const std::vector<NegativeSample>& negatives,
                            const std::optional<fs::path>& dump_dir) {
  const std::vector<LabeledSample> samples = next_batch(inliers, negatives);
  const Batch batch = collate(samples);

  std::vector<Param*> params = model_.parameters();
  for (Param* p : params) p->grad.fill(0.0);

  Rng dropout_rng = Rng(config_.seed).split(0x200000000ULL + static_cast<std::uint64_t>(step_));
  const FeatureBundle features = model_.extractor().forward(batch.images);
  const PredictionMaps maps = model_.head().forward(features, dropout_rng);
  const BatchLoss loss = evaluate_batch_loss(maps, batch.seg, batch.outlier, config_.weights);

  StepLog log;
  log.step = step_;
  log.epoch = static_cast<int>(step_ / steps_per_epoch(inliers.size()));
  log.total = loss.total;
  log.parts = loss.parts;
  if (!std::isfinite(loss.total)) {
    if (dump_dir) dump_batch(*dump_dir, samples, log);
    throw TrainingError("non-finite loss at step " + std::to_string(step_) +
                        (dump_dir ? "; batch written to " + dump_dir->string() : std::string()));
  }

  model_.extractor().backward(model_.head().backward(loss.grad));
  adam_.step(params);
  ++step_;
  return log;
}

void Trainer::train(const std::vector<LabeledSample>& inliers, const std::vector<NegativeSample>& negatives,
                    const fs::path& out_dir, const std::function<nlohmann::json(const Model&)>& validate) {
  if (inliers.empty()) throw std::invalid_argument("trainer: no inliers");
  if (config_.negatives != NegativeMode::kNone && negatives.empty()) {
    throw std::invalid_argument("trainer: negative mode '" + std::string(to_string(config_.negatives)) +
                                "' needs a negative dataset");
  }
  fs::create_directories(out_dir);
  const std::int64_t total = total_steps(inliers.size());
  std::ofstream log(out_dir / "train_log.jsonl", step_ == 0 ? std::ios::trunc : std::ios::app);
  auto checkpoint = [&](const fs::path& path) {
    save(path);
    if (validate) {
      nlohmann::json v = validate(model_);
      v["step"] = step_;
      log << nlohmann::json{{"validation", v}}.dump() << "\n";
    }
  };
  while (step_ < total) {
    const StepLog s = train_step(inliers, negatives, out_dir / "nan_dump");
    log << to_json(s).dump() << "\n";
    if (s.step % 20 == 0) spdlog::info("step {}/{} loss {:.4f}", s.step, total, s.total);
    if (config_.validate_every > 0 && step_ % config_.validate_every == 0 && step_ < total) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06lld.ckpt", static_cast<long long>(step_));
      checkpoint(out_dir / name);
    }
  }
  checkpoint(out_dir / "final.ckpt");
}

void Trainer::save(const fs::path& path) const {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out.write(kCheckpointMagic, 8);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::int64_t>(out, step_);
  const std::vector<const Param*> params = model_.parameters();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  nlohmann::json shapes = nlohmann::json::array();
  for (const Param* p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put_tensor(out, p->value);
    shapes.push_back({{"name", p->name},
                      {"shape", {p->value.n(), p->value.c(), p->value.h(), p->value.w()}},
                      {"group", p->group == ParamGroup::kPretrained ? "pretrained" : "fresh"}});
  }
  adam_.save(out);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());

  const nlohmann::json sidecar{{"format_version", kCheckpointVersion},
                               {"step", step_},
                               {"num_classes", config_.head.num_classes},
                               {"extractor", config_.extractor},
                               {"head", config_.head},
                               {"run", config_},
                               {"parameters", shapes}};
  std::ofstream(path.string() + ".json") << sidecar.dump(2) << "\n";
}

Trainer Trainer::resume(const fs::path& checkpoint) {
  Trainer t(load_checkpoint_config(checkpoint));
  std::ifstream in(checkpoint, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + checkpoint.string());
  std::vector<Param*> params = t.model_.parameters();
  t.step_ = read_parameters(in, params, checkpoint);
  t.adam_.load(in, params);
  return t;
}

RunConfig load_checkpoint_config(const fs::path& checkpoint) {
  return read_sidecar(checkpoint).at("run").get<RunConfig>();
}

Model load_model(const fs::path& checkpoint) {
  const nlohmann::json sidecar = read_sidecar(checkpoint);
  Model model(sidecar.at("extractor").get<ExtractorConfig>(), sidecar.at("head").get<HeadConfig>(), 0);
  std::ifstream in(checkpoint, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + checkpoint.string());
  read_parameters(in, model.parameters(), checkpoint);
  return model;
}

bool supports(const Model& model, Criterion criterion) {
  switch (criterion) {
    case Criterion::kOp:
    case Criterion::kFused: return model.kind() != HeadKind::kOeCway;
    default: return true;
  }
}

std::vector<CriterionResult> evaluate(const Model& model, const std::vector<LabeledSample>& samples,
                                      const EvalOptions& options) {
  if (options.stride < 1) throw std::invalid_argument("evaluate: stride must be >= 1");
  const int C = model.num_classes();
  const std::size_t K = options.criteria.size();

  std::vector<CriterionResult> results(K);
  std::vector<EvalPool> pools(K);
  std::vector<std::map<int, EvalPool>> assay_pools(K);
  std::vector<std::vector<double>> image_ap(K);
  std::vector<std::optional<SizeStratifiedPool>> strata(K);
  for (std::size_t k = 0; k < K; ++k) {
    results[k].criterion = options.criteria[k];
    pools[k].stride = options.stride;
    if (!supports(model, options.criteria[k])) {
      results[k].error = "criterion " + to_string(options.criteria[k]) + " is not available for head " +
                         to_string(model.kind());
      spdlog::warn("{}", results[k].error);
    }
    if (options.size_strata) strata[k].emplace(options.size_edges, true, options.stride);
  }

  ConfusionMatrix confusion(C);
  const Rng mc_root(options.seed);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const LabeledSample& s = samples[i];
    const int H = s.height(), W = s.width();
    const PredictionMaps maps = model.infer(s.image);
    const Tensor posterior = upsample_to_input(class_posterior(maps), H, W);
    confusion.add(argmax_labels(posterior, C), s.seg, s.outlier);

    std::optional<ScoreMap> op, msm;
    for (std::size_t k = 0; k < K; ++k) {
      if (!results[k].error.empty()) continue;
      ScoreMap score;
      switch (options.criteria[k]) {
        case Criterion::kOp:
          if (!op) op = score_op(maps, H, W);
          score = *op;
          break;
        case Criterion::kMsm:
          if (!msm) msm = score_msm(posterior, C);
          score = *msm;
          break;
        case Criterion::kFused:
          if (!op) op = score_op(maps, H, W);
          if (!msm) msm = score_msm(posterior, C);
          score = score_fused(*op, *msm);
          break;
        case Criterion::kEntropy: score = score_entropy(posterior, C); break;
        case Criterion::kMcMi:
        case Criterion::kMcEntropy: {
          Rng rng = mc_root.split(i);
          score = score_mc_dropout(model, s.image, options.mc_passes, rng,
                                   options.criteria[k] == Criterion::kMcEntropy);
          break;
        }
      }
      pools[k].add(score.scores, s.outlier, s.id);
      if (options.assays) {
        auto& pool = assay_pools[k][assay_of(s.id)];
        pool.stride = options.stride;
        pool.add(score.scores, s.outlier, s.id);
      }
      if (options.per_image_mean) {
        EvalPool single;
        single.stride = options.stride;
        single.add(score.scores, s.outlier, s.id);
        const auto positives = single.positives();
        if (positives > 0 && positives < single.size()) image_ap[k].push_back(average_precision(single.scores, single.labels));
      }
      if (strata[k]) strata[k]->add(score.scores, s.outlier);
    }
  }

  const double miou = confusion.miou();
  for (std::size_t k = 0; k < K; ++k) {
    if (!results[k].error.empty()) continue;
    MetricsReport r;
    r.criterion = to_string(options.criteria[k]);
    r.dataset = options.dataset;
    r.stride = options.stride;
    r.pool_size = pools[k].size();
    r.pooled = ranking_metrics(pools[k]);
    r.miou = miou;
    r.class_iou = confusion.iou();
    if (options.assays) {
      std::vector<double> ap, au, fpr;
      for (const auto& [assay, pool] : assay_pools[k]) {
        const RankingMetrics m = ranking_metrics(pool);
        ap.push_back(m.ap);
        au.push_back(m.auroc);
        fpr.push_back(m.fpr95);
      }
      r.ap = assay_aggregate(ap);
      r.auroc = assay_aggregate(au);
      r.fpr95 = assay_aggregate(fpr);
    }
    if (options.per_image_mean) r.args["per_image_mean_ap"] = assay_aggregate(image_ap[k]).mean;
    if (strata[k]) r.size_bins = strata[k]->evaluate();
    results[k].pr_curve = precision_recall_curve(pools[k].scores, pools[k].labels, 2000);
    results[k].report = std::move(r);
  }
  return results;
}

}  // namespace dosr
