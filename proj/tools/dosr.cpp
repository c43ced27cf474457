// dosr: toy-world generation, training, evaluation and open-set prediction.

#include <CLI11.hpp>

#include <array>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "dosr/datasets.hpp"
#include "dosr/scoring.hpp"
#include "dosr/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Global {
  std::uint64_t seed = 0;
  std::string config;
  std::string out;
  bool verbose = false;
  bool seed_given = false;
};

json echo_args(const std::string& command, int argc, char** argv) {
  json args = json::array();
  for (int i = 1; i < argc; ++i) args.push_back(argv[i]);
  return {{"command", command}, {"argv", args}};
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

void require_empty_or_force(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
    throw std::runtime_error("output directory " + dir.string() + " is not empty (use --force)");
  }
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::array<std::uint8_t, 3> class_color(int c) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 10> palette{{{128, 64, 128},
                                                                        {107, 142, 35},
                                                                        {70, 130, 180},
                                                                        {70, 70, 70},
                                                                        {220, 20, 60},
                                                                        {250, 170, 30},
                                                                        {0, 0, 142},
                                                                        {152, 251, 152},
                                                                        {190, 153, 153},
                                                                        {102, 102, 156}}};
  if (c < static_cast<int>(palette.size())) return palette[c];
  return {static_cast<std::uint8_t>(37 * c % 200), static_cast<std::uint8_t>(91 * c % 200),
          static_cast<std::uint8_t>(53 * c % 200)};
}

// ---------------------------------------------------------------------------

struct GenToyArgs {
  int classes = 4;
  int n = 64;
  int negatives = 256;
  int size = 128;
  int val_n = 10;
  int assays = 50;
  bool force = false;
};

int cmd_gen_toy(const Global& g, const GenToyArgs& a, const CLI::App& sub, const json& echo) {
  dosr::ToyConfig cfg;
  if (!g.config.empty()) {
    std::ifstream in(g.config);
    if (!in) throw std::runtime_error("cannot open " + g.config);
    cfg = json::parse(in).get<dosr::ToyConfig>();
  }
  if (sub.count("--classes")) cfg.num_classes = a.classes;
  if (sub.count("--n")) cfg.num_inliers = a.n;
  if (sub.count("--negatives")) cfg.num_negatives = a.negatives;
  if (sub.count("--size")) cfg.image_size = a.size;
  if (sub.count("--val-n")) cfg.num_val_inliers = cfg.num_val_objects = a.val_n;
  if (sub.count("--assays")) cfg.assays = a.assays;
  cfg.validate();
  const fs::path out = g.out.empty() ? fs::path("toy") : fs::path(g.out);
  require_empty_or_force(out, a.force);
  if (a.force && fs::exists(out)) fs::remove_all(out);
  const dosr::ToyManifests m = dosr::generate_toy_world(cfg, g.seed, out);
  write_json(out / "args.json", json{{"args", echo}, {"seed", g.seed}, {"toy", cfg}});
  for (const fs::path& p : {m.inliers, m.negatives, m.val, m.val_pasted, m.val_whole}) std::cout << p.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string head;
  bool rsp = false;
  bool scale_jitter = false;
  bool no_paste = false;
  bool no_negatives = false;
  int epochs = 0;
  double lr = 0;
  int batch = 0;
  int crop = 0;
  double dropout = -1;
  std::string inliers;
  std::string negatives;
  std::string val;
  std::string resume;
  bool force = false;
};

int cmd_train(const Global& g, const TrainArgs& a, const CLI::App& sub, const json& echo) {
  const fs::path out = g.out.empty() ? fs::path("run") : fs::path(g.out);
  dosr::Trainer trainer = [&] {
    if (!a.resume.empty()) return dosr::Trainer::resume(a.resume);
    require_empty_or_force(out, a.force);
    dosr::RunConfig run;
    if (!g.config.empty()) run = dosr::read_run_config(g.config);
    if (g.seed_given || g.config.empty()) run.seed = g.seed;
    if (!a.head.empty()) run.head.kind = dosr::head_kind_from_string(a.head);
    if (a.rsp) run.paste.mode = dosr::PasteMode::kRsp;
    if (a.scale_jitter) run.batch.jitter = dosr::JitterMode::kScale;
    if (a.no_paste) run.negatives = dosr::NegativeMode::kNoPaste;
    if (a.no_negatives) run.negatives = dosr::NegativeMode::kNone;
    if (sub.count("--epochs")) run.epochs = a.epochs;
    if (sub.count("--lr")) run.learning_rate = a.lr;
    if (sub.count("--batch")) run.batch.batch_size = a.batch;
    if (sub.count("--crop")) run.batch.crop_size = a.crop;
    if (sub.count("--dropout")) run.head.dropout = a.dropout;
    return dosr::Trainer(run);
  }();
  if (a.no_paste && a.no_negatives) throw CLI::ValidationError("--no-paste and --no-negatives are exclusive");

  const dosr::DatasetManifest inlier_manifest = dosr::read_manifest(a.inliers);
  const auto inliers = dosr::load_inlier_dataset(inlier_manifest);
  if (inlier_manifest.num_classes != trainer.config().head.num_classes) {
    if (!a.resume.empty()) throw std::runtime_error("dataset class count differs from the checkpoint");
    dosr::RunConfig run = trainer.config();
    run.head.num_classes = inlier_manifest.num_classes;
    trainer = dosr::Trainer(run);
  }
  std::vector<dosr::NegativeSample> negatives;
  if (trainer.config().negatives != dosr::NegativeMode::kNone) {
    if (a.negatives.empty()) throw CLI::ValidationError("--negatives is required unless --no-negatives is given");
    const dosr::NegativeDataset neg = dosr::load_negative_dataset(dosr::read_manifest(a.negatives));
    if (neg.skipped) spdlog::warn("{} negative images without a usable bbox were skipped", neg.skipped);
    negatives = neg.samples;
  }
  std::vector<dosr::LabeledSample> val;
  if (!a.val.empty()) val = dosr::load_inlier_dataset(dosr::read_manifest(a.val));

  fs::create_directories(out);
  write_json(out / "run.json", json{{"args", echo}, {"run", trainer.config()}});
  std::function<json(const dosr::Model&)> validate;
  if (!val.empty()) {
    validate = [&](const dosr::Model& model) {
      dosr::EvalOptions opt;
      opt.criteria = {dosr::supports(model, dosr::Criterion::kOp) ? dosr::Criterion::kOp : dosr::Criterion::kMsm};
      const auto res = dosr::evaluate(model, val, opt);
      return json(*res.front().report);
    };
  }
  trainer.train(inliers, negatives, out, validate);
  std::cout << (out / "final.ckpt").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string criteria = "op";
  int stride = 1;
  int assays = 0;
  bool size_strata = false;
  bool per_image = false;
  int mc_passes = 50;
};

int cmd_eval(const Global& g, const EvalArgs& a, const json& echo) {
  const dosr::Model model = dosr::load_model(a.checkpoint);
  const dosr::DatasetManifest manifest = dosr::read_manifest(a.data);
  const auto samples = dosr::load_inlier_dataset(manifest);

  dosr::EvalOptions opt;
  opt.criteria.clear();
  for (const std::string& c : split(a.criteria, ',')) opt.criteria.push_back(dosr::criterion_from_string(c));
  opt.stride = a.stride;
  opt.assays = a.assays > 0;
  opt.size_strata = a.size_strata;
  opt.per_image_mean = a.per_image;
  opt.mc_passes = a.mc_passes;
  opt.seed = g.seed;
  opt.dataset = manifest.split;

  const fs::path out = g.out.empty() ? fs::path("eval") : fs::path(g.out);
  const auto results = dosr::evaluate(model, samples, opt);
  int failures = 0;
  for (const auto& r : results) {
    const std::string name = dosr::to_string(r.criterion);
    if (!r.report) {
      std::cerr << "error: " << r.error << "\n";
      ++failures;
      continue;
    }
    dosr::MetricsReport report = *r.report;
    report.args = echo;
    report.args["seed"] = g.seed;
    if (opt.assays && report.ap && static_cast<int>(report.ap->count) != a.assays) {
      spdlog::warn("dataset has {} assays, {} requested", report.ap->count, a.assays);
    }
    dosr::write_report(out / name, report);
    dosr::write_pr_curve_csv(out / (name + "_pr.csv"), r.pr_curve);
    dosr::plot_pr_curve(out / (name + "_pr.png"), r.pr_curve, "PR " + name);
    if (opt.size_strata) {
      dosr::write_size_bins_csv(out / (name + "_size_strata.csv"), report.size_bins);
      dosr::plot_size_bins(out / (name + "_size_strata.png"), report.size_bins, "size strata " + name);
    }
    std::cout << name << ": AP " << report.pooled.ap << " AUROC " << report.pooled.auroc << " FPR95 "
              << report.pooled.fpr95;
    if (report.ap) std::cout << " | assay AP " << report.ap->formatted();
    if (report.miou) std::cout << " | mIoU " << *report.miou;
    std::cout << "\n";
  }
  return failures ? 1 : 0;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::string input;
  std::string criterion;
  double threshold = 0.5;
};

int cmd_predict(const Global& g, const PredictArgs& a, const json& echo) {
  const dosr::Model model = dosr::load_model(a.checkpoint);
  const dosr::Criterion criterion =
      a.criterion.empty() ? (dosr::supports(model, dosr::Criterion::kOp) ? dosr::Criterion::kOp : dosr::Criterion::kMsm)
                          : dosr::criterion_from_string(a.criterion);
  if (!dosr::supports(model, criterion)) {
    throw std::runtime_error("criterion " + dosr::to_string(criterion) + " is not available for head " +
                             dosr::to_string(model.kind()));
  }
  std::vector<fs::path> inputs;
  if (fs::is_directory(a.input)) {
    for (const auto& e : fs::directory_iterator(a.input))
      if (e.path().extension() == ".png") inputs.push_back(e.path());
    std::sort(inputs.begin(), inputs.end());
  } else {
    inputs.push_back(a.input);
  }
  const fs::path out = g.out.empty() ? fs::path("pred") : fs::path(g.out);
  const int C = model.num_classes();
  const double max_score = (criterion == dosr::Criterion::kEntropy || criterion == dosr::Criterion::kMcEntropy ||
                            criterion == dosr::Criterion::kMcMi)
                               ? std::log(static_cast<double>(C))
                               : 1.0;
  dosr::Rng rng(g.seed);
  for (const fs::path& path : inputs) {
    const dosr::Tensor image = dosr::read_rgb_png(path, dosr::Normalization{});
    const dosr::ImageScores s = dosr::score_image(model, image, criterion, &rng);
    const dosr::OpenSetMap open = dosr::decode_open_set(s.posterior, s.score, C, a.threshold * max_score);
    std::vector<std::uint8_t> rgb(open.labels.size() * 3);
    for (std::size_t i = 0; i < open.labels.size(); ++i) {
      const int l = open.labels.data[i];
      const auto color = l == C ? std::array<std::uint8_t, 3>{255, 255, 255} : class_color(l);
      std::copy(color.begin(), color.end(), rgb.begin() + static_cast<std::ptrdiff_t>(i * 3));
    }
    const std::string stem = path.stem().string();
    dosr::write_rgb8_png(out / (stem + "_openset.png"), rgb, image.h(), image.w());
    dosr::write_label_png(out / (stem + "_labels.png"), open.labels);
    dosr::write_score_png(out / (stem + "_score.png"), s.score, max_score);
    dosr::write_score_sidecar(out / (stem + "_score.bin"), s.score);
  }
  write_json(out / "args.json", json{{"args", echo},
                                     {"criterion", dosr::to_string(criterion)},
                                     {"threshold", a.threshold},
                                     {"seed", g.seed},
                                     {"images", inputs.size()}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense open-set recognition: toy data, training, evaluation, prediction"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--config", g.config, "JSON config (toy config for gen-toy, run config for train)");
  app.add_option("--out", g.out, "Output directory");
  app.add_flag("-v,--verbose", g.verbose, "Log progress");

  GenToyArgs gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-toy", "Generate the procedural toy world");
  gen_cmd->add_option("--classes", gen.classes, "Inlier classes C")->check(CLI::Range(2, 100));
  gen_cmd->add_option("--n", gen.n, "Training inlier images")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--negatives", gen.negatives, "Negative images")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--size", gen.size, "Inlier image size")->check(CLI::Range(32, 4096));
  gen_cmd->add_option("--val-n", gen.val_n, "Validation inliers and objects")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--assays", gen.assays, "Pasted validation assays")->check(CLI::PositiveNumber);
  gen_cmd->add_flag("--force", gen.force, "Overwrite a non-empty output directory");

  TrainArgs tr;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--head", tr.head, "two_head | confidence | oe_cway | cplus1 | multilabel");
  train_cmd->add_flag("--rsp", tr.rsp, "Randomly scaled pasted patches");
  train_cmd->add_flag("--scale-jitter", tr.scale_jitter, "Scale jittering");
  train_cmd->add_flag("--no-paste", tr.no_paste, "Standalone negatives only");
  train_cmd->add_flag("--no-negatives", tr.no_negatives, "Inliers only");
  train_cmd->add_option("--epochs", tr.epochs)->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", tr.lr)->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch", tr.batch)->check(CLI::PositiveNumber);
  train_cmd->add_option("--crop", tr.crop)->check(CLI::PositiveNumber);
  train_cmd->add_option("--dropout", tr.dropout)->check(CLI::Range(0.0, 0.99));
  train_cmd->add_option("--inliers", tr.inliers, "Inlier manifest")->required();
  train_cmd->add_option("--negatives", tr.negatives, "Negative manifest");
  train_cmd->add_option("--val", tr.val, "Validation manifest");
  train_cmd->add_option("--resume", tr.resume, "Checkpoint to resume from");
  train_cmd->add_flag("--force", tr.force, "Allow a non-empty output directory");

  EvalArgs ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--data", ev.data, "Labeled manifest")->required();
  eval_cmd->add_option("--criteria", ev.criteria, "Comma-separated: op,msm,fused,entropy,mc_mi,mc_entropy")
      ->capture_default_str();
  eval_cmd->add_option("--stride", ev.stride, "Pixel subsampling stride")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--assays", ev.assays, "Report mean ± std over this many assays");
  eval_cmd->add_flag("--size-strata", ev.size_strata, "Per-size-bin metrics");
  eval_cmd->add_flag("--per-image", ev.per_image, "Also report per-image mean AP");
  eval_cmd->add_option("--mc-passes", ev.mc_passes)->check(CLI::Range(2, 1000));

  PredictArgs pr;
  CLI::App* predict_cmd = app.add_subcommand("predict", "Write open-set maps for images");
  predict_cmd->add_option("--checkpoint", pr.checkpoint)->required();
  predict_cmd->add_option("--input", pr.input, "PNG image or directory")->required()->check(CLI::ExistingPath);
  predict_cmd->add_option("--criterion", pr.criterion, "Outlier score (default op, msm for oe_cway)");
  predict_cmd->add_option("--threshold", pr.threshold)->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  g.seed_given = app.count("--seed") > 0;
  spdlog::set_level(g.verbose ? spdlog::level::info : spdlog::level::warn);

  try {
    if (*gen_cmd) return cmd_gen_toy(g, gen, *gen_cmd, echo_args("gen-toy", argc, argv));
    if (*train_cmd) return cmd_train(g, tr, *train_cmd, echo_args("train", argc, argv));
    if (*eval_cmd) return cmd_eval(g, ev, echo_args("eval", argc, argv));
    if (*predict_cmd) return cmd_predict(g, pr, echo_args("predict", argc, argv));
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
