#include <benchmark/benchmark.h>

#include "dosr/trainer.hpp"

using namespace dosr;

namespace {

Tensor noise(int n, int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(n, c, h, w);
  for (double& v : t.values()) v = rng.normal();
  return t;
}

void BM_ConvForward(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0)), ch = static_cast<int>(state.range(1));
  Rng rng(1);
  Conv2d conv("bench", ch, ch, 3, 1, ParamGroup::kFresh, rng);
  const Tensor x = noise(1, ch, size, size, 2);
  for (auto _ : state) benchmark::DoNotOptimize(conv.infer(x));
  state.SetItemsProcessed(state.iterations() * size * size);
}
BENCHMARK(BM_ConvForward)->Args({64, 32})->Args({128, 32})->Args({64, 128});

void BM_ConvBackward(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0)), ch = static_cast<int>(state.range(1));
  Rng rng(1);
  Conv2d conv("bench", ch, ch, 3, 1, ParamGroup::kFresh, rng);
  const Tensor y = conv.forward(noise(1, ch, size, size, 2));
  const Tensor g = noise(1, ch, y.h(), y.w(), 3);
  for (auto _ : state) benchmark::DoNotOptimize(conv.backward(g));
}
BENCHMARK(BM_ConvBackward)->Args({64, 32})->Args({128, 32});

void BM_ExtractorInfer(benchmark::State& state) {
  const int size = static_cast<int>(state.range(0));
  const Extractor extractor(ExtractorConfig{}, 1);
  const Tensor x = noise(1, 3, size, size, 4);
  for (auto _ : state) benchmark::DoNotOptimize(extractor.infer(x));
}
BENCHMARK(BM_ExtractorInfer)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  ToyConfig toy;
  toy.num_inliers = 8;
  toy.num_negatives = 8;
  toy.num_val_inliers = toy.num_val_objects = toy.num_val_negatives = 1;
  toy.assays = 1;
  const ToyWorld world = make_toy_world(toy, 1);
  RunConfig run;
  run.head.num_classes = 4;
  run.head.hidden_width = 32;
  run.extractor.stage_widths = {16, 24, 32, 48};
  run.extractor.feature_width = 32;
  run.batch.crop_size = 64;
  run.batch.jitter_base = 64;
  run.epochs = 1000000;
  Trainer trainer(run);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_step(world.train, world.negatives));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_RankingMetrics(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  std::vector<double> scores(n);
  std::vector<std::uint8_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = rng.uniform() < 0.01;
    scores[i] = rng.normal(labels[i] ? 1.0 : 0.0, 1.0);
  }
  for (auto _ : state) benchmark::DoNotOptimize(ranking_metrics(scores, labels));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_RankingMetrics)->Arg(1 << 16)->Arg(1 << 20)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
