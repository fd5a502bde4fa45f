#include <random>

#include <benchmark/benchmark.h>

#include "dndm/dataset.h"
#include "dndm/graph.h"
#include "dndm/model.h"
#include "dndm/training.h"

namespace {

dndm::Tensor Uniform(dndm::Shape shape, uint64_t seed) {
  dndm::Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  for (float& v : t.values()) v = u(rng);
  return t;
}

void BM_LinearForward(benchmark::State& state) {
  const size_t batch = static_cast<size_t>(state.range(0));
  const dndm::Tensor x = Uniform({batch, 2352}, 1);
  const dndm::Tensor w = Uniform({2352, 100}, 2);
  const dndm::Tensor b = Uniform({100}, 3);
  for (auto _ : state) {
    dndm::Graph g;
    benchmark::DoNotOptimize(g.value(g.Linear(g.Constant(x), g.Constant(w), g.Constant(b))));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(batch));
}
BENCHMARK(BM_LinearForward)->Arg(64)->Arg(256);

void BM_LinearBackward(benchmark::State& state) {
  const size_t batch = static_cast<size_t>(state.range(0));
  const dndm::Tensor x = Uniform({batch, 2352}, 1);
  dndm::Tensor w = Uniform({2352, 100}, 2);
  dndm::Tensor b = Uniform({100}, 3);
  for (auto _ : state) {
    dndm::Graph g;
    const dndm::Var out = g.Linear(g.Constant(x), g.Parameter(w), g.Parameter(b));
    g.Backward(g.Sum(g.Relu(out)));
    w.ClearGrad();
    b.ClearGrad();
  }
  state.SetItemsProcessed(state.iterations() * static_cast<int64_t>(batch));
}
BENCHMARK(BM_LinearBackward)->Arg(64)->Arg(256);

void BM_Stage1Epoch(benchmark::State& state) {
  const dndm::BiasedDataset data = dndm::MakeSynthetic(10, 640, 0.01, 4);
  for (auto _ : state) {
    state.PauseTiming();
    dndm::Branch deep = dndm::BuildMlp(2352, 100, 4, 5);
    dndm::Branch shallow = dndm::BuildMlp(2352, 100, 2, 6);
    dndm::Head head = dndm::BuildHead(100, 10, 7);
    dndm::TrainConfig config = dndm::TrainConfig::Stage1Defaults();
    config.epochs = 1;
    dndm::Stage1Trainer trainer(deep, shallow, head, config);
    state.ResumeTiming();
    benchmark::DoNotOptimize(trainer.RunEpoch(data, 0));
  }
  state.SetItemsProcessed(state.iterations() * 640);
}
BENCHMARK(BM_Stage1Epoch)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
