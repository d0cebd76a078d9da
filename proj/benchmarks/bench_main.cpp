// Microbenchmarks for the hot paths: inference, capture-mode tracing,
// neutralized inference, attack gradients, importance extraction, and
// smoothing. Run with --benchmark_filter=<name> to focus one path.

#include <benchmark/benchmark.h>

#include "nsvit/analysis.hpp"
#include "nsvit/attacks.hpp"
#include "nsvit/neuroshield.hpp"
#include "nsvit/rng.hpp"
#include "nsvit/training.hpp"
#include "nsvit/vit.hpp"

namespace {

using namespace nsvit;

VitConfig desk_config() {
  VitConfig cfg;  // 32x32x3, patch 4, depth 6, width 64: the desk-scale model
  return cfg;
}

const VitModel& desk_model() {
  static const VitModel model = [] {
    Rng rng = Rng::stream(42, "bench.init");
    return VitModel::random_init(desk_config(), rng);
  }();
  return model;
}

Tensor bench_image() {
  const VitConfig cfg = desk_config();
  Rng rng = Rng::stream(42, "bench.image");
  std::vector<float> pixels(static_cast<size_t>(cfg.channels) * cfg.image_size *
                            cfg.image_size);
  for (float& v : pixels) v = static_cast<float>(rng.uniform(0.0, 1.0));
  return Tensor::from_data({cfg.channels, cfg.image_size, cfg.image_size},
                           pixels);
}

NeutralizationPlan bench_plan() {
  NeutralizationPlan plan;
  plan.alpha = 0.1f;
  plan.p = 5.0;
  const VitConfig cfg = desk_config();
  for (int layer = 0; layer < cfg.depth; ++layer) {
    for (Site site : kAllSites) {
      const int width = cfg.site_width(site);
      std::vector<int> channels;
      for (int c = 0; c < width; c += 16) channels.push_back(c);
      plan.channels[HookSite{layer, site}] = std::move(channels);
    }
  }
  return plan;
}

void BM_Forward(benchmark::State& state) {
  const VitModel& model = desk_model();
  const Tensor image = bench_image();
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.forward(image));
  }
}
BENCHMARK(BM_Forward);

void BM_ForwardTraced(benchmark::State& state) {
  const VitModel& model = desk_model();
  const Tensor image = bench_image();
  for (auto _ : state) {
    ActivationTrace trace;
    benchmark::DoNotOptimize(model.forward(image, &trace));
  }
}
BENCHMARK(BM_ForwardTraced);

void BM_DefendedForward(benchmark::State& state) {
  const VitModel& model = desk_model();
  const Tensor image = bench_image();
  const NeutralizationPlan plan = bench_plan();
  for (auto _ : state) {
    benchmark::DoNotOptimize(defended_forward(model, plan, image));
  }
}
BENCHMARK(BM_DefendedForward);

void BM_InputGradient(benchmark::State& state) {
  const VitModel& model = desk_model();
  const Tensor image = bench_image();
  for (auto _ : state) {
    benchmark::DoNotOptimize(input_gradient(model, image, 0));
  }
}
BENCHMARK(BM_InputGradient);

void BM_NeuronImportance(benchmark::State& state) {
  const VitModel& model = desk_model();
  const Tensor image = bench_image();
  for (auto _ : state) {
    benchmark::DoNotOptimize(neuron_importance(model, image));
  }
}
BENCHMARK(BM_NeuronImportance);

void BM_SmoothingPredict(benchmark::State& state) {
  const VitModel& model = desk_model();
  const Tensor image = bench_image();
  const int samples = static_cast<int>(state.range(0));
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        randomized_smoothing_predict(model, image, 0.25, samples, 7));
  }
}
BENCHMARK(BM_SmoothingPredict)->Arg(16)->Arg(64);

void BM_PgdAttack(benchmark::State& state) {
  const VitModel& model = desk_model();
  const Tensor image = bench_image();
  AttackConfig cfg;
  cfg.kind = AttackKind::kPgd;
  cfg.steps = static_cast<int>(state.range(0));
  for (auto _ : state) {
    Rng rng = Rng::stream(7, "bench.pgd");
    benchmark::DoNotOptimize(pgd(model, image, 0, cfg, &rng));
  }
}
BENCHMARK(BM_PgdAttack)->Arg(5)->Arg(20);

}  // namespace

BENCHMARK_MAIN();
