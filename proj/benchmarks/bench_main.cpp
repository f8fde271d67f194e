#include <benchmark/benchmark.h>

#include "ddsa/diffusion.hpp"
#include "ddsa/fed.hpp"
#include "ddsa/nn.hpp"
#include "ddsa/rng.hpp"
#include "ddsa/select.hpp"

namespace {

using namespace ddsa;

nn::Batch mixture_batch(std::size_t per_class) {
  return nn::make_batch(data::make_gaussian_mixture(4, per_class, data::circle_means(4, 2.0), 1.0, 7));
}

void BM_FedAvgAggregate(benchmark::State& state) {
  const nn::MlpSpec spec{2, {64, 64}, 4, nn::Activation::relu};
  const auto clients = static_cast<std::size_t>(state.range(0));
  std::vector<nn::ParamVector> params;
  std::vector<std::size_t> sizes;
  for (std::size_t k = 0; k < clients; ++k) {
    params.push_back(nn::init_classifier(spec, k));
    sizes.push_back(10 + k);
  }
  for (auto _ : state) benchmark::DoNotOptimize(fed::fedavg_aggregate(params, sizes));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(clients * params[0].size()));
}
BENCHMARK(BM_FedAvgAggregate)->Arg(5)->Arg(50);

void BM_ClassifierGradient(benchmark::State& state) {
  const nn::MlpSpec spec{2, {32, 32}, 4, nn::Activation::relu};
  const auto params = nn::init_classifier(spec, 1);
  const auto batch = mixture_batch(static_cast<std::size_t>(state.range(0)) / 4);
  auto grad = params.zeros_like();
  for (auto _ : state) benchmark::DoNotOptimize(nn::classifier_loss(params, spec, batch, &grad));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch.size()));
}
BENCHMARK(BM_ClassifierGradient)->Arg(16)->Arg(256);

void BM_CdmLossGradient(benchmark::State& state) {
  diffusion::DenoiserSpec spec;
  spec.num_classes = 4;
  const auto params = diffusion::init_denoiser(spec, 1);
  const auto schedule = diffusion::make_schedule(200, 5e-4, 0.1);
  const auto batch = mixture_batch(16);
  auto grad = params.zeros_like();
  Rng rng(3);
  for (auto _ : state)
    benchmark::DoNotOptimize(diffusion::cdm_loss(params, spec, batch.x, batch.y, schedule, rng, &grad));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch.size()));
}
BENCHMARK(BM_CdmLossGradient);

void BM_SampleLatents(benchmark::State& state) {
  diffusion::DenoiserSpec spec;
  spec.num_classes = 4;
  const auto params = diffusion::init_denoiser(spec, 1);
  const auto schedule = diffusion::make_schedule(200, 5e-4, 0.1);
  const auto count = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  for (auto _ : state)
    benchmark::DoNotOptimize(diffusion::sample_latents(params, spec, 1, count, schedule, rng,
                                                       diffusion::PosteriorVariance::ddpm_beta));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(count));
}
BENCHMARK(BM_SampleLatents)->Arg(1)->Arg(256);

void BM_SolveSelection(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Rng rng(11);
  select::ConfusionMatrix l(c), p(c);
  for (int i = 0; i < c; ++i) {
    l(i, i) = 5.0 + static_cast<double>(rng.below(20));
    for (int j = 0; j < c; ++j)
      p(i, j) = i == j ? 50.0 + static_cast<double>(rng.below(100)) : static_cast<double>(rng.below(20));
  }
  const select::SelectionConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(select::solve_selection(l, p, cfg));
}
BENCHMARK(BM_SolveSelection)->Arg(4)->Arg(10);

}  // namespace

BENCHMARK_MAIN();
