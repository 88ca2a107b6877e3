#include "pfiqa/trainer.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace pfiqa;

namespace {

std::vector<double> random_vector(size_t n, uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<double> v(n);
    for (auto& x : v)
        x = nd(rng);
    return v;
}

void BM_Plcc(benchmark::State& state)
{
    const auto a = random_vector(static_cast<size_t>(state.range(0)), 1);
    const auto b = random_vector(a.size(), 2);
    for (auto _ : state)
        benchmark::DoNotOptimize(plcc(a, b));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Plcc)->Arg(100)->Arg(10000);

void BM_Srcc(benchmark::State& state)
{
    const auto a = random_vector(static_cast<size_t>(state.range(0)), 3);
    const auto b = random_vector(a.size(), 4);
    for (auto _ : state)
        benchmark::DoNotOptimize(srcc(a, b));
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_Srcc)->Arg(100)->Arg(10000);

void BM_FinalScore(benchmark::State& state)
{
    torch::manual_seed(0);
    const auto n = state.range(0);
    auto s_p = torch::randn({n, 1, 28, 28}), s_f = torch::randn({n, 1, 28, 28});
    auto w_p = torch::rand({n, 1, 28, 28}), w_f = torch::rand({n, 1, 28, 28});
    for (auto _ : state)
        benchmark::DoNotOptimize(final_score(s_p, s_f, w_p, w_f));
}
BENCHMARK(BM_FinalScore)->Arg(1)->Arg(16);

void BM_Ssim(benchmark::State& state)
{
    torch::manual_seed(1);
    auto a = torch::rand({256, 256, 3}), b = (a + 0.05 * torch::randn({256, 256, 3})).clamp(0, 1);
    for (auto _ : state)
        benchmark::DoNotOptimize(ssim(a, b));
}
BENCHMARK(BM_Ssim)->Unit(benchmark::kMillisecond);

void BM_ModelForward(benchmark::State& state)
{
    torch::set_num_threads(1);
    torch::manual_seed(2);
    ModelConfig cfg;
    PfiqaModel model(cfg, 224);
    model->eval();
    torch::NoGradGuard g;
    const auto n = state.range(0);
    auto sr = torch::randn({n, 3, 224, 224}), lr = torch::randn({n, 3, 224, 224});
    auto scales = torch::full({n}, 2.0f);
    for (auto _ : state)
        benchmark::DoNotOptimize(model(sr, lr, scales).final_score);
    state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_ModelForward)->Arg(1)->Unit(benchmark::kMillisecond)->Iterations(3);

void BM_TrainStep(benchmark::State& state)
{
    torch::set_num_threads(1);
    ExperimentConfig c;
    c.dataset.synthetic.n_contents = 1;
    c.dataset.synthetic.methods_per_content = 4;
    c.dataset.synthetic.image_size = 224;
    c.optim.bf16_autocast = state.range(0) != 0;
    auto corpus = load_dataset(c.dataset);
    std::vector<ModelInput> batch;
    for (const auto& s : corpus)
        batch.push_back(make_input(s, {0, 0}, 224, false));
    Trainer t(c);
    t.set_total_steps(1000);
    for (auto _ : state)
        benchmark::DoNotOptimize(t.step(batch));
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->Iterations(3);

}  // namespace

BENCHMARK_MAIN();
