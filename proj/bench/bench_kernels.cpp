// Serial reference vs. OpenMP paths: GEMM, batch gradients and k-means.

#include "covft/analysis.hpp"
#include "covft/kernels.hpp"
#include "covft/model.hpp"
#include "covft/rng.hpp"

#include <benchmark/benchmark.h>

#include <vector>

using namespace covft;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
    Rng rng = make_rng(seed);
    std::vector<double> v(n);
    for (double& x : v) x = normal(rng);
    return v;
}

template <auto Gemm>
void bm_gemm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
    std::vector<double> c(n * n);
    for (auto _ : state) {
        Gemm(a.data(), b.data(), c.data(), n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}

void bm_batch_gradients(benchmark::State& state) {
    ModelConfig mc;
    mc.encoder.comoe = true;
    Model m(mc);
    m.params.set_all_trainable(true);
    Rng rng = make_rng(3);
    Dataset d;
    for (std::size_t i = 0; i < 16; ++i) d.push_back(make_sample(all_task_kinds()[i % kTaskKinds], rng));
    std::vector<const Sample*> batch;
    for (const auto& s : d) batch.push_back(&s);
    const bool parallel = state.range(0) != 0;
    for (auto _ : state) benchmark::DoNotOptimize(batch_gradients(m, batch, 1, 0, parallel).loss);
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * batch.size()));
}

void bm_kmeans(benchmark::State& state) {
    Matrix data;
    for (std::size_t i = 0; i < 1000; ++i) data.push_back(random_vec(128, 100 + i));
    KMeansOptions opts;
    opts.parallel = state.range(0) != 0;
    opts.max_iter = 20;
    for (auto _ : state) benchmark::DoNotOptimize(kmeans(data, 10, 1, opts).inertia());
}

}  // namespace

BENCHMARK(bm_gemm<kernels::serial::gemm_nn>)->Name("gemm_nn/serial")->Arg(64)->Arg(256);
BENCHMARK(bm_gemm<kernels::parallel::gemm_nn>)->Name("gemm_nn/parallel")->Arg(64)->Arg(256);
BENCHMARK(bm_gemm<kernels::serial::gemm_tn>)->Name("gemm_tn/serial")->Arg(64)->Arg(256);
BENCHMARK(bm_gemm<kernels::parallel::gemm_tn>)->Name("gemm_tn/parallel")->Arg(64)->Arg(256);
BENCHMARK(bm_batch_gradients)->Name("batch_gradients")->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(bm_kmeans)->Name("kmeans")->ArgName("parallel")->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
