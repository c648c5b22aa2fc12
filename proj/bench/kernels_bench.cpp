// Serial reference kernels vs the OpenMP kernels, at the sizes the model uses.

#include <benchmark/benchmark.h>

#include <random>

#include "estf/gradcheck.hpp"
#include "estf/kernels.hpp"

namespace {

using namespace estf;

template <auto Kernel>
void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    std::mt19937_64 rng(1);
    const Tensor a = random_tensor(rng, {n, n}), b = random_tensor(rng, {n, n});
    std::vector<double> c(n * n);
    for (auto _ : state) {
        Kernel(a.data(), b.data(), c, n, n, n);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

kernels::ConvGeometry stem_geometry(std::size_t size) {
    // Second stem layer of the default desk-scale model.
    return {8, size, size, 16, 3, 3, 2, 1};
}

template <auto Kernel>
void BM_ConvForward(benchmark::State& state) {
    const auto g = stem_geometry(static_cast<std::size_t>(state.range(0)));
    std::mt19937_64 rng(2);
    const Tensor x = random_tensor(rng, {g.in_channels, g.height, g.width});
    const Tensor w = random_tensor(rng, {g.out_channels, g.in_channels, g.kernel_h, g.kernel_w});
    std::vector<double> y(g.out_channels * g.out_height() * g.out_width());
    for (auto _ : state) {
        Kernel(x.data(), w.data(), y, g);
        benchmark::DoNotOptimize(y.data());
    }
}

template <auto Kernel>
void BM_ConvBackwardInput(benchmark::State& state) {
    const auto g = stem_geometry(static_cast<std::size_t>(state.range(0)));
    std::mt19937_64 rng(3);
    const Tensor dy = random_tensor(rng, {g.out_channels, g.out_height(), g.out_width()});
    const Tensor w = random_tensor(rng, {g.out_channels, g.in_channels, g.kernel_h, g.kernel_w});
    std::vector<double> dx(g.in_channels * g.height * g.width);
    for (auto _ : state) {
        Kernel(dy.data(), w.data(), dx, g);
        benchmark::DoNotOptimize(dx.data());
    }
}

template <auto Kernel>
void BM_ConvBackwardWeight(benchmark::State& state) {
    const auto g = stem_geometry(static_cast<std::size_t>(state.range(0)));
    std::mt19937_64 rng(4);
    const Tensor x = random_tensor(rng, {g.in_channels, g.height, g.width});
    const Tensor dy = random_tensor(rng, {g.out_channels, g.out_height(), g.out_width()});
    std::vector<double> dw(g.out_channels * g.in_channels * g.kernel_h * g.kernel_w);
    for (auto _ : state) {
        Kernel(x.data(), dy.data(), dw, g);
        benchmark::DoNotOptimize(dw.data());
    }
}

}  // namespace

BENCHMARK(BM_Matmul<kernels::serial::matmul>)->Name("matmul/serial")->Arg(32)->Arg(128);
BENCHMARK(BM_Matmul<kernels::parallel::matmul>)->Name("matmul/parallel")->Arg(32)->Arg(128);
BENCHMARK(BM_ConvForward<kernels::serial::conv2d_forward>)->Name("conv_fwd/serial")->Arg(32)->Arg(64);
BENCHMARK(BM_ConvForward<kernels::parallel::conv2d_forward>)->Name("conv_fwd/parallel")->Arg(32)->Arg(64);
BENCHMARK(BM_ConvBackwardInput<kernels::serial::conv2d_backward_input>)->Name("conv_bwd_in/serial")->Arg(32);
BENCHMARK(BM_ConvBackwardInput<kernels::parallel::conv2d_backward_input>)->Name("conv_bwd_in/parallel")->Arg(32);
BENCHMARK(BM_ConvBackwardWeight<kernels::serial::conv2d_backward_weight>)->Name("conv_bwd_w/serial")->Arg(32);
BENCHMARK(BM_ConvBackwardWeight<kernels::parallel::conv2d_backward_weight>)->Name("conv_bwd_w/parallel")->Arg(32);

BENCHMARK_MAIN();
