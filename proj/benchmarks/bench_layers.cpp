#include <benchmark/benchmark.h>

#include "fbn/attention.hpp"
#include "fbn/nn.hpp"
#include "fbn/rng.hpp"

using namespace fbn;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.v) v = rng.normal();
    return t;
}

void BM_Conv3dForward(benchmark::State& state) {
    const auto c = state.range(0);
    Rng rng(1);
    Conv3d conv("conv", c, c, 3, 1, 1);
    conv.init(rng);
    const Tensor x = random_tensor({2, c, 16, 16, 16}, rng);
    for (auto _ : state) {
        Tensor y = conv.forward(x);
        benchmark::DoNotOptimize(y.v.data());
    }
    state.SetItemsProcessed(state.iterations() * x.numel());
}
BENCHMARK(BM_Conv3dForward)->Arg(4)->Arg(8)->Arg(16);

void BM_Conv3dBackward(benchmark::State& state) {
    const auto c = state.range(0);
    Rng rng(1);
    Conv3d conv("conv", c, c, 3, 1, 1);
    conv.init(rng);
    const Tensor x = random_tensor({2, c, 16, 16, 16}, rng);
    const Tensor y = conv.forward(x);
    const Tensor dy = random_tensor(y.shape, rng);
    for (auto _ : state) {
        Tensor dx = conv.backward(dy);
        benchmark::DoNotOptimize(dx.v.data());
    }
    state.SetItemsProcessed(state.iterations() * x.numel());
}
BENCHMARK(BM_Conv3dBackward)->Arg(4)->Arg(8)->Arg(16);

void BM_SwinBlockForward(benchmark::State& state) {
    const auto c = state.range(0);
    Rng rng(2);
    SwinBlock block("blk", c, 2, 4, false);
    block.init(rng);
    const Tensor x = random_tensor({2, c, 8, 8, 8}, rng);
    for (auto _ : state) {
        Tensor y = block.forward(x);
        benchmark::DoNotOptimize(y.v.data());
    }
    state.SetItemsProcessed(state.iterations() * x.numel());
}
BENCHMARK(BM_SwinBlockForward)->Arg(8)->Arg(16)->Arg(32);

void BM_SwinBlockShiftedForward(benchmark::State& state) {
    const auto c = state.range(0);
    Rng rng(2);
    SwinBlock block("blk", c, 2, 4, true);
    block.init(rng);
    const Tensor x = random_tensor({2, c, 8, 8, 8}, rng);
    for (auto _ : state) {
        Tensor y = block.forward(x);
        benchmark::DoNotOptimize(y.v.data());
    }
    state.SetItemsProcessed(state.iterations() * x.numel());
}
BENCHMARK(BM_SwinBlockShiftedForward)->Arg(8)->Arg(16)->Arg(32);

void BM_WindowPartitionRoundTrip(benchmark::State& state) {
    Rng rng(3);
    const Tensor x = random_tensor({2, 16, 16, 16, 16}, rng);
    const std::array<int, 3> win{4, 4, 4};
    for (auto _ : state) {
        Tensor tokens = window_partition(x, win);
        Tensor back = window_reverse(tokens, win, x.shape);
        benchmark::DoNotOptimize(back.v.data());
    }
    state.SetItemsProcessed(state.iterations() * x.numel());
}
BENCHMARK(BM_WindowPartitionRoundTrip);

void BM_LinearForward(benchmark::State& state) {
    const auto n = state.range(0);
    Rng rng(4);
    Linear fc("fc", n, n);
    fc.init(rng);
    const Tensor x = random_tensor({64, n}, rng);
    for (auto _ : state) {
        Tensor y = fc.forward(x);
        benchmark::DoNotOptimize(y.v.data());
    }
    state.SetItemsProcessed(state.iterations() * 64 * n * n);
}
BENCHMARK(BM_LinearForward)->Arg(64)->Arg(256)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
