#include <benchmark/benchmark.h>

#include "fbn/metrics.hpp"
#include "fbn/rng.hpp"

using namespace fbn;

namespace {

ScoredSet random_set(std::int64_t n, Rng& rng) {
    ScoredSet set;
    for (std::int64_t i = 0; i < n; ++i) {
        const int y = i < n / 2 ? 0 : 1;
        set.labels.push_back(y);
        set.scores.push_back(rng.normal() + (y ? 1.0 : 0.0));
    }
    return set;
}

void BM_Auc(benchmark::State& state) {
    Rng rng(11);
    const ScoredSet set = random_set(state.range(0), rng);
    for (auto _ : state) {
        double a = auc(set);
        benchmark::DoNotOptimize(a);
    }
    state.SetItemsProcessed(state.iterations() * set.labels.size());
}
BENCHMARK(BM_Auc)->Arg(100)->Arg(1000)->Arg(10000);

void BM_DelongCi(benchmark::State& state) {
    Rng rng(12);
    const ScoredSet set = random_set(state.range(0), rng);
    for (auto _ : state) {
        ComparisonResult r = delong_ci(set, 0.95);
        benchmark::DoNotOptimize(r.p_value);
    }
}
BENCHMARK(BM_DelongCi)->Arg(100)->Arg(1000)->Arg(10000);

void BM_DelongPaired(benchmark::State& state) {
    Rng rng(13);
    const ScoredSet a = random_set(state.range(0), rng);
    ScoredSet b = a;
    for (auto& s : b.scores) s += rng.normal(0.0, 0.2);
    for (auto _ : state) {
        ComparisonResult r = delong_paired_test(a, b);
        benchmark::DoNotOptimize(r.p_value);
    }
}
BENCHMARK(BM_DelongPaired)->Arg(100)->Arg(1000);

void BM_AnovaPosthoc(benchmark::State& state) {
    Rng rng(14);
    std::vector<std::vector<double>> groups(4);
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (std::int64_t i = 0; i < state.range(0); ++i)
            groups[g].push_back(rng.normal(0.1 * static_cast<double>(g), 1.0));
    for (auto _ : state) {
        AnovaResult r = anova_posthoc(groups);
        benchmark::DoNotOptimize(r.anova.p_value);
    }
}
BENCHMARK(BM_AnovaPosthoc)->Arg(10)->Arg(100);

}  // namespace

BENCHMARK_MAIN();
