#include <benchmark/benchmark.h>

#include "fbn/loss.hpp"
#include "fbn/model.hpp"
#include "fbn/phantom.hpp"

using namespace fbn;

namespace {

ModelConfig config_for(std::int64_t side) {
    ModelConfig cfg;
    if (side == 16) {
        cfg.backbone.embed_dim = 4;
        cfg.backbone.num_heads = {1, 1, 1, 1};
        cfg.backbone.window = 2;
        cfg.tafe.head_hidden = 8;
        cfg.cmd.conv_channels = 4;
        cfg.cmd.reduction = 2;
        cfg.cmd.spatial_kernel = 3;
        cfg.cmd.head_hidden = 8;
        cfg.fusion_hidden = 8;
    }
    cfg.backbone.input_size = {side, side, side};
    return cfg;
}

struct Fixture {
    ModelConfig cfg;
    Model model;
    Tensor batch, mask;
    std::vector<int> labels;

    explicit Fixture(std::int64_t side) : cfg(config_for(side)), model(cfg) {
        Rng rng(7);
        model.init(rng);
        PhantomSpec ps;
        ps.dims = {side, side, side};
        ps.tumor_center = {side / 2.0, side / 2.0, side / 2.0};
        ps.tumor_radii = {side / 4.0, side / 4.0, side / 4.0};
        ps.noise_sigma = 0.3;
        ps.seed = 5;
        const Case neg = generate_phantom(ps);
        ps.mismatch = true;
        ps.seed = 6;
        const Case pos = generate_phantom(ps);
        batch = batch_from_cases({&neg, &pos});
        mask = mask_from_cases({&neg, &pos});
        labels = {0, 1};
    }
};

void BM_ModelForwardEval(benchmark::State& state) {
    Fixture f(state.range(0));
    Rng rng(0);
    for (auto _ : state) {
        ModelOutput out = f.model.forward(f.batch, Mode::Eval, rng);
        benchmark::DoNotOptimize(out.logits.v.data());
    }
}
BENCHMARK(BM_ModelForwardEval)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_ModelTrainStep(benchmark::State& state) {
    Fixture f(state.range(0));
    Rng rng(0);
    for (auto _ : state) {
        f.model.zero_grad();
        ModelOutput out = f.model.forward(f.batch, Mode::Train, rng);
        const TotalLoss t =
            total_loss(out.seg.logits, f.mask, out.logits, f.labels, f.cfg.loss);
        f.model.backward(t.dcla_logits, t.dseg_logits);
        benchmark::DoNotOptimize(t.total);
    }
}
BENCHMARK(BM_ModelTrainStep)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_PhantomGeneration(benchmark::State& state) {
    PhantomSpec ps;
    ps.dims = {32, 32, 32};
    ps.noise_sigma = 0.5;
    ps.mismatch = true;
    std::uint64_t seed = 0;
    for (auto _ : state) {
        ps.seed = seed++;
        Case c = generate_phantom(ps);
        benchmark::DoNotOptimize(c.sequences[0].voxels.data());
    }
}
BENCHMARK(BM_PhantomGeneration)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
