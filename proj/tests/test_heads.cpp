#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fbn/cmd.hpp"
#include "fbn/errors.hpp"
#include "fbn/phantom.hpp"
#include "fbn/tafe.hpp"
#include "gradcheck.hpp"

using namespace fbn;
using doctest::Approx;

namespace {

FeaturePyramid random_pyramid(int embed_dim, std::int64_t batch, Rng& rng) {
    FeaturePyramid pyr;
    const std::int64_t spatial[4] = {4, 2, 2, 1};
    for (int i = 0; i < 4; ++i) {
        std::int64_t ch = std::int64_t(embed_dim) << i;
        pyr.x[i] = Tensor({batch, ch, spatial[i], spatial[i], spatial[i]});
        gc::fill_uniform(pyr.x[i], rng);
    }
    return pyr;
}

}  // namespace

TEST_SUITE("tafe") {

TEST_CASE("gap averages spatial positions") {
    Tensor c = Tensor::full({2, 3, 4, 4, 4}, 2.5);
    Tensor g = gap(c);
    CHECK(g.shape == std::vector<std::int64_t>{2, 3});
    for (double v : g.v) CHECK(v == Approx(2.5));

    Rng rng(1);
    Tensor a({2, 3, 4, 4, 4}), b({2, 3, 4, 4, 4});
    gc::fill_uniform(a, rng);
    gc::fill_uniform(b, rng);
    Tensor sum(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i) sum.v[i] = a.v[i] + b.v[i];
    Tensor ga = gap(a), gb = gap(b), gs = gap(sum);
    for (std::int64_t i = 0; i < gs.numel(); ++i)
        CHECK(gs.v[i] == Approx(ga.v[i] + gb.v[i]).epsilon(1e-12));
}

TEST_CASE("gap is invariant to spatial permutation") {
    Rng rng(2);
    Tensor x({1, 2, 3, 3, 3});
    gc::fill_uniform(x, rng);
    Tensor shuffled = x;
    // reverse every channel's spatial block
    for (int c = 0; c < 2; ++c)
        std::reverse(shuffled.v.begin() + c * 27, shuffled.v.begin() + (c + 1) * 27);
    CHECK(gap(x).v[0] == Approx(gap(shuffled).v[0]).epsilon(1e-12));
    CHECK(gap(x).v[1] == Approx(gap(shuffled).v[1]).epsilon(1e-12));
}

TEST_CASE("aggregate widths follow the channel-doubling law") {
    Rng rng(3);
    FeaturePyramid pyr = random_pyramid(8, 2, rng);

    TafeConfig d1;
    d1.depth = 1;
    CHECK(d1.feature_width(8) == 64);
    TafeHead h1(d1, 8);
    CHECK(h1.aggregate(pyr).shape == std::vector<std::int64_t>{2, 64});

    TafeConfig d4;
    d4.depth = 4;
    CHECK(d4.feature_width(8) == 120);
    TafeHead h4(d4, 8);
    CHECK(h4.aggregate(pyr).shape == std::vector<std::int64_t>{2, 120});

    // deepest stage sits at the tail of the concatenation
    Tensor agg = h4.aggregate(pyr);
    Tensor g4 = gap(pyr.x[3]);
    for (int c = 0; c < 64; ++c) CHECK(agg.v[120 - 64 + c] == Approx(g4.v[c]));
}

TEST_CASE("aggregate is batch equivariant") {
    Rng rng(4);
    FeaturePyramid pyr = random_pyramid(4, 2, rng);
    FeaturePyramid swapped;
    for (int i = 0; i < 4; ++i) {
        swapped.x[i] = pyr.x[i];
        const std::int64_t half = pyr.x[i].numel() / 2;
        std::copy(pyr.x[i].v.begin() + half, pyr.x[i].v.end(), swapped.x[i].v.begin());
        std::copy(pyr.x[i].v.begin(), pyr.x[i].v.begin() + half, swapped.x[i].v.begin() + half);
    }
    TafeConfig cfg;
    TafeHead a(cfg, 4), b(cfg, 4);
    Tensor ya = a.aggregate(pyr);
    Tensor yb = b.aggregate(swapped);
    const std::int64_t w = ya.size(1);
    for (std::int64_t c = 0; c < w; ++c) {
        CHECK(ya.v[c] == Approx(yb.v[w + c]));
        CHECK(ya.v[w + c] == Approx(yb.v[c]));
    }
}

TEST_CASE("classifier modes") {
    TafeConfig cfg;
    cfg.depth = 2;
    cfg.head_hidden = 8;
    Rng rng(5);
    FeaturePyramid pyr = random_pyramid(2, 1, rng);

    TafeHead zero(cfg, 2);  // params stay zero without init
    Rng r0(0);
    Tensor logits = zero.forward(pyr, Mode::Eval, r0);
    CHECK(logits.shape == std::vector<std::int64_t>{1, 2});
    for (double v : logits.v) CHECK(v == 0.0);

    TafeHead head(cfg, 2);
    Rng init(77);
    head.init(init);
    Rng e1(0), e2(0);
    Tensor a = head.forward(pyr, Mode::Eval, e1);
    Tensor b = head.forward(pyr, Mode::Eval, e2);
    CHECK(a.v == b.v);

    TafeHead twin(cfg, 2);
    Rng init2(77);
    twin.init(init2);
    Rng t1(42), t2(42);
    Tensor ta = head.forward(pyr, Mode::Train, t1);
    Tensor tb = twin.forward(pyr, Mode::Train, t2);
    CHECK(ta.v == tb.v);
}

TEST_CASE("classifier rejects a width mismatch") {
    TafeConfig cfg;
    TafeHead head(cfg, 4);
    Rng rng(6);
    Tensor bad({1, 3});
    CHECK_THROWS_AS(head.classify(bad, Mode::Eval, rng), Error);
}

TEST_CASE("aggregate+classify gradient matches finite differences") {
    TafeConfig cfg;
    cfg.depth = 4;
    cfg.head_hidden = 8;
    Rng rng(7);
    TafeHead head(cfg, 2);
    head.init(rng);
    FeaturePyramid pyr = random_pyramid(2, 1, rng);
    Rng quiet(0);

    gc::ScalarProbe probe;
    auto eval = [&] { return probe.loss(head.forward(pyr, Mode::Eval, quiet)); };
    Tensor y = head.forward(pyr, Mode::Eval, quiet);
    probe.match(y, rng);
    gc::zero_grads(head.params());
    FeaturePyramid dpyr;
    for (int i = 0; i < 4; ++i) dpyr.x[i] = Tensor(pyr.x[i].shape);
    head.backward(probe.upstream(y), dpyr);

    for (int i = 0; i < 4; ++i) gc::check_tensor(eval, pyr.x[i], dpyr.x[i], rng, 24);
    for (auto* p : head.params()) gc::check_tensor(eval, p->value, p->grad, rng, 32);
}

}  // TEST_SUITE tafe

TEST_SUITE("cmd") {

TEST_CASE("config invariants") {
    CmdConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.gamma = 1.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = CmdConfig{};
    cfg.floor = 1.0;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = CmdConfig{};
    cfg.reduction = 3;  // does not divide 16
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = CmdConfig{};
    cfg.spatial_kernel = 4;
    CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("soft gate") {
    Rng rng(11);
    Tensor v({1, 1, 2, 2, 2});
    gc::fill_uniform(v, rng);
    Tensor ones = Tensor::full(v.shape, 1.0);
    CHECK(soft_gate(v, ones, 0.1).v == v.v);

    Tensor zeros(v.shape);
    Tensor gated = soft_gate(v, zeros, 0.1);
    for (std::int64_t i = 0; i < v.numel(); ++i) CHECK(gated.v[i] == Approx(0.1 * v.v[i]));

    Tensor near = soft_gate(v, zeros, 0.9999);
    for (std::int64_t i = 0; i < v.numel(); ++i)
        CHECK(near.v[i] == Approx(v.v[i]).epsilon(2e-4));

    Tensor bad({1, 1, 2, 2, 1});
    CHECK_THROWS_AS(soft_gate(v, bad, 0.1), Error);
}

TEST_CASE("differential") {
    Rng rng(12);
    Tensor a({2, 3, 2, 2, 2}), b({2, 3, 2, 2, 2});
    gc::fill_uniform(a, rng);
    gc::fill_uniform(b, rng);

    Tensor same = differential(a, a, 2.0);
    for (double v : same.v) CHECK(v == 0.0);

    Tensor half = Tensor::full(a.shape, 0.5);
    Tensor zero(a.shape);
    CHECK(differential(half, zero, 2.0).v[0] == Approx(1.0));

    Tensor ab = differential(a, b, 3.0);
    Tensor ba = differential(b, a, 3.0);
    for (std::int64_t i = 0; i < ab.numel(); ++i) CHECK(ab.v[i] == Approx(-ba.v[i]));

    CHECK_THROWS_AS(differential(a, b, 1.0), Error);
}

TEST_CASE("apply_mismatch residual form") {
    Rng rng(13);
    Tensor f({1, 2, 2, 2, 2}), g({1, 2, 2, 2, 2});
    gc::fill_uniform(f, rng);
    gc::fill_uniform(g, rng);
    Tensor ca0({1, 2});
    Tensor sa1 = Tensor::full({1, 1, 2, 2, 2}, 0.7);

    auto [t0, f0] = apply_mismatch(f, g, ca0, sa1);  // CA = 0 -> A = 0
    CHECK(t0.v == f.v);
    CHECK(f0.v == g.v);

    Tensor ca1 = Tensor::full({1, 2}, 1.0);
    Tensor sa_full = Tensor::full({1, 1, 2, 2, 2}, 1.0);
    auto [t2, f2] = apply_mismatch(f, g, ca1, sa_full);  // A = 1 -> F' = 2F
    for (std::int64_t i = 0; i < f.numel(); ++i) {
        CHECK(t2.v[i] == Approx(2.0 * f.v[i]));
        CHECK(f2.v[i] == Approx(2.0 * g.v[i]));
    }

    Tensor fz({1, 2, 2, 2, 2});
    auto [tz, _] = apply_mismatch(fz, fz, ca1, sa_full);
    for (double v : tz.v) CHECK(v == 0.0);
}

TEST_CASE("zero-initialized module: attention at 1/2, zero logits") {
    CmdConfig cfg;
    cfg.conv_channels = 4;
    cfg.reduction = 2;
    cfg.spatial_kernel = 3;
    cfg.head_hidden = 4;
    CmdModule mod(cfg);  // params all zero without init
    Rng rng(14), quiet(0);
    Tensor t2({1, 1, 8, 8, 8}), fl({1, 1, 8, 8, 8}), tp({1, 1, 8, 8, 8});
    gc::fill_uniform(t2, rng);
    gc::fill_uniform(fl, rng);
    gc::fill_uniform(tp, rng, 0.0, 1.0);

    Tensor logits = mod.forward(t2, fl, tp, Mode::Eval, quiet);
    CHECK(logits.shape == std::vector<std::int64_t>{1, 2});
    for (double v : logits.v) CHECK(v == 0.0);
    for (double v : mod.features().ca.v) CHECK(v == Approx(0.5));
    for (double v : mod.features().sa.v) CHECK(v == Approx(0.5));
}

TEST_CASE("attention maps stay strictly inside (0,1)") {
    CmdConfig cfg;
    cfg.conv_channels = 4;
    cfg.reduction = 2;
    cfg.spatial_kernel = 3;
    CmdModule mod(cfg);
    Rng init(15), quiet(0);
    mod.init(init);
    Tensor t2({2, 1, 8, 8, 8}), fl({2, 1, 8, 8, 8}), tp({2, 1, 8, 8, 8});
    Rng rng(16);
    gc::fill_uniform(t2, rng, -2.0, 2.0);
    gc::fill_uniform(fl, rng, -2.0, 2.0);
    gc::fill_uniform(tp, rng, 0.0, 1.0);
    mod.forward(t2, fl, tp, Mode::Eval, quiet);
    for (double v : mod.features().ca.v) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    for (double v : mod.features().sa.v) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    for (double v : mod.features().a.v) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("doubling gamma doubles the differential features exactly") {
    CmdConfig c2;
    c2.conv_channels = 4;
    c2.reduction = 2;
    c2.spatial_kernel = 3;
    CmdConfig c4 = c2;
    c4.gamma = 4.0;
    CmdModule m2(c2), m4(c4);
    Rng i1(17), i2(17), quiet(0);
    m2.init(i1);
    m4.init(i2);

    Rng rng(18);
    Tensor t2({1, 1, 8, 8, 8}), fl({1, 1, 8, 8, 8}), tp({1, 1, 8, 8, 8});
    gc::fill_uniform(t2, rng);
    gc::fill_uniform(fl, rng);
    gc::fill_uniform(tp, rng, 0.0, 1.0);
    m2.forward(t2, fl, tp, Mode::Eval, quiet);
    m4.forward(t2, fl, tp, Mode::Eval, quiet);
    for (std::int64_t i = 0; i < m2.features().f_diff.numel(); ++i)
        CHECK(m4.features().f_diff.v[i] == 2.0 * m2.features().f_diff.v[i]);
}

TEST_CASE("stream order matters") {
    CmdConfig cfg;
    cfg.conv_channels = 4;
    cfg.reduction = 2;
    cfg.spatial_kernel = 3;
    CmdModule mod(cfg);
    Rng init(19), quiet(0);
    mod.init(init);
    Rng rng(20);
    Tensor t2({1, 1, 8, 8, 8}), fl({1, 1, 8, 8, 8}), tp({1, 1, 8, 8, 8});
    gc::fill_uniform(t2, rng);
    gc::fill_uniform(fl, rng);
    gc::fill_uniform(tp, rng, 0.2, 0.9);
    Tensor ab = mod.forward(t2, fl, tp, Mode::Eval, quiet);
    Tensor ba = mod.forward(fl, t2, tp, Mode::Eval, quiet);
    double gap_max = 0.0;
    for (std::int64_t i = 0; i < ab.numel(); ++i)
        gap_max = std::max(gap_max, std::abs(ab.v[i] - ba.v[i]));
    CHECK(gap_max > 1e-8);
}

TEST_CASE("end-to-end gradient matches finite differences") {
    CmdConfig cfg;
    cfg.conv_channels = 4;
    cfg.reduction = 2;
    cfg.spatial_kernel = 3;
    cfg.head_hidden = 8;
    CmdModule mod(cfg);
    Rng init(21), quiet(0);
    mod.init(init);
    // jitter every parameter (biases included) so no ReLU pre-activation sits
    // on its kink within the finite-difference step
    for (auto* p : mod.params())
        for (auto& v : p->value.v) v += init.uniform(-0.03, 0.03);

    Rng rng(22);
    Tensor t2({1, 1, 8, 8, 8}), fl({1, 1, 8, 8, 8}), tp({1, 1, 8, 8, 8});
    gc::fill_uniform(t2, rng);
    gc::fill_uniform(fl, rng);
    gc::fill_uniform(tp, rng, 0.2, 0.9);  // clear of the gating floor

    gc::ScalarProbe probe;
    auto eval = [&] { return probe.loss(mod.forward(t2, fl, tp, Mode::Eval, quiet)); };
    Tensor y = mod.forward(t2, fl, tp, Mode::Eval, quiet);
    probe.match(y, rng);
    gc::zero_grads(mod.params());
    Tensor dtp = mod.backward(probe.upstream(y));

    gc::check_tensor(eval, tp, dtp, rng, 24);
    for (auto* p : mod.params()) gc::check_tensor(eval, p->value, p->grad, rng, 16);
}

TEST_CASE("differential features detect the mismatch signal") {
    PhantomSpec pos;
    pos.dims = {24, 24, 24};
    pos.tumor_center = {12, 12, 12};
    pos.tumor_radii = {6, 6, 6};
    pos.mismatch = true;
    pos.mismatch_contrast = 1.5;
    pos.noise_sigma = 0.0;
    pos.seed = 501;
    PhantomSpec neg = pos;
    neg.mismatch = false;
    neg.boundary_sharpness = 3.0;
    neg.seed = 502;

    Case cp = generate_phantom(pos);
    Case cn = generate_phantom(neg);

    auto to_tensor = [](const Volume& v) {
        Tensor t({1, 1, v.dims[0], v.dims[1], v.dims[2]});
        Volume z = zscore_normalize(v, NormalizeRegion::NonzeroVoxels);
        for (std::int64_t i = 0; i < v.numel(); ++i) t.v[i] = z.voxels[std::size_t(i)];
        return t;
    };
    auto truth_prob = [](const Case& c) {
        Tensor t({1, 1, c.dims()[0], c.dims()[1], c.dims()[2]});
        for (std::int64_t i = 0; i < c.mask->numel(); ++i)
            t.v[i] = c.mask->voxels[std::size_t(i)] > 0.0f ? 1.0 : 0.0;
        return t;
    };
    // tumor occupancy at the 1/4-resolution feature grid
    auto feature_mask = [](const Case& c) {
        const std::int64_t fd = c.dims()[0] / 4;
        std::vector<char> keep(std::size_t(fd * fd * fd), 0);
        for (std::int64_t z = 0; z < c.dims()[0]; ++z)
            for (std::int64_t y = 0; y < c.dims()[1]; ++y)
                for (std::int64_t x = 0; x < c.dims()[2]; ++x)
                    if (c.mask->at(z, y, x) > 0.0f && z / 4 < fd && y / 4 < fd && x / 4 < fd)
                        keep[std::size_t(((z / 4) * fd + y / 4) * fd + x / 4)] = 1;
        return keep;
    };

    CmdConfig cfg;
    cfg.conv_channels = 8;
    cfg.reduction = 2;
    cfg.spatial_kernel = 3;
    Rng quiet(0);
    double sum_pos = 0.0, sum_neg = 0.0;
    const int n_seeds = 12;
    for (int s = 0; s < n_seeds; ++s) {
        CmdModule mod(cfg);
        Rng init(1000 + s);
        mod.init(init);
        auto run = [&](const Case& c, const std::vector<char>& keep) {
            Tensor t2 = to_tensor(c.seq(Sequence::T2));
            Tensor fl = to_tensor(c.seq(Sequence::Flair));
            Tensor tp = truth_prob(c);
            mod.forward(t2, fl, tp, Mode::Eval, quiet);
            const Tensor& fd = mod.features().f_diff;
            const std::int64_t ch = fd.size(1), S = fd.numel() / ch;
            double acc = 0.0;
            std::int64_t n = 0;
            for (std::int64_t cc = 0; cc < ch; ++cc)
                for (std::int64_t i = 0; i < S; ++i)
                    if (keep[std::size_t(i)]) {
                        acc += std::abs(fd.v[cc * S + i]);
                        ++n;
                    }
            return acc / double(n);
        };
        sum_pos += run(cp, feature_mask(cp));
        sum_neg += run(cn, feature_mask(cn));
    }
    CHECK(sum_pos / n_seeds > sum_neg / n_seeds);
}

}  // TEST_SUITE cmd
