#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fbn/checkpoint.hpp"
#include "fbn/errors.hpp"
#include "fbn/model.hpp"
#include "fbn/optim.hpp"
#include "gradcheck.hpp"

using namespace fbn;
using doctest::Approx;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model_config() {
    ModelConfig cfg;
    cfg.backbone.embed_dim = 4;
    cfg.backbone.depths = {1, 1, 1, 1};
    cfg.backbone.num_heads = {1, 1, 1, 1};
    cfg.backbone.window = 2;
    cfg.backbone.input_size = {16, 16, 16};
    cfg.tafe.head_hidden = 8;
    cfg.cmd.conv_channels = 4;
    cfg.cmd.reduction = 2;
    cfg.cmd.spatial_kernel = 3;
    cfg.cmd.head_hidden = 8;
    cfg.fusion_hidden = 8;
    return cfg;
}

Tensor random_batch(const ModelConfig& cfg, std::int64_t b, Rng& rng) {
    const auto& s = cfg.backbone.input_size;
    Tensor batch({b, 4, s[0], s[1], s[2]});
    gc::fill_uniform(batch, rng);
    return batch;
}

Tensor random_mask(const ModelConfig& cfg, std::int64_t b, Rng& rng) {
    const auto& s = cfg.backbone.input_size;
    Tensor mask({b, s[0], s[1], s[2]});
    for (auto& v : mask.v) v = static_cast<double>(rng.uniform_int(4));
    return mask;
}

fs::path temp_dir() {
    auto d = fs::temp_directory_path() / "fbn_model_test";
    fs::create_directories(d);
    return d;
}

}  // namespace

TEST_SUITE("fusion") {

TEST_CASE("concatenated width is twice the class count") {
    FusionHead fuse(2, 8);
    Rng rng(1);
    fuse.init(rng);
    CHECK(fuse.mlp().fc1.in_features() == 4);
    Tensor a({3, 2}), b({3, 2});
    gc::fill_uniform(a, rng);
    gc::fill_uniform(b, rng);
    Tensor out = fuse.forward(a, b, Mode::Eval, rng);
    CHECK(out.shape == std::vector<std::int64_t>{3, 2});

    Tensor bad({2, 2});
    CHECK_THROWS_AS(fuse.forward(a, bad, Mode::Eval, rng), Error);
}

TEST_CASE("hand-built pass-through weights reproduce the first stream") {
    // hidden pairs (relu(t), relu(-t)) recombined as their difference
    FusionHead fuse(2, 4);
    Rng rng(2);
    fuse.init(rng);
    Mlp& mlp = fuse.mlp();
    mlp.fc1.w.value.zero();
    mlp.fc1.b.value.zero();
    mlp.fc2.w.value.zero();
    mlp.fc2.b.value.zero();
    for (int j = 0; j < 2; ++j) {
        mlp.fc1.w.value[j * 4 + j] = 1.0;         // h_j = relu(t_j)
        mlp.fc1.w.value[(2 + j) * 4 + j] = -1.0;  // h_{2+j} = relu(-t_j)
        mlp.fc2.w.value[j * 4 + j] = 1.0;
        mlp.fc2.w.value[j * 4 + 2 + j] = -1.0;
    }
    Tensor t({2, 2}), c({2, 2});
    gc::fill_uniform(t, rng, -3.0, 3.0);
    gc::fill_uniform(c, rng, -3.0, 3.0);
    Tensor out = fuse.forward(t, c, Mode::Eval, rng);
    for (std::int64_t i = 0; i < t.numel(); ++i) CHECK(out[i] == Approx(t[i]).epsilon(1e-12));
}

TEST_CASE("zeroed weights collapse to zero logits") {
    FusionHead fuse(2, 8);
    Rng rng(3);
    fuse.init(rng);
    for (auto* p : fuse.params()) p->value.zero();
    Tensor a({2, 2}), b({2, 2});
    gc::fill_uniform(a, rng);
    gc::fill_uniform(b, rng);
    Tensor out = fuse.forward(a, b, Mode::Eval, rng);
    for (double v : out.v) CHECK(v == 0.0);
}

TEST_CASE("backward splits the gradient between the streams") {
    FusionHead fuse(2, 8);
    Rng init(4), rng(5);
    fuse.init(init);
    for (auto* p : fuse.params())
        for (auto& v : p->value.v) v += init.uniform(-0.03, 0.03);

    Tensor a({2, 2}), b({2, 2});
    gc::fill_uniform(a, rng);
    gc::fill_uniform(b, rng);

    gc::ScalarProbe probe;
    Tensor out = fuse.forward(a, b, Mode::Eval, rng);
    probe.match(out, rng);
    auto [da, db] = fuse.backward(probe.upstream(out));

    auto eval_a = [&] { return probe.loss(fuse.forward(a, b, Mode::Eval, rng)); };
    gc::check_tensor(eval_a, a, da, rng, 4, 1e-3, 1e-5);
    gc::check_tensor(eval_a, b, db, rng, 4, 1e-3, 1e-5);
}

}  // TEST_SUITE

TEST_SUITE("model") {

TEST_CASE("config validation catches inconsistent streams") {
    ModelConfig cfg = tiny_model_config();
    cfg.validate();

    ModelConfig off = cfg;
    off.tafe_on = false;
    off.cmd_on = false;
    CHECK_THROWS_AS(off.validate(), Error);

    ModelConfig ncls = cfg;
    ncls.cmd.n_cls = 3;
    CHECK_THROWS_AS(ncls.validate(), Error);

    ModelConfig fh = cfg;
    fh.fusion_hidden = 0;
    CHECK_THROWS_AS(fh.validate(), Error);
}

TEST_CASE("signature changes with the architecture") {
    ModelConfig a = tiny_model_config();
    ModelConfig b = a;
    CHECK(a.signature() == b.signature());
    b.backbone.embed_dim = 8;
    CHECK(a.signature() != b.signature());
    ModelConfig c = a;
    c.tafe_on = false;
    CHECK(a.signature() != c.signature());
}

TEST_CASE("forward emits every advertised output") {
    ModelConfig cfg = tiny_model_config();
    Model m(cfg);
    Rng rng(7);
    m.init(rng);
    Tensor batch = random_batch(cfg, 2, rng);
    ModelOutput out = m.forward(batch, Mode::Eval, rng);

    CHECK(out.seg.logits.shape == std::vector<std::int64_t>{2, 4, 16, 16, 16});
    CHECK(out.seg.tumor_prob.shape == std::vector<std::int64_t>{2, 1, 16, 16, 16});
    CHECK(out.tafe_logits.shape == std::vector<std::int64_t>{2, 2});
    CHECK(out.cmd_logits.shape == std::vector<std::int64_t>{2, 2});
    CHECK(out.logits.shape == std::vector<std::int64_t>{2, 2});
    CHECK(out.pyramid.x[0].shape == std::vector<std::int64_t>{2, 4, 8, 8, 8});
    CHECK(out.pyramid.x[3].shape == std::vector<std::int64_t>{2, 32, 1, 1, 1});
    CHECK(all_finite(out.logits));
}

TEST_CASE("single-stream ablations route that stream to the final logits") {
    Rng data(8);
    ModelConfig base = tiny_model_config();
    Tensor batch = random_batch(base, 1, data);

    ModelConfig tafe_only = base;
    tafe_only.cmd_on = false;
    Model mt(tafe_only);
    Rng r1(9);
    mt.init(r1);
    ModelOutput ot = mt.forward(batch, Mode::Eval, r1);
    CHECK(ot.logits.v == ot.tafe_logits.v);
    CHECK(ot.cmd_logits.numel() == 0);

    ModelConfig cmd_only = base;
    cmd_only.tafe_on = false;
    Model mc(cmd_only);
    Rng r2(9);
    mc.init(r2);
    ModelOutput oc = mc.forward(batch, Mode::Eval, r2);
    CHECK(oc.logits.v == oc.cmd_logits.v);
    CHECK(oc.tafe_logits.numel() == 0);
}

TEST_CASE("identical seeds give identical models") {
    ModelConfig cfg = tiny_model_config();
    Model a(cfg), b(cfg);
    Rng ra(11), rb(11), data(12);
    a.init(ra);
    b.init(rb);
    Tensor batch = random_batch(cfg, 1, data);
    ModelOutput oa = a.forward(batch, Mode::Eval, ra);
    ModelOutput ob = b.forward(batch, Mode::Eval, rb);
    CHECK(oa.logits.v == ob.logits.v);
    CHECK(oa.seg.logits.v == ob.seg.logits.v);
}

TEST_CASE("total-loss gradients match finite differences across all submodules") {
    ModelConfig cfg = tiny_model_config();
    Model m(cfg);
    Rng init(13);
    m.init(init);
    for (auto* p : m.params())
        for (auto& v : p->value.v) v += init.uniform(-0.03, 0.03);

    Rng data(14);
    Tensor batch = random_batch(cfg, 1, data);
    Tensor mask = random_mask(cfg, 1, data);
    std::vector<int> y{1};
    LossConfig lcfg = cfg.loss;
    Rng quiet(0);

    auto eval = [&] {
        ModelOutput out = m.forward(batch, Mode::Eval, quiet);
        return total_loss(out.seg.logits, mask, out.logits, y, lcfg).total;
    };

    ModelOutput out = m.forward(batch, Mode::Eval, quiet);
    TotalLoss t = total_loss(out.seg.logits, mask, out.logits, y, lcfg);
    m.zero_grad();
    m.backward(t.dcla_logits, t.dseg_logits);

    Rng pick(15);
    for (auto* p : m.params()) gc::check_tensor(eval, p->value, p->grad, pick, 2, 1e-3, 1e-5);
}

TEST_CASE("a few optimizer steps on one batch reduce the loss") {
    ModelConfig cfg = tiny_model_config();
    Model m(cfg);
    Rng rng(17);
    m.init(rng);
    Tensor batch = random_batch(cfg, 2, rng);
    Tensor mask = random_mask(cfg, 2, rng);
    std::vector<int> y{1, 0};

    AdamConfig acfg;
    acfg.lr = 1e-3;
    Adam opt(m.params(), acfg);

    double first = 0.0, last = 0.0;
    for (int step = 0; step < 10; ++step) {
        ModelOutput out = m.forward(batch, Mode::Train, rng);
        TotalLoss t = total_loss(out.seg.logits, mask, out.logits, y, cfg.loss);
        if (step == 0) first = t.total;
        last = t.total;
        opt.zero_grad();
        m.backward(t.dcla_logits, t.dseg_logits);
        opt.step();
    }
    CHECK(last < first);
}

TEST_CASE("case batching collects volumes, masks and labels") {
    Case a, b;
    a.id = "a";
    b.id = "b";
    for (int q = 0; q < 4; ++q) {
        a.sequences[q] = Volume(2, 2, 2);
        b.sequences[q] = Volume(2, 2, 2);
        a.sequences[q].voxels.assign(8, float(q));
        b.sequences[q].voxels.assign(8, float(10 + q));
    }
    a.mask = Volume(2, 2, 2);
    a.mask->voxels[3] = 2.0f;
    b.mask = Volume(2, 2, 2);
    a.idh_label = 1;
    b.idh_label = 0;

    std::vector<const Case*> cases{&a, &b};
    Tensor batch = batch_from_cases(cases);
    CHECK(batch.shape == std::vector<std::int64_t>{2, 4, 2, 2, 2});
    CHECK(batch[0] == 0.0);
    CHECK(batch[8] == 1.0);   // a, t1c
    CHECK(batch[32] == 10.0); // b, t1

    Tensor mask = mask_from_cases(cases);
    CHECK(mask.shape == std::vector<std::int64_t>{2, 2, 2, 2});
    CHECK(mask[3] == 2.0);

    CHECK(labels_from_cases(cases) == std::vector<int>{1, 0});

    b.mask.reset();
    CHECK_THROWS_AS(mask_from_cases(cases), Error);
    b.idh_label.reset();
    CHECK_THROWS_AS(labels_from_cases(cases), Error);
    CHECK_THROWS_AS(batch_from_cases({}), Error);
}

}  // TEST_SUITE

TEST_SUITE("optim") {

TEST_CASE("config validation") {
    AdamConfig bad;
    bad.lr = 0.0;
    CHECK_THROWS_AS(Adam({}, bad), Error);
    AdamConfig b2;
    b2.beta2 = 1.0;
    CHECK_THROWS_AS(Adam({}, b2), Error);
}

TEST_CASE("first update has magnitude ~lr and the right sign") {
    Parameter p("p", {1});
    p.value[0] = 5.0;
    AdamConfig cfg;
    cfg.lr = 0.1;
    Adam opt({&p}, cfg);
    p.grad[0] = 3.0;
    opt.step();
    CHECK(p.value[0] == Approx(5.0 - 0.1).epsilon(1e-7));

    p.grad[0] = -3.0;
    // fresh optimizer so the moments start clean
    Parameter q("q", {1});
    q.value[0] = 5.0;
    q.grad[0] = -3.0;
    Adam opt2({&q}, cfg);
    opt2.step();
    CHECK(q.value[0] == Approx(5.0 + 0.1).epsilon(1e-7));
}

TEST_CASE("drives a quadratic toward its minimum") {
    Parameter p("p", {2});
    p.value[0] = 1.5;
    p.value[1] = -2.0;
    AdamConfig cfg;
    cfg.lr = 0.05;
    Adam opt({&p}, cfg);
    for (int i = 0; i < 400; ++i) {
        p.grad[0] = 2.0 * p.value[0];
        p.grad[1] = 2.0 * p.value[1];
        opt.step();
    }
    CHECK(std::abs(p.value[0]) < 0.05);
    CHECK(std::abs(p.value[1]) < 0.05);
    CHECK(opt.steps() == 400);
}

}  // TEST_SUITE

TEST_SUITE("checkpoint") {

TEST_CASE("digest algorithm matches its reference constants") {
    CHECK(fnv1a64("") == 0xcbf29ce484222325ull);
    CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
}

TEST_CASE("save then load reproduces the forward pass bitwise") {
    ModelConfig cfg = tiny_model_config();
    Model a(cfg), b(cfg);
    Rng ra(21), rb(22), data(23);
    a.init(ra);
    b.init(rb);

    auto path = temp_dir() / "roundtrip.ckpt";
    save_checkpoint(path, a.params(), cfg.signature());
    LoadReport rep = load_checkpoint(path, b.params(), cfg.signature(), true);
    CHECK(rep.clean());

    Tensor batch = random_batch(cfg, 1, data);
    ModelOutput oa = a.forward(batch, Mode::Eval, ra);
    ModelOutput ob = b.forward(batch, Mode::Eval, rb);
    CHECK(oa.logits.v == ob.logits.v);
    CHECK(oa.seg.logits.v == ob.seg.logits.v);
    CHECK(oa.cmd_logits.v == ob.cmd_logits.v);
}

TEST_CASE("wrong architecture is rejected strictly") {
    ModelConfig cfg = tiny_model_config();
    Model a(cfg);
    Rng rng(25);
    a.init(rng);
    auto path = temp_dir() / "wrong_arch.ckpt";
    save_checkpoint(path, a.params(), cfg.signature());

    ModelConfig wide = cfg;
    wide.backbone.embed_dim = 8;
    Model b(wide);
    b.init(rng);
    CHECK_THROWS_AS(load_checkpoint(path, b.params(), wide.signature(), true), Error);
}

TEST_CASE("non-strict load keeps init for mismatched tensors and lists them") {
    ModelConfig cfg = tiny_model_config();
    Model a(cfg);
    Rng ra(27);
    a.init(ra);
    auto path = temp_dir() / "partial.ckpt";
    save_checkpoint(path, a.params(), cfg.signature());

    ModelConfig other = cfg;
    other.tafe.head_hidden = 16;  // tafe head tensors change shape
    Model b(other);
    Rng rb(28);
    b.init(rb);
    std::vector<Tensor> before;
    for (auto* p : b.params()) before.push_back(p->value);

    LoadReport rep = load_checkpoint(path, b.params(), other.signature(), false);
    CHECK(!rep.mismatched.empty());
    CHECK(rep.missing.empty());
    CHECK(rep.unexpected.empty());

    auto params = b.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        bool mismatched = false;
        for (const auto& n : rep.mismatched) mismatched |= (n == params[i]->name);
        if (mismatched)
            CHECK(params[i]->value.v == before[i].v);  // untouched
    }
    // a matched tensor took the stored values
    auto pa = a.params();
    CHECK(params[0]->name == pa[0]->name);
    CHECK(params[0]->value.v == pa[0]->value.v);
}

TEST_CASE("stream mismatch shows up as missing or unexpected tensors") {
    ModelConfig full = tiny_model_config();
    ModelConfig lean = full;
    lean.cmd_on = false;

    Model a(lean);
    Rng rng(29);
    a.init(rng);
    auto path = temp_dir() / "lean.ckpt";
    save_checkpoint(path, a.params(), lean.signature());

    Model b(full);
    b.init(rng);
    LoadReport rep = load_checkpoint(path, b.params(), full.signature(), false);
    CHECK(!rep.missing.empty());  // cmd + fusion tensors absent from the file
    for (const auto& n : rep.missing)
        CHECK((n.rfind("cmd.", 0) == 0 || n.rfind("fusion.", 0) == 0));

    CHECK_THROWS_AS(load_checkpoint(path, b.params(), full.signature(), true), Error);

    // reversed direction: the file has tensors the lean model does not want
    auto path2 = temp_dir() / "full.ckpt";
    save_checkpoint(path2, b.params(), full.signature());
    Model c(lean);
    c.init(rng);
    LoadReport rep2 = load_checkpoint(path2, c.params(), lean.signature(), false);
    CHECK(!rep2.unexpected.empty());
}

}  // TEST_SUITE
