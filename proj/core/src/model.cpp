#include "fbn/model.hpp"

#include <sstream>

namespace fbn {

namespace {

// (B, C, spatial...) -> (B, 1, spatial...) copy of channel c.
Tensor slice_channel(const Tensor& x, std::int64_t c) {
    const std::int64_t b = x.size(0), ch = x.size(1);
    const std::int64_t s = x.numel() / (b * ch);
    std::vector<std::int64_t> shape = x.shape;
    shape[1] = 1;
    Tensor out(shape);
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < s; ++j) out[i * s + j] = x[(i * ch + c) * s + j];
    return out;
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_shape(a.rank() == 2 && b.rank() == 2 && a.size(0) == b.size(0),
                  "fusion inputs must be (B, n_cls) with equal batch: " + shape_str(a.shape) +
                      " vs " + shape_str(b.shape));
    const std::int64_t n = a.size(0), wa = a.size(1), wb = b.size(1);
    Tensor out({n, wa + wb});
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < wa; ++j) out[i * (wa + wb) + j] = a[i * wa + j];
        for (std::int64_t j = 0; j < wb; ++j) out[i * (wa + wb) + wa + j] = b[i * wb + j];
    }
    return out;
}

}  // namespace

FusionHead::FusionHead(int n_cls, int hidden)
    : n_cls_(n_cls), mlp_("fusion", 2 * n_cls, hidden, n_cls) {}

void FusionHead::init(Rng& rng) { mlp_.init(rng); }

ParamRefs FusionHead::params() { return mlp_.params(); }

Tensor FusionHead::forward(const Tensor& c_tafe, const Tensor& c_cmd, Mode mode, Rng& rng) {
    require_shape(c_tafe.rank() == 2 && c_tafe.size(1) == n_cls_,
                  "fusion expects (B," + std::to_string(n_cls_) + ") logits, got " +
                      shape_str(c_tafe.shape));
    require_shape(c_cmd.same_shape(c_tafe), "fusion stream shapes differ: " +
                                                shape_str(c_tafe.shape) + " vs " +
                                                shape_str(c_cmd.shape));
    return mlp_.forward(concat_cols(c_tafe, c_cmd), mode, rng);
}

std::pair<Tensor, Tensor> FusionHead::backward(const Tensor& dfinal) {
    Tensor dcat = mlp_.backward(dfinal);
    const std::int64_t b = dcat.size(0);
    Tensor da({b, n_cls_}), db({b, n_cls_});
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < n_cls_; ++j) {
            da[i * n_cls_ + j] = dcat[i * 2 * n_cls_ + j];
            db[i * n_cls_ + j] = dcat[i * 2 * n_cls_ + n_cls_ + j];
        }
    return {std::move(da), std::move(db)};
}

void ModelConfig::validate() const {
    backbone.validate();
    tafe.validate();
    cmd.validate();
    loss.validate();
    if (!tafe_on && !cmd_on)
        raise(ErrorCode::ConfigError, "at least one classification stream must be enabled");
    if (tafe.n_cls != cmd.n_cls)
        raise(ErrorCode::ConfigError,
              "stream class counts differ: tafe " + std::to_string(tafe.n_cls) + ", cmd " +
                  std::to_string(cmd.n_cls));
    if (fusion_hidden < 1) raise(ErrorCode::ConfigError, "fusion_hidden must be >= 1");
    if (cmd_on && backbone.in_channels != 4)
        raise(ErrorCode::ConfigError,
              "the cross-modality stream needs the 4-sequence input layout");
}

std::string ModelConfig::signature() const {
    std::ostringstream s;
    s << "fbn1"
      << "|in" << backbone.in_channels << "|embed" << backbone.embed_dim << "|depths";
    for (int d : backbone.depths) s << d << ",";
    s << "|heads";
    for (int h : backbone.num_heads) s << h << ",";
    s << "|win" << backbone.window << "|input" << backbone.input_size[0] << "x"
      << backbone.input_size[1] << "x" << backbone.input_size[2] << "|kind"
      << (backbone.block_kind == BlockKind::Attention ? "attn" : "conv");
    s << "|tafe" << (tafe_on ? 1 : 0) << ":" << tafe.depth << ":" << tafe.head_hidden << ":"
      << tafe.n_cls;
    s << "|cmd" << (cmd_on ? 1 : 0) << ":" << cmd.conv_channels << ":" << cmd.reduction << ":"
      << cmd.spatial_kernel << ":" << cmd.head_hidden << ":" << cmd.n_cls;
    s << "|fuse" << fusion_hidden;
    return s.str();
}

Model::Model(const ModelConfig& cfg)
    : cfg_(cfg),
      encoder_(cfg.backbone),
      decoder_(cfg.backbone),
      tafe_(cfg.tafe, cfg.backbone.embed_dim),
      cmd_(cfg.cmd),
      fusion_(cfg.tafe.n_cls, cfg.fusion_hidden) {
    cfg_.validate();
}

void Model::init(Rng& rng) {
    encoder_.init(rng);
    decoder_.init(rng);
    tafe_.init(rng);
    cmd_.init(rng);
    fusion_.init(rng);
}

ParamRefs Model::params() {
    ParamRefs all;
    for (auto* p : encoder_.params()) all.push_back(p);
    for (auto* p : decoder_.params()) all.push_back(p);
    if (cfg_.tafe_on)
        for (auto* p : tafe_.params()) all.push_back(p);
    if (cfg_.cmd_on)
        for (auto* p : cmd_.params()) all.push_back(p);
    if (cfg_.tafe_on && cfg_.cmd_on)
        for (auto* p : fusion_.params()) all.push_back(p);
    return all;
}

void Model::zero_grad() {
    for (auto* p : params()) p->grad.zero();
}

ModelOutput Model::forward(const Tensor& batch, Mode mode, Rng& rng) {
    ModelOutput out;
    out.pyramid = encoder_.forward(batch);
    out.seg = make_seg_output(decoder_.forward(out.pyramid));
    if (cfg_.tafe_on) out.tafe_logits = tafe_.forward(out.pyramid, mode, rng);
    if (cfg_.cmd_on) {
        Tensor v_t2 = slice_channel(batch, static_cast<int>(Sequence::T2));
        Tensor v_fl = slice_channel(batch, static_cast<int>(Sequence::Flair));
        out.cmd_logits = cmd_.forward(v_t2, v_fl, out.seg.tumor_prob, mode, rng);
    }
    if (cfg_.tafe_on && cfg_.cmd_on)
        out.logits = fusion_.forward(out.tafe_logits, out.cmd_logits, mode, rng);
    else
        out.logits = cfg_.tafe_on ? out.tafe_logits : out.cmd_logits;
    out_cache_ = out;
    return out;
}

void Model::backward(const Tensor& dfinal, const Tensor& dseg) {
    require_shape(dseg.same_shape(out_cache_.seg.logits),
                  "seg gradient shape " + shape_str(dseg.shape) + " does not match logits " +
                      shape_str(out_cache_.seg.logits.shape));

    Tensor d_tafe, d_cmd;
    if (cfg_.tafe_on && cfg_.cmd_on) {
        auto [dt, dc] = fusion_.backward(dfinal);
        d_tafe = std::move(dt);
        d_cmd = std::move(dc);
    } else if (cfg_.tafe_on) {
        d_tafe = dfinal;
    } else {
        d_cmd = dfinal;
    }

    FeaturePyramid dpyr;
    for (int i = 0; i < 4; ++i) dpyr.x[i] = Tensor(out_cache_.pyramid.x[i].shape);
    if (cfg_.tafe_on) tafe_.backward(d_tafe, dpyr);

    // Total gradient on the segmentation logits: the loss term plus, when the
    // cross-modality stream is on, the chain through tumor_prob = 1 - p0.
    Tensor ds = dseg;
    bool seg_grad_live = cfg_.cmd_on;
    if (!seg_grad_live)
        for (double g : ds.v)
            if (g != 0.0) {
                seg_grad_live = true;
                break;
            }
    if (cfg_.cmd_on) {
        Tensor dtp = cmd_.backward(d_cmd);  // (B, 1, spatial...)
        const auto& probs = out_cache_.seg.probs;
        Tensor dprobs(probs.shape);
        const std::int64_t b = probs.size(0), c = probs.size(1);
        const std::int64_t s = probs.numel() / (b * c);
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t j = 0; j < s; ++j) dprobs[(i * c) * s + j] = -dtp[i * s + j];
        Tensor chain = channel_softmax_backward(dprobs, probs);
        for (std::int64_t i = 0; i < ds.numel(); ++i) ds[i] += chain[i];
    }

    if (seg_grad_live) {
        FeaturePyramid ddec = decoder_.backward(ds);
        for (int i = 0; i < 4; ++i)
            for (std::int64_t j = 0; j < dpyr.x[i].numel(); ++j) dpyr.x[i][j] += ddec.x[i][j];
    }
    encoder_.backward(dpyr);
}

Tensor batch_from_cases(const std::vector<const Case*>& cases) {
    if (cases.empty()) raise(ErrorCode::EmptySplit, "cannot batch zero cases");
    const auto dims = cases[0]->dims();
    Tensor out({static_cast<std::int64_t>(cases.size()), 4, dims[0], dims[1], dims[2]});
    const std::int64_t s = dims[0] * dims[1] * dims[2];
    for (std::size_t n = 0; n < cases.size(); ++n) {
        require_shape(cases[n]->dims() == dims,
                      "case " + cases[n]->id + " dims differ within one batch");
        for (int q = 0; q < kNumSequences; ++q) {
            const auto& vox = cases[n]->sequences[static_cast<std::size_t>(q)].voxels;
            double* dst = out.data() + (static_cast<std::int64_t>(n) * 4 + q) * s;
            for (std::int64_t i = 0; i < s; ++i) dst[i] = vox[static_cast<std::size_t>(i)];
        }
    }
    return out;
}

Tensor mask_from_cases(const std::vector<const Case*>& cases) {
    if (cases.empty()) raise(ErrorCode::EmptySplit, "cannot batch zero cases");
    const auto dims = cases[0]->dims();
    Tensor out({static_cast<std::int64_t>(cases.size()), dims[0], dims[1], dims[2]});
    const std::int64_t s = dims[0] * dims[1] * dims[2];
    for (std::size_t n = 0; n < cases.size(); ++n) {
        if (!cases[n]->mask)
            raise(ErrorCode::InvalidMask, "case " + cases[n]->id + " has no mask");
        const auto& vox = cases[n]->mask->voxels;
        for (std::int64_t i = 0; i < s; ++i)
            out[static_cast<std::int64_t>(n) * s + i] = vox[static_cast<std::size_t>(i)];
    }
    return out;
}

std::vector<int> labels_from_cases(const std::vector<const Case*>& cases) {
    std::vector<int> y;
    y.reserve(cases.size());
    for (const auto* c : cases) {
        if (!c->idh_label) raise(ErrorCode::MissingLabel, "case " + c->id + " is unlabeled");
        y.push_back(*c->idh_label);
    }
    return y;
}

}  // namespace fbn
