#include "fbn/cmd.hpp"

#include <algorithm>
#include <cmath>

#include "fbn/errors.hpp"

namespace fbn {

void CmdConfig::validate() const {
    if (!(gamma > 1.0)) raise(ErrorCode::ConfigError, "cmd: gamma must be > 1");
    if (floor < 0.0 || floor >= 1.0) raise(ErrorCode::ConfigError, "cmd: floor must be in [0,1)");
    if (conv_channels < 1) raise(ErrorCode::ConfigError, "cmd: conv_channels must be >= 1");
    if (reduction < 1 || conv_channels % reduction != 0)
        raise(ErrorCode::ConfigError, "cmd: reduction must divide conv_channels");
    if (spatial_kernel < 1 || spatial_kernel % 2 == 0)
        raise(ErrorCode::ConfigError, "cmd: spatial_kernel must be odd");
    if (head_hidden < 1) raise(ErrorCode::ConfigError, "cmd: head_hidden must be >= 1");
    if (n_cls < 1) raise(ErrorCode::ConfigError, "cmd: n_cls must be >= 1");
}

Tensor soft_gate(const Tensor& v, const Tensor& tumor_prob, double floor) {
    require_shape(v.same_shape(tumor_prob), "soft_gate");
    Tensor out(v.shape);
    for (std::int64_t i = 0; i < v.numel(); ++i)
        out.v[i] = v.v[i] * std::max(tumor_prob.v[i], floor);
    return out;
}

Tensor differential(const Tensor& f_t2, const Tensor& f_flair, double gamma) {
    if (!(gamma > 1.0)) raise(ErrorCode::ConfigError, "differential: gamma must be > 1");
    require_shape(f_t2.same_shape(f_flair), "differential");
    Tensor out(f_t2.shape);
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out.v[i] = gamma * (f_t2.v[i] - f_flair.v[i]);
    return out;
}

std::pair<Tensor, Tensor> apply_mismatch(const Tensor& f_t2, const Tensor& f_flair,
                                         const Tensor& ca, const Tensor& sa) {
    require_shape(f_t2.same_shape(f_flair), "apply_mismatch");
    const std::int64_t B = f_t2.size(0), c = f_t2.size(1), S = spatial_numel(f_t2);
    if (ca.rank() != 2 || ca.size(0) != B || ca.size(1) != c)
        raise(ErrorCode::ShapeError, "apply_mismatch: channel attention " + shape_str(ca.shape));
    if (sa.size(0) != B || sa.size(1) != 1 || spatial_numel(sa) != S)
        raise(ErrorCode::ShapeError, "apply_mismatch: spatial attention " + shape_str(sa.shape));
    Tensor fp_t2(f_t2.shape), fp_fl(f_t2.shape);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t s = 0; s < S; ++s) {
                std::int64_t i = (b * c + ch) * S + s;
                double scale = 1.0 + ca.v[b * c + ch] * sa.v[b * S + s];
                fp_t2.v[i] = f_t2.v[i] * scale;
                fp_fl.v[i] = f_flair.v[i] * scale;
            }
    return {std::move(fp_t2), std::move(fp_fl)};
}

namespace {

// Rows of b appended after rows of a along the batch dimension.
Tensor stack_batches(const Tensor& a, const Tensor& b) {
    std::vector<std::int64_t> shape = a.shape;
    shape[0] = a.size(0) + b.size(0);
    Tensor out(shape);
    std::copy(a.v.begin(), a.v.end(), out.v.begin());
    std::copy(b.v.begin(), b.v.end(), out.v.begin() + a.numel());
    return out;
}

void split_batches(const Tensor& x, Tensor& a, Tensor& b) {
    std::copy_n(x.v.begin(), a.numel(), a.v.begin());
    std::copy_n(x.v.begin() + a.numel(), b.numel(), b.v.begin());
}

Tensor sigmoid_of(const Tensor& x) {
    Tensor y(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) y.v[i] = 1.0 / (1.0 + std::exp(-x.v[i]));
    return y;
}

}  // namespace

CmdModule::CmdModule(const CmdConfig& cfg)
    : cfg_(cfg),
      conv1_("cmd.conv1", 1, cfg.conv_channels, 3, 2, 1),
      conv2_("cmd.conv2", cfg.conv_channels, cfg.conv_channels, 3, 2, 1),
      ca_fc1_("cmd.ca.fc1", cfg.conv_channels, cfg.conv_channels / cfg.reduction),
      ca_fc2_("cmd.ca.fc2", cfg.conv_channels / cfg.reduction, cfg.conv_channels),
      sa_conv1_("cmd.sa.conv1", 2, 2, cfg.spatial_kernel, 1, (cfg.spatial_kernel - 1) / 2),
      sa_conv2_("cmd.sa.conv2", 2, 1, cfg.spatial_kernel, 1, (cfg.spatial_kernel - 1) / 2),
      head_("cmd.head", 2 * cfg.conv_channels, cfg.head_hidden, cfg.n_cls) {
    cfg.validate();
}

void CmdModule::init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    ca_fc1_.init(rng);
    ca_fc2_.init(rng);
    sa_conv1_.init(rng);
    sa_conv2_.init(rng);
    head_.init(rng);
}

ParamRefs CmdModule::params() {
    ParamRefs out;
    for (auto* l : {&conv1_, &conv2_, &sa_conv1_, &sa_conv2_})
        for (auto* p : l->params()) out.push_back(p);
    for (auto* l : {&ca_fc1_, &ca_fc2_})
        for (auto* p : l->params()) out.push_back(p);
    for (auto* p : head_.params()) out.push_back(p);
    return out;
}

Tensor CmdModule::forward(const Tensor& v_t2, const Tensor& v_flair, const Tensor& tumor_prob,
                          Mode mode, Rng& rng) {
    require_shape(v_t2.same_shape(v_flair), "cmd volumes");
    require_shape(v_t2.same_shape(tumor_prob), "cmd tumor_prob");
    if (v_t2.rank() != 5 || v_t2.size(1) != 1)
        raise(ErrorCode::ShapeError, "cmd: expected (B,1,D,H,W) volumes, got " + shape_str(v_t2.shape));
    const std::int64_t B = v_t2.size(0);
    v_t2_cache_ = v_t2;
    v_flair_cache_ = v_flair;

    gate_cache_ = Tensor(tumor_prob.shape);
    gate_open_cache_ = Tensor(tumor_prob.shape);
    for (std::int64_t i = 0; i < tumor_prob.numel(); ++i) {
        gate_cache_.v[i] = std::max(tumor_prob.v[i], cfg_.floor);
        gate_open_cache_.v[i] = tumor_prob.v[i] > cfg_.floor ? 1.0 : 0.0;
    }
    Tensor g_t2 = soft_gate(v_t2, tumor_prob, cfg_.floor);
    Tensor g_fl = soft_gate(v_flair, tumor_prob, cfg_.floor);

    Tensor f_all = conv_relu2_.forward(
        conv2_.forward(conv_relu1_.forward(conv1_.forward(stack_batches(g_t2, g_fl)))));
    std::vector<std::int64_t> half_shape = f_all.shape;
    half_shape[0] = B;
    feat_.f_t2 = Tensor(half_shape);
    feat_.f_flair = Tensor(half_shape);
    split_batches(f_all, feat_.f_t2, feat_.f_flair);
    feat_.f_diff = differential(feat_.f_t2, feat_.f_flair, cfg_.gamma);

    const std::int64_t c = cfg_.conv_channels, S = spatial_numel(feat_.f_diff);

    Tensor pooled = stack_batches(gap_diff_.forward(feat_.f_diff), gmp_diff_.forward(feat_.f_diff));
    Tensor h = ca_fc2_.forward(ca_relu_.forward(ca_fc1_.forward(pooled)));
    ca_pre_ = Tensor({B, c});
    for (std::int64_t i = 0; i < B * c; ++i) ca_pre_.v[i] = h.v[i] + h.v[B * c + i];
    feat_.ca = sigmoid_of(ca_pre_);

    std::vector<std::int64_t> cat_shape = half_shape;
    cat_shape[1] = 2;
    Tensor cat(cat_shape);
    chan_argmax_.assign(B * S, 0);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t s = 0; s < S; ++s) {
            double sum = 0.0, best = feat_.f_diff.v[b * c * S + s];
            std::int64_t best_ch = 0;
            for (std::int64_t ch = 0; ch < c; ++ch) {
                double val = feat_.f_diff.v[(b * c + ch) * S + s];
                sum += val;
                if (val > best) {
                    best = val;
                    best_ch = ch;
                }
            }
            cat.v[b * 2 * S + s] = sum / double(c);
            cat.v[(b * 2 + 1) * S + s] = best;
            chan_argmax_[b * S + s] = best_ch;
        }
    pool_cat_shape_ = cat_shape;
    sa_pre_ = sa_conv2_.forward(sa_relu_.forward(sa_conv1_.forward(cat)));
    feat_.sa = sigmoid_of(sa_pre_);

    feat_.a = Tensor(half_shape);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t s = 0; s < S; ++s)
                feat_.a.v[(b * c + ch) * S + s] = feat_.ca.v[b * c + ch] * feat_.sa.v[b * S + s];
    auto enhanced = apply_mismatch(feat_.f_t2, feat_.f_flair, feat_.ca, feat_.sa);
    feat_.fp_t2 = std::move(enhanced.first);
    feat_.fp_flair = std::move(enhanced.second);

    Tensor z({B, 2 * c});
    Tensor z_t2 = gap_t2_.forward(feat_.fp_t2);
    Tensor z_fl = gap_flair_.forward(feat_.fp_flair);
    for (std::int64_t b = 0; b < B; ++b) {
        std::copy_n(z_t2.v.begin() + b * c, c, z.v.begin() + b * 2 * c);
        std::copy_n(z_fl.v.begin() + b * c, c, z.v.begin() + b * 2 * c + c);
    }
    return head_.forward(z, mode, rng);
}

Tensor CmdModule::backward(const Tensor& dlogits) {
    const std::int64_t B = feat_.f_t2.size(0), c = cfg_.conv_channels;
    const std::int64_t S = spatial_numel(feat_.f_t2);

    Tensor dz = head_.backward(dlogits);
    Tensor dz_t2({B, c}), dz_fl({B, c});
    for (std::int64_t b = 0; b < B; ++b) {
        std::copy_n(dz.v.begin() + b * 2 * c, c, dz_t2.v.begin() + b * c);
        std::copy_n(dz.v.begin() + b * 2 * c + c, c, dz_fl.v.begin() + b * c);
    }
    Tensor dfp_t2 = gap_t2_.backward(dz_t2);
    Tensor dfp_fl = gap_flair_.backward(dz_fl);

    Tensor df_t2(feat_.f_t2.shape), df_fl(feat_.f_t2.shape);
    Tensor dca({B, c}), dsa(feat_.sa.shape);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            double dca_acc = 0.0;
            for (std::int64_t s = 0; s < S; ++s) {
                std::int64_t i = (b * c + ch) * S + s;
                double scale = 1.0 + feat_.a.v[i];
                df_t2.v[i] = dfp_t2.v[i] * scale;
                df_fl.v[i] = dfp_fl.v[i] * scale;
                double da = feat_.f_t2.v[i] * dfp_t2.v[i] + feat_.f_flair.v[i] * dfp_fl.v[i];
                dca_acc += da * feat_.sa.v[b * S + s];
                dsa.v[b * S + s] += da * feat_.ca.v[b * c + ch];
            }
            dca.v[b * c + ch] = dca_acc;
        }

    // channel attention: dca -> shared bottleneck -> pooled gradients
    Tensor dca_pre({B, c});
    for (std::int64_t i = 0; i < B * c; ++i)
        dca_pre.v[i] = dca.v[i] * feat_.ca.v[i] * (1.0 - feat_.ca.v[i]);
    Tensor dh = stack_batches(dca_pre, dca_pre);
    Tensor dpooled = ca_fc1_.backward(ca_relu_.backward(ca_fc2_.backward(dh)));
    Tensor dpa({B, c}), dpm({B, c});
    split_batches(dpooled, dpa, dpm);
    Tensor df_diff = gap_diff_.backward(dpa);
    Tensor df_diff_max = gmp_diff_.backward(dpm);
    for (std::int64_t i = 0; i < df_diff.numel(); ++i) df_diff.v[i] += df_diff_max.v[i];

    // spatial attention: dsa -> convs -> channel mean/max pools
    Tensor dsa_pre(feat_.sa.shape);
    for (std::int64_t i = 0; i < dsa.numel(); ++i)
        dsa_pre.v[i] = dsa.v[i] * feat_.sa.v[i] * (1.0 - feat_.sa.v[i]);
    Tensor dcat = sa_conv1_.backward(sa_relu_.backward(sa_conv2_.backward(dsa_pre)));
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t s = 0; s < S; ++s) {
            double dmean = dcat.v[b * 2 * S + s] / double(c);
            for (std::int64_t ch = 0; ch < c; ++ch) df_diff.v[(b * c + ch) * S + s] += dmean;
            df_diff.v[(b * c + chan_argmax_[b * S + s]) * S + s] += dcat.v[(b * 2 + 1) * S + s];
        }

    for (std::int64_t i = 0; i < df_diff.numel(); ++i) {
        df_t2.v[i] += cfg_.gamma * df_diff.v[i];
        df_fl.v[i] -= cfg_.gamma * df_diff.v[i];
    }

    Tensor dstacked = conv1_.backward(
        conv_relu1_.backward(conv2_.backward(conv_relu2_.backward(stack_batches(df_t2, df_fl)))));
    Tensor dg_t2(v_t2_cache_.shape), dg_fl(v_t2_cache_.shape);
    split_batches(dstacked, dg_t2, dg_fl);

    Tensor dtp(v_t2_cache_.shape);
    for (std::int64_t i = 0; i < dtp.numel(); ++i) {
        double dgate = v_t2_cache_.v[i] * dg_t2.v[i] + v_flair_cache_.v[i] * dg_fl.v[i];
        dtp.v[i] = dgate * gate_open_cache_.v[i];
    }
    return dtp;
}

}  // namespace fbn
