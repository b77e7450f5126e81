#include "fbn/tafe.hpp"

#include "fbn/errors.hpp"

namespace fbn {

void TafeConfig::validate() const {
    if (depth < 1 || depth > 4) raise(ErrorCode::ConfigError, "tafe: depth must be in 1..4");
    if (n_cls < 1) raise(ErrorCode::ConfigError, "tafe: n_cls must be >= 1");
    if (head_hidden < 1) raise(ErrorCode::ConfigError, "tafe: head_hidden must be >= 1");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        raise(ErrorCode::ConfigError, "tafe: dropout_rate must be in [0,1)");
}

std::int64_t TafeConfig::feature_width(int embed_dim) const {
    std::int64_t w = 0;
    for (int i = 4 - depth; i < 4; ++i) w += std::int64_t(embed_dim) << i;
    return w;
}

Tensor gap(const Tensor& x) {
    if (x.rank() < 2) raise(ErrorCode::ShapeError, "gap: need (B, d, ...) input, got " + shape_str(x.shape));
    if (!all_finite(x)) raise(ErrorCode::ShapeError, "gap: non-finite input");
    const std::int64_t B = x.size(0), C = x.size(1), S = spatial_numel(x);
    Tensor out({B, C});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            double acc = 0.0;
            const double* src = x.data() + (b * C + c) * S;
            for (std::int64_t s = 0; s < S; ++s) acc += src[s];
            out.v[b * C + c] = acc / double(S);
        }
    return out;
}

TafeHead::TafeHead(const TafeConfig& cfg, int embed_dim)
    : cfg_(cfg),
      first_stage_(4 - cfg.depth),
      head_("tafe.head", cfg.feature_width(embed_dim), cfg.head_hidden, cfg.n_cls,
            cfg.dropout_rate) {
    cfg.validate();
}

void TafeHead::init(Rng& rng) { head_.init(rng); }

ParamRefs TafeHead::params() { return head_.params(); }

Tensor TafeHead::aggregate(const FeaturePyramid& pyr) {
    const std::int64_t B = pyr.x[first_stage_].size(0);
    std::int64_t width = 0;
    for (int i = first_stage_; i < 4; ++i) {
        widths_[i] = pyr.x[i].size(1);
        width += widths_[i];
    }
    Tensor out({B, width});
    std::int64_t off = 0;
    for (int i = first_stage_; i < 4; ++i) {
        Tensor g = pools_[i].forward(pyr.x[i]);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < widths_[i]; ++c)
                out.v[b * width + off + c] = g.v[b * widths_[i] + c];
        off += widths_[i];
    }
    return out;
}

Tensor TafeHead::classify(const Tensor& features, Mode mode, Rng& rng) {
    return head_.forward(features, mode, rng);
}

Tensor TafeHead::forward(const FeaturePyramid& pyr, Mode mode, Rng& rng) {
    return classify(aggregate(pyr), mode, rng);
}

void TafeHead::backward(const Tensor& dlogits, FeaturePyramid& dpyr) {
    Tensor dfeat = head_.backward(dlogits);
    const std::int64_t B = dfeat.size(0), width = dfeat.size(1);
    std::int64_t off = 0;
    for (int i = first_stage_; i < 4; ++i) {
        Tensor dg({B, widths_[i]});
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < widths_[i]; ++c)
                dg.v[b * widths_[i] + c] = dfeat.v[b * width + off + c];
        Tensor dx = pools_[i].backward(dg);
        for (std::int64_t k = 0; k < dx.numel(); ++k) dpyr.x[i].v[k] += dx.v[k];
        off += widths_[i];
    }
}

}  // namespace fbn
