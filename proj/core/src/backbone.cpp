#include "fbn/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "fbn/errors.hpp"

namespace fbn {

void BackboneConfig::validate() const {
    if (in_channels < 1) raise(ErrorCode::ConfigError, "backbone: in_channels must be >= 1");
    if (embed_dim < 1) raise(ErrorCode::ConfigError, "backbone: embed_dim must be >= 1");
    if (window < 1) raise(ErrorCode::ConfigError, "backbone: window must be >= 1");
    for (int i = 0; i < 4; ++i) {
        if (depths[i] < 1) raise(ErrorCode::ConfigError, "backbone: stage depths must be >= 1");
        if (num_heads[i] < 1) raise(ErrorCode::ConfigError, "backbone: num_heads must be >= 1");
        if (stage_channels(i) % num_heads[i] != 0)
            raise(ErrorCode::ConfigError, "backbone: stage " + std::to_string(i + 1) + " width " +
                              std::to_string(stage_channels(i)) + " not divisible by " +
                              std::to_string(num_heads[i]) + " heads");
    }
    for (int a = 0; a < 3; ++a) {
        if (input_size[a] < 16 || input_size[a] % 16 != 0)
            raise(ErrorCode::ConfigError, "backbone: input size " + std::to_string(input_size[a]) +
                              " must be a positive multiple of 16");
    }
    if (block_kind == BlockKind::Attention) {
        for (int i = 0; i < 4; ++i) {
            auto g = stage_grid(i);
            for (int a = 0; a < 3; ++a) {
                std::int64_t eff = std::min<std::int64_t>(window, g[a]);
                if (g[a] % eff != 0)
                    raise(ErrorCode::ConfigError, "backbone: stage " + std::to_string(i + 1) + " grid " +
                                      std::to_string(g[a]) + " not tileable by window " +
                                      std::to_string(window));
            }
        }
    }
}

// --- channel softmax ----------------------------------------------------------

Tensor channel_softmax(const Tensor& x) {
    if (x.rank() < 2) raise(ErrorCode::ShapeError, "channel_softmax: need (B, C, ...) input, got " + shape_str(x.shape));
    const std::int64_t B = x.size(0), C = x.size(1), S = spatial_numel(x);
    Tensor y(x.shape);
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t s = 0; s < S; ++s) {
            double m = -1e300;
            for (std::int64_t c = 0; c < C; ++c) m = std::max(m, x.v[(b * C + c) * S + s]);
            double z = 0.0;
            for (std::int64_t c = 0; c < C; ++c) {
                double e = std::exp(x.v[(b * C + c) * S + s] - m);
                y.v[(b * C + c) * S + s] = e;
                z += e;
            }
            for (std::int64_t c = 0; c < C; ++c) y.v[(b * C + c) * S + s] /= z;
        }
    }
    return y;
}

Tensor channel_softmax_backward(const Tensor& dy, const Tensor& y) {
    require_shape(y.same_shape(dy), "channel_softmax_backward");
    const std::int64_t B = y.size(0), C = y.size(1), S = spatial_numel(y);
    Tensor dx(y.shape);
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t s = 0; s < S; ++s) {
            double dot = 0.0;
            for (std::int64_t c = 0; c < C; ++c) {
                std::int64_t i = (b * C + c) * S + s;
                dot += dy.v[i] * y.v[i];
            }
            for (std::int64_t c = 0; c < C; ++c) {
                std::int64_t i = (b * C + c) * S + s;
                dx.v[i] = y.v[i] * (dy.v[i] - dot);
            }
        }
    }
    return dx;
}

// --- token/map layout ---------------------------------------------------------

namespace {

Tensor map_to_tokens(const Tensor& x) {
    const std::int64_t B = x.size(0), C = x.size(1), S = spatial_numel(x);
    Tensor t({B * S, C});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* src = x.data() + (b * C + c) * S;
            for (std::int64_t s = 0; s < S; ++s) t.v[(b * S + s) * C + c] = src[s];
        }
    return t;
}

Tensor tokens_to_map(const Tensor& t, const std::vector<std::int64_t>& shape) {
    Tensor x(shape);
    const std::int64_t B = x.size(0), C = x.size(1), S = spatial_numel(x);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            double* dst = x.v.data() + (b * C + c) * S;
            for (std::int64_t s = 0; s < S; ++s) dst[s] = t.v[(b * S + s) * C + c];
        }
    return x;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const std::int64_t B = a.size(0), Ca = a.size(1), Cb = b.size(1), S = spatial_numel(a);
    std::vector<std::int64_t> shape = a.shape;
    shape[1] = Ca + Cb;
    Tensor out(shape);
    for (std::int64_t n = 0; n < B; ++n) {
        std::copy_n(a.data() + n * Ca * S, Ca * S, out.v.data() + n * (Ca + Cb) * S);
        std::copy_n(b.data() + n * Cb * S, Cb * S, out.v.data() + (n * (Ca + Cb) + Ca) * S);
    }
    return out;
}

void split_channels(const Tensor& d, std::int64_t Ca, Tensor& da, Tensor& db) {
    const std::int64_t B = d.size(0), C = d.size(1), S = spatial_numel(d), Cb = C - Ca;
    for (std::int64_t n = 0; n < B; ++n) {
        std::copy_n(d.data() + n * C * S, Ca * S, da.v.data() + n * Ca * S);
        std::copy_n(d.data() + (n * C + Ca) * S, Cb * S, db.v.data() + n * Cb * S);
    }
}

}  // namespace

// --- patch merging ------------------------------------------------------------

PatchMerging::PatchMerging(const std::string& name, std::int64_t in_channels)
    : norm(name + ".norm", 8 * in_channels),
      reduce(name + ".reduce", 8 * in_channels, 2 * in_channels) {}

void PatchMerging::init(Rng& rng) { reduce.init(rng); }

ParamRefs PatchMerging::params() {
    ParamRefs out = norm.params();
    for (auto* p : reduce.params()) out.push_back(p);
    return out;
}

Tensor PatchMerging::forward(const Tensor& x) {
    const std::int64_t B = x.size(0), c = x.size(1);
    const std::int64_t D = x.size(2), H = x.size(3), W = x.size(4);
    if (D % 2 || H % 2 || W % 2)
        raise(ErrorCode::ShapeError, "patch merging needs even spatial dims, got " + shape_str(x.shape));
    in_shape_cache = x.shape;
    const std::int64_t Dz = D / 2, Hy = H / 2, Wx = W / 2, N = B * Dz * Hy * Wx;
    Tensor tok({N, 8 * c});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t z = 0; z < Dz; ++z)
            for (std::int64_t y = 0; y < Hy; ++y)
                for (std::int64_t xx = 0; xx < Wx; ++xx) {
                    std::int64_t r = ((b * Dz + z) * Hy + y) * Wx + xx;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx)
                                for (std::int64_t ch = 0; ch < c; ++ch)
                                    tok.v[r * 8 * c + ((dz * 2 + dy) * 2 + dx) * c + ch] =
                                        x.v[(((b * c + ch) * D + 2 * z + dz) * H + 2 * y + dy) * W +
                                            2 * xx + dx];
                }
    Tensor reduced = reduce.forward(norm.forward(tok));
    return tokens_to_map(reduced, {B, 2 * c, Dz, Hy, Wx});
}

Tensor PatchMerging::backward(const Tensor& dy) {
    const std::int64_t B = dy.size(0);
    const std::int64_t c = in_shape_cache[1];
    const std::int64_t D = in_shape_cache[2], H = in_shape_cache[3], W = in_shape_cache[4];
    const std::int64_t Dz = D / 2, Hy = H / 2, Wx = W / 2;
    Tensor dtok = norm.backward(reduce.backward(map_to_tokens(dy)));
    Tensor dx(in_shape_cache);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t z = 0; z < Dz; ++z)
            for (std::int64_t y = 0; y < Hy; ++y)
                for (std::int64_t xx = 0; xx < Wx; ++xx) {
                    std::int64_t r = ((b * Dz + z) * Hy + y) * Wx + xx;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dyy = 0; dyy < 2; ++dyy)
                            for (int dx2 = 0; dx2 < 2; ++dx2)
                                for (std::int64_t ch = 0; ch < c; ++ch)
                                    dx.v[(((b * c + ch) * D + 2 * z + dz) * H + 2 * y + dyy) * W +
                                         2 * xx + dx2] =
                                        dtok.v[r * 8 * c + ((dz * 2 + dyy) * 2 + dx2) * c + ch];
                }
    return dx;
}

// --- encoder -------------------------------------------------------------------

Encoder::Encoder(const BackboneConfig& cfg)
    : cfg_(cfg),
      patch_embed_("enc.embed", cfg.in_channels, cfg.embed_dim, 2, 2, 0),
      embed_norm_("enc.embed_norm", cfg.embed_dim) {
    cfg.validate();
    for (int i = 0; i < 4; ++i) {
        std::int64_t ch = cfg.stage_channels(i);
        for (int j = 0; j < cfg.depths[i]; ++j) {
            std::string name = "enc.s" + std::to_string(i + 1) + ".b" + std::to_string(j);
            if (cfg.block_kind == BlockKind::Attention)
                stages_[i].attn.emplace_back(name, ch, cfg.num_heads[i], cfg.window, j % 2 == 1);
            else
                stages_[i].conv.emplace_back(name, ch);
        }
        if (i < 3) merges_[i] = PatchMerging("enc.merge" + std::to_string(i + 1), ch);
    }
}

void Encoder::init(Rng& rng) {
    patch_embed_.init(rng);
    for (auto& st : stages_) {
        for (auto& b : st.attn) b.init(rng);
        for (auto& b : st.conv) b.init(rng);
    }
    for (auto& m : merges_) m.init(rng);
}

ParamRefs Encoder::params() {
    ParamRefs out = patch_embed_.params();
    for (auto* p : embed_norm_.params()) out.push_back(p);
    for (int i = 0; i < 4; ++i) {
        for (auto& b : stages_[i].attn)
            for (auto* p : b.params()) out.push_back(p);
        for (auto& b : stages_[i].conv)
            for (auto* p : b.params()) out.push_back(p);
        if (i < 3)
            for (auto* p : merges_[i].params()) out.push_back(p);
    }
    return out;
}

Tensor Encoder::stage_forward(int i, Tensor x) {
    for (auto& b : stages_[i].attn) x = b.forward(x);
    for (auto& b : stages_[i].conv) x = b.forward(x);
    return x;
}

Tensor Encoder::stage_backward(int i, Tensor d) {
    for (auto it = stages_[i].conv.rbegin(); it != stages_[i].conv.rend(); ++it)
        d = it->backward(d);
    for (auto it = stages_[i].attn.rbegin(); it != stages_[i].attn.rend(); ++it)
        d = it->backward(d);
    return d;
}

FeaturePyramid Encoder::forward(const Tensor& batch) {
    if (batch.rank() != 5 || batch.size(1) != cfg_.in_channels || batch.size(2) != cfg_.input_size[0] ||
        batch.size(3) != cfg_.input_size[1] || batch.size(4) != cfg_.input_size[2])
        raise(ErrorCode::ShapeError, "encoder: batch " + shape_str(batch.shape) + " does not match configured input");
    Tensor t = patch_embed_.forward(batch);
    Tensor tok = embed_norm_.forward(map_to_tokens(t));
    Tensor x = tokens_to_map(tok, t.shape);
    FeaturePyramid pyr;
    for (int i = 0; i < 4; ++i) {
        if (i > 0) x = merges_[i - 1].forward(x);
        x = stage_forward(i, x);
        pyr.x[i] = x;
    }
    return pyr;
}

Tensor Encoder::backward(const FeaturePyramid& dpyr) {
    Tensor d = stage_backward(3, dpyr.x[3]);
    for (int i = 2; i >= 0; --i) {
        d = merges_[i].backward(d);
        for (std::int64_t k = 0; k < d.numel(); ++k) d.v[k] += dpyr.x[i].v[k];
        d = stage_backward(i, d);
    }
    Tensor dtok = embed_norm_.backward(map_to_tokens(d));
    return patch_embed_.backward(tokens_to_map(dtok, d.shape));
}

// --- decoder -------------------------------------------------------------------

Decoder::Decoder(const BackboneConfig& cfg)
    : cfg_(cfg), head_("dec.head", cfg.embed_dim, 4, 2) {
    const std::int64_t C = cfg.embed_dim;
    for (int i = 0; i < 4; ++i)
        proj_[i] = Conv3d("dec.proj" + std::to_string(i + 1), cfg.stage_channels(i), C, 1, 1, 0);
    for (int i = 0; i < 3; ++i) {
        up_[i] = ConvTranspose3d("dec.up" + std::to_string(i + 1), C, C, 2);
        mix_[i] = Conv3d("dec.mix" + std::to_string(i + 1), 2 * C, C, 3, 1, 1);
    }
}

void Decoder::init(Rng& rng) {
    for (auto& c : proj_) c.init(rng);
    for (auto& c : up_) c.init(rng);
    for (auto& c : mix_) c.init(rng);
    head_.init(rng);
}

ParamRefs Decoder::params() {
    ParamRefs out;
    for (auto& c : proj_)
        for (auto* p : c.params()) out.push_back(p);
    for (auto& c : up_)
        for (auto* p : c.params()) out.push_back(p);
    for (auto& c : mix_)
        for (auto* p : c.params()) out.push_back(p);
    for (auto* p : head_.params()) out.push_back(p);
    return out;
}

Tensor Decoder::forward(const FeaturePyramid& pyr) {
    std::array<Tensor, 4> p;
    for (int i = 0; i < 4; ++i) p[i] = proj_relu_[i].forward(proj_[i].forward(pyr.x[i]));
    Tensor y = p[3];
    for (int i = 2; i >= 0; --i) {
        Tensor cat = concat_channels(up_[i].forward(y), p[i]);
        cat_shapes_[i] = cat.shape;
        y = mix_relu_[i].forward(mix_[i].forward(cat));
    }
    return head_.forward(y);
}

FeaturePyramid Decoder::backward(const Tensor& dlogits) {
    const std::int64_t C = cfg_.embed_dim;
    FeaturePyramid dpyr;
    Tensor dy = head_.backward(dlogits);
    for (int i = 0; i < 3; ++i) {
        Tensor dcat = mix_[i].backward(mix_relu_[i].backward(dy));
        std::vector<std::int64_t> half = dcat.shape;
        half[1] = C;
        Tensor du(half), dp(half);
        split_channels(dcat, C, du, dp);
        dpyr.x[i] = proj_[i].backward(proj_relu_[i].backward(dp));
        dy = up_[i].backward(du);
    }
    dpyr.x[3] = proj_[3].backward(proj_relu_[3].backward(dy));
    return dpyr;
}

SegOutput make_seg_output(Tensor logits) {
    SegOutput out;
    out.probs = channel_softmax(logits);
    const std::int64_t B = logits.size(0), C = logits.size(1), S = spatial_numel(logits);
    std::vector<std::int64_t> tp_shape = logits.shape;
    tp_shape[1] = 1;
    out.tumor_prob = Tensor(tp_shape);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t s = 0; s < S; ++s)
            out.tumor_prob.v[b * S + s] = 1.0 - out.probs.v[b * C * S + s];
    out.logits = std::move(logits);
    return out;
}

}  // namespace fbn
