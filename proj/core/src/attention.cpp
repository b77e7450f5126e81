#include "fbn/attention.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace fbn {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

Tensor window_partition(const Tensor& x, const std::array<int, 3>& win) {
    const std::int64_t B = x.size(0), C = x.size(1);
    const std::int64_t D = x.size(2), H = x.size(3), W = x.size(4);
    require_shape(D % win[0] == 0 && H % win[1] == 0 && W % win[2] == 0,
                  "window must divide the grid");
    const std::int64_t nd = D / win[0], nh = H / win[1], nw = W / win[2];
    const std::int64_t T = std::int64_t(win[0]) * win[1] * win[2];
    Tensor out({B * nd * nh * nw, T, C});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* xc = x.data() + (b * C + c) * D * H * W;
            for (std::int64_t z = 0; z < D; ++z)
                for (std::int64_t y = 0; y < H; ++y)
                    for (std::int64_t xx = 0; xx < W; ++xx) {
                        const std::int64_t wi =
                            ((b * nd + z / win[0]) * nh + y / win[1]) * nw + xx / win[2];
                        const std::int64_t t =
                            ((z % win[0]) * win[1] + (y % win[1])) * win[2] + (xx % win[2]);
                        out[(wi * T + t) * C + c] = xc[(z * H + y) * W + xx];
                    }
        }
    return out;
}

Tensor window_reverse(const Tensor& tokens, const std::array<int, 3>& win,
                      const std::vector<std::int64_t>& x_shape) {
    const std::int64_t B = x_shape[0], C = x_shape[1];
    const std::int64_t D = x_shape[2], H = x_shape[3], W = x_shape[4];
    const std::int64_t nd = D / win[0], nh = H / win[1], nw = W / win[2];
    const std::int64_t T = std::int64_t(win[0]) * win[1] * win[2];
    Tensor out(x_shape);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            double* xc = out.data() + (b * C + c) * D * H * W;
            for (std::int64_t z = 0; z < D; ++z)
                for (std::int64_t y = 0; y < H; ++y)
                    for (std::int64_t xx = 0; xx < W; ++xx) {
                        const std::int64_t wi =
                            ((b * nd + z / win[0]) * nh + y / win[1]) * nw + xx / win[2];
                        const std::int64_t t =
                            ((z % win[0]) * win[1] + (y % win[1])) * win[2] + (xx % win[2]);
                        xc[(z * H + y) * W + xx] = tokens[(wi * T + t) * C + c];
                    }
        }
    return out;
}

Tensor cyclic_shift(const Tensor& x, const std::array<int, 3>& shift) {
    if (shift[0] == 0 && shift[1] == 0 && shift[2] == 0) return x;
    const std::int64_t B = x.size(0), C = x.size(1);
    const std::int64_t D = x.size(2), H = x.size(3), W = x.size(4);
    Tensor out(x.shape);
    auto wrap = [](std::int64_t i, std::int64_t n) { return ((i % n) + n) % n; };
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        const double* src = x.data() + bc * D * H * W;
        double* dst = out.data() + bc * D * H * W;
        for (std::int64_t z = 0; z < D; ++z) {
            const std::int64_t sz = wrap(z + shift[0], D);
            for (std::int64_t y = 0; y < H; ++y) {
                const std::int64_t sy = wrap(y + shift[1], H);
                for (std::int64_t xx = 0; xx < W; ++xx)
                    dst[(z * H + y) * W + xx] = src[(sz * H + sy) * W + wrap(xx + shift[2], W)];
            }
        }
    }
    return out;
}

Tensor shifted_window_mask(const std::array<std::int64_t, 3>& grid, const std::array<int, 3>& win,
                           const std::array<int, 3>& shift) {
    // Label each voxel by which pre-shift region it came from; tokens with
    // different labels in one window belong to non-adjacent content.
    auto segment = [](std::int64_t i, std::int64_t n, int w, int s) {
        if (s == 0) return 0;
        if (i < n - w) return 0;
        if (i < n - s) return 1;
        return 2;
    };
    const std::int64_t D = grid[0], H = grid[1], W = grid[2];
    const std::int64_t nd = D / win[0], nh = H / win[1], nw = W / win[2];
    const std::int64_t T = std::int64_t(win[0]) * win[1] * win[2];

    std::vector<int> labels(std::size_t(nd * nh * nw * T));
    for (std::int64_t z = 0; z < D; ++z)
        for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
                const int lab = segment(z, D, win[0], shift[0]) * 9 +
                                segment(y, H, win[1], shift[1]) * 3 +
                                segment(x, W, win[2], shift[2]);
                const std::int64_t wi = ((z / win[0]) * nh + y / win[1]) * nw + x / win[2];
                const std::int64_t t =
                    ((z % win[0]) * win[1] + (y % win[1])) * win[2] + (x % win[2]);
                labels[std::size_t(wi * T + t)] = lab;
            }

    Tensor mask({nd * nh * nw, T, T});
    for (std::int64_t wi = 0; wi < nd * nh * nw; ++wi)
        for (std::int64_t i = 0; i < T; ++i)
            for (std::int64_t j = 0; j < T; ++j)
                mask[(wi * T + i) * T + j] =
                    labels[std::size_t(wi * T + i)] == labels[std::size_t(wi * T + j)] ? 0.0
                                                                                       : -1e9;
    return mask;
}

// --- WindowAttention -----------------------------------------------------------

WindowAttention::WindowAttention(const std::string& name, std::int64_t dim, int heads_)
    : heads(heads_), qkv(name + ".qkv", dim, 3 * dim), proj(name + ".proj", dim, dim) {}

void WindowAttention::init(Rng& rng) {
    qkv.init(rng);
    proj.init(rng);
}

ParamRefs WindowAttention::params() {
    ParamRefs p = qkv.params();
    for (auto* q : proj.params()) p.push_back(q);
    return p;
}

Tensor WindowAttention::forward(const Tensor& tokens, const Tensor& mask) {
    const std::int64_t N = tokens.size(0), T = tokens.size(1), C = tokens.size(2);
    require_shape(C % heads == 0, "attention dim not divisible by heads");
    const std::int64_t dh = C / heads;
    const double scale = 1.0 / std::sqrt(double(dh));
    const std::int64_t nmask = mask.numel() > 0 ? mask.size(0) : 0;

    Tensor flat({N * T, C});
    flat.v = tokens.v;
    Tensor qkv_out = qkv.forward(flat);  // (N*T, 3C)

    q_cache = Tensor({N, heads, T, dh});
    k_cache = Tensor({N, heads, T, dh});
    v_cache = Tensor({N, heads, T, dh});
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t t = 0; t < T; ++t)
            for (int h = 0; h < heads; ++h)
                for (std::int64_t d = 0; d < dh; ++d) {
                    const std::int64_t src = (n * T + t) * 3 * C + h * dh + d;
                    const std::int64_t dst = ((n * heads + h) * T + t) * dh + d;
                    q_cache[dst] = qkv_out[src] * scale;
                    k_cache[dst] = qkv_out[src + C];
                    v_cache[dst] = qkv_out[src + 2 * C];
                }

    attn_cache = Tensor({N, heads, T, T});
    Tensor ctx({N * T, C});
    for (std::int64_t n = 0; n < N; ++n) {
        const double* m = nmask > 0 ? mask.data() + (n % nmask) * T * T : nullptr;
        for (int h = 0; h < heads; ++h) {
            const std::int64_t off = (n * heads + h) * T * dh;
            MapC qm(q_cache.data() + off, T, dh);
            MapC km(k_cache.data() + off, T, dh);
            MapC vm(v_cache.data() + off, T, dh);
            MatRM scores = qm * km.transpose();
            if (m)
                for (std::int64_t i = 0; i < T; ++i)
                    for (std::int64_t j = 0; j < T; ++j) scores(i, j) += m[i * T + j];
            // row softmax
            for (std::int64_t i = 0; i < T; ++i) {
                double mx = scores.row(i).maxCoeff();
                double sum = 0.0;
                for (std::int64_t j = 0; j < T; ++j) {
                    scores(i, j) = std::exp(scores(i, j) - mx);
                    sum += scores(i, j);
                }
                scores.row(i) /= sum;
            }
            std::copy(scores.data(), scores.data() + T * T,
                      attn_cache.data() + (n * heads + h) * T * T);
            MatRM out = scores * vm;  // (T, dh)
            for (std::int64_t t = 0; t < T; ++t)
                for (std::int64_t d = 0; d < dh; ++d)
                    ctx[(n * T + t) * C + h * dh + d] = out(t, d);
        }
    }

    Tensor y = proj.forward(ctx);  // (N*T, C)
    Tensor out({N, T, C});
    out.v = std::move(y.v);
    return out;
}

Tensor WindowAttention::backward(const Tensor& dy) {
    const std::int64_t N = dy.size(0), T = dy.size(1), C = dy.size(2);
    const std::int64_t dh = C / heads;
    const double scale = 1.0 / std::sqrt(double(dh));

    Tensor dy_flat({N * T, C});
    dy_flat.v = dy.v;
    Tensor dctx = proj.backward(dy_flat);  // (N*T, C)

    Tensor dqkv({N * T, 3 * C});
    for (std::int64_t n = 0; n < N; ++n)
        for (int h = 0; h < heads; ++h) {
            const std::int64_t off = (n * heads + h) * T * dh;
            MapC attn(attn_cache.data() + (n * heads + h) * T * T, T, T);
            MapC qm(q_cache.data() + off, T, dh);
            MapC km(k_cache.data() + off, T, dh);
            MapC vm(v_cache.data() + off, T, dh);

            MatRM dout(T, dh);
            for (std::int64_t t = 0; t < T; ++t)
                for (std::int64_t d = 0; d < dh; ++d)
                    dout(t, d) = dctx[(n * T + t) * C + h * dh + d];

            MatRM dattn = dout * vm.transpose();          // (T, T)
            MatRM dv = attn.transpose() * dout;           // (T, dh)
            // softmax backward per row
            MatRM dscores(T, T);
            for (std::int64_t i = 0; i < T; ++i) {
                double dot = 0.0;
                for (std::int64_t j = 0; j < T; ++j) dot += dattn(i, j) * attn(i, j);
                for (std::int64_t j = 0; j < T; ++j)
                    dscores(i, j) = attn(i, j) * (dattn(i, j) - dot);
            }
            MatRM dq = dscores * km;            // grads w.r.t. scaled q
            MatRM dk = dscores.transpose() * qm;

            for (std::int64_t t = 0; t < T; ++t)
                for (std::int64_t d = 0; d < dh; ++d) {
                    const std::int64_t dst = (n * T + t) * 3 * C + h * dh + d;
                    dqkv[dst] = dq(t, d) * scale;
                    dqkv[dst + C] = dk(t, d);
                    dqkv[dst + 2 * C] = dv(t, d);
                }
        }

    Tensor dtok_flat = qkv.backward(dqkv);  // (N*T, C)
    Tensor dtok({N, T, C});
    dtok.v = std::move(dtok_flat.v);
    return dtok;
}

// --- SwinBlock -------------------------------------------------------------------

SwinBlock::SwinBlock(const std::string& name, std::int64_t dim_, int heads, int window_,
                     bool shifted_, std::int64_t mlp_ratio)
    : dim(dim_),
      window(window_),
      shifted(shifted_),
      norm1(name + ".norm1", dim_),
      norm2(name + ".norm2", dim_),
      attn(name + ".attn", dim_, heads),
      mlp_fc1(name + ".mlp.fc1", dim_, dim_ * mlp_ratio),
      mlp_fc2(name + ".mlp.fc2", dim_ * mlp_ratio, dim_) {}

void SwinBlock::init(Rng& rng) {
    attn.init(rng);
    mlp_fc1.init(rng);
    mlp_fc2.init(rng);
}

ParamRefs SwinBlock::params() {
    ParamRefs p;
    for (auto* q : norm1.params()) p.push_back(q);
    for (auto* q : attn.params()) p.push_back(q);
    for (auto* q : norm2.params()) p.push_back(q);
    for (auto* q : mlp_fc1.params()) p.push_back(q);
    for (auto* q : mlp_fc2.params()) p.push_back(q);
    return p;
}

Tensor SwinBlock::forward(const Tensor& x) {
    require_shape(x.rank() == 5 && x.size(1) == dim,
                  "swin block: bad input " + shape_str(x.shape));
    x_shape_cache = x.shape;
    const std::array<std::int64_t, 3> grid{x.size(2), x.size(3), x.size(4)};
    for (int a = 0; a < 3; ++a) {
        eff_win[a] = int(std::min<std::int64_t>(window, grid[a]));
        require_shape(grid[a] % eff_win[a] == 0, "window does not divide the grid");
        // No point shifting when one window spans the whole axis.
        eff_shift[a] = (shifted && eff_win[a] < grid[a]) ? eff_win[a] / 2 : 0;
    }

    const bool any_shift = eff_shift[0] || eff_shift[1] || eff_shift[2];
    Tensor shifted_x = any_shift ? cyclic_shift(x, eff_shift) : x;
    Tensor tokens = window_partition(shifted_x, eff_win);
    tok_cache = tokens;
    mask_cache = any_shift ? shifted_window_mask(grid, eff_win, eff_shift) : Tensor();

    Tensor h = norm1.forward(tokens);
    Tensor a = attn.forward(h, mask_cache);
    for (std::int64_t i = 0; i < a.numel(); ++i) a[i] += tokens[i];
    a_cache = a;

    Tensor n2 = norm2.forward(a);
    const std::int64_t rows = n2.numel() / dim;
    Tensor n2_flat({rows, dim});
    n2_flat.v = n2.v;
    Tensor m = mlp_fc2.forward(gelu.forward(mlp_fc1.forward(n2_flat)));
    Tensor out_tokens(a.shape);
    for (std::int64_t i = 0; i < a.numel(); ++i) out_tokens[i] = a[i] + m[i];

    Tensor y = window_reverse(out_tokens, eff_win, x_shape_cache);
    if (any_shift) {
        const std::array<int, 3> undo{-eff_shift[0], -eff_shift[1], -eff_shift[2]};
        y = cyclic_shift(y, undo);
    }
    return y;
}

Tensor SwinBlock::backward(const Tensor& dy) {
    const bool any_shift = eff_shift[0] || eff_shift[1] || eff_shift[2];
    Tensor d = dy;
    if (any_shift) d = cyclic_shift(d, eff_shift);
    Tensor dtok = window_partition(d, eff_win);

    // out = a + mlp(norm2(a)); dtok flows into both branches.
    const std::int64_t rows = dtok.numel() / dim;
    Tensor dm_flat({rows, dim});
    dm_flat.v = dtok.v;
    Tensor dn2 = mlp_fc1.backward(gelu.backward(mlp_fc2.backward(dm_flat)));
    Tensor dn2_shaped(a_cache.shape);
    dn2_shaped.v = std::move(dn2.v);
    Tensor da = norm2.backward(dn2_shaped);
    for (std::int64_t i = 0; i < da.numel(); ++i) da[i] += dtok[i];

    // a = tokens + attn(norm1(tokens))
    Tensor dh = attn.backward(da);
    Tensor dtokens = norm1.backward(dh);
    for (std::int64_t i = 0; i < dtokens.numel(); ++i) dtokens[i] += da[i];

    Tensor dx = window_reverse(dtokens, eff_win, x_shape_cache);
    if (any_shift) {
        const std::array<int, 3> undo{-eff_shift[0], -eff_shift[1], -eff_shift[2]};
        dx = cyclic_shift(dx, undo);
    }
    return dx;
}

// --- ConvResidualBlock --------------------------------------------------------------

ConvResidualBlock::ConvResidualBlock(const std::string& name, std::int64_t dim)
    : conv1(name + ".conv1", dim, dim, 3, 1, 1), conv2(name + ".conv2", dim, dim, 3, 1, 1) {}

void ConvResidualBlock::init(Rng& rng) {
    conv1.init(rng);
    conv2.init(rng);
}

ParamRefs ConvResidualBlock::params() {
    ParamRefs p = conv1.params();
    for (auto* q : conv2.params()) p.push_back(q);
    return p;
}

Tensor ConvResidualBlock::forward(const Tensor& x) {
    Tensor y = conv2.forward(relu.forward(conv1.forward(x)));
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] += x[i];
    return y;
}

Tensor ConvResidualBlock::backward(const Tensor& dy) {
    Tensor dx = conv1.backward(relu.backward(conv2.backward(dy)));
    for (std::int64_t i = 0; i < dx.numel(); ++i) dx[i] += dy[i];
    return dx;
}

}  // namespace fbn
