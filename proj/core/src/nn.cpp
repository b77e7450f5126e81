#include "fbn/nn.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace fbn {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapC = Eigen::Map<const MatRM>;

void init_trunc_normal(Parameter& p, Rng& rng, double stddev) {
    for (auto& x : p.value.v) x = double(float(rng.truncated_normal(stddev)));
    p.grad.zero();
}

// --- Linear -------------------------------------------------------------------

Linear::Linear(const std::string& name, std::int64_t in, std::int64_t out)
    : w(name + ".w", {out, in}), b(name + ".b", {out}) {}

void Linear::init(Rng& rng) { init_trunc_normal(w, rng); }

ParamRefs Linear::params() { return {&w, &b}; }

Tensor Linear::forward(const Tensor& x) {
    require_shape(x.rank() == 2 && x.size(1) == in_features(),
                  "linear " + w.name + ": bad input " + shape_str(x.shape));
    x_cache = x;
    const auto n = x.size(0), in = in_features(), out = out_features();
    Tensor y({n, out});
    MapM ym(y.data(), n, out);
    ym.noalias() = MapC(x.data(), n, in) * MapC(w.value.data(), out, in).transpose();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t o = 0; o < out; ++o) y[i * out + o] += b.value[o];
    return y;
}

Tensor Linear::backward(const Tensor& dy) {
    const auto n = x_cache.size(0), in = in_features(), out = out_features();
    require_shape(dy.rank() == 2 && dy.size(0) == n && dy.size(1) == out,
                  "linear " + w.name + ": bad grad " + shape_str(dy.shape));
    MapM(w.grad.data(), out, in).noalias() +=
        MapC(dy.data(), n, out).transpose() * MapC(x_cache.data(), n, in);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t o = 0; o < out; ++o) b.grad[o] += dy[i * out + o];
    Tensor dx({n, in});
    MapM(dx.data(), n, in).noalias() = MapC(dy.data(), n, out) * MapC(w.value.data(), out, in);
    return dx;
}

// --- Dropout ------------------------------------------------------------------

Tensor Dropout::forward(const Tensor& x, Mode mode, Rng& rng) {
    if (mode == Mode::Eval || rate <= 0.0) {
        mask_cache = Tensor();
        return x;
    }
    mask_cache = Tensor(x.shape);
    Tensor y(x.shape);
    const double keep = 1.0 - rate;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
        mask_cache[i] = m;
        y[i] = x[i] * m;
    }
    return y;
}

Tensor Dropout::backward(const Tensor& dy) {
    if (mask_cache.numel() == 0) return dy;
    Tensor dx(dy.shape);
    for (std::int64_t i = 0; i < dy.numel(); ++i) dx[i] = dy[i] * mask_cache[i];
    return dx;
}

// --- Mlp ----------------------------------------------------------------------

Mlp::Mlp(const std::string& name, std::int64_t in, std::int64_t hidden, std::int64_t out,
         double dropout_rate)
    : fc1(name + ".fc1", in, hidden), fc2(name + ".fc2", hidden, out) {
    drop.rate = dropout_rate;
    use_dropout = dropout_rate > 0.0;
}

void Mlp::init(Rng& rng) {
    fc1.init(rng);
    fc2.init(rng);
}

ParamRefs Mlp::params() {
    ParamRefs p = fc1.params();
    for (auto* q : fc2.params()) p.push_back(q);
    return p;
}

Tensor Mlp::forward(const Tensor& x, Mode mode, Rng& rng) {
    Tensor h = fc1.forward(x);
    for (auto& v : h.v) v = v > 0.0 ? v : 0.0;
    h_cache = h;
    if (use_dropout) h = drop.forward(h, mode, rng);
    return fc2.forward(h);
}

Tensor Mlp::backward(const Tensor& dy) {
    Tensor dh = fc2.backward(dy);
    if (use_dropout) dh = drop.backward(dh);
    for (std::int64_t i = 0; i < dh.numel(); ++i)
        if (h_cache[i] <= 0.0) dh[i] = 0.0;
    return fc1.backward(dh);
}

// --- Conv3d -------------------------------------------------------------------

namespace {

struct ConvDims {
    std::int64_t C, D, H, W, OD, OH, OW;
};

ConvDims conv_dims(const Tensor& x, int k, int stride, int pad) {
    ConvDims d;
    d.C = x.size(1);
    d.D = x.size(2);
    d.H = x.size(3);
    d.W = x.size(4);
    d.OD = (d.D + 2 * pad - k) / stride + 1;
    d.OH = (d.H + 2 * pad - k) / stride + 1;
    d.OW = (d.W + 2 * pad - k) / stride + 1;
    return d;
}

// cols has shape (C*k^3, OD*OH*OW), row-major.
void im2col(const double* x, const ConvDims& d, int k, int stride, int pad, double* cols) {
    const std::int64_t out_s = d.OD * d.OH * d.OW;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < d.C; ++c) {
        const double* xc = x + c * d.D * d.H * d.W;
        for (int kz = 0; kz < k; ++kz)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx, ++row) {
                    double* out = cols + row * out_s;
                    std::int64_t i = 0;
                    for (std::int64_t oz = 0; oz < d.OD; ++oz) {
                        const std::int64_t z = oz * stride + kz - pad;
                        for (std::int64_t oy = 0; oy < d.OH; ++oy) {
                            const std::int64_t y = oy * stride + ky - pad;
                            if (z < 0 || z >= d.D || y < 0 || y >= d.H) {
                                for (std::int64_t ox = 0; ox < d.OW; ++ox) out[i++] = 0.0;
                                continue;
                            }
                            const double* xrow = xc + (z * d.H + y) * d.W;
                            for (std::int64_t ox = 0; ox < d.OW; ++ox) {
                                const std::int64_t xx = ox * stride + kx - pad;
                                out[i++] = (xx < 0 || xx >= d.W) ? 0.0 : xrow[xx];
                            }
                        }
                    }
                }
    }
}

// Scatter-adds cols back into dx (the adjoint of im2col).
void col2im(const double* cols, const ConvDims& d, int k, int stride, int pad, double* dx) {
    const std::int64_t out_s = d.OD * d.OH * d.OW;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < d.C; ++c) {
        double* xc = dx + c * d.D * d.H * d.W;
        for (int kz = 0; kz < k; ++kz)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx, ++row) {
                    const double* in = cols + row * out_s;
                    std::int64_t i = 0;
                    for (std::int64_t oz = 0; oz < d.OD; ++oz) {
                        const std::int64_t z = oz * stride + kz - pad;
                        for (std::int64_t oy = 0; oy < d.OH; ++oy) {
                            const std::int64_t y = oy * stride + ky - pad;
                            if (z < 0 || z >= d.D || y < 0 || y >= d.H) {
                                i += d.OW;
                                continue;
                            }
                            double* xrow = xc + (z * d.H + y) * d.W;
                            for (std::int64_t ox = 0; ox < d.OW; ++ox, ++i) {
                                const std::int64_t xx = ox * stride + kx - pad;
                                if (xx >= 0 && xx < d.W) xrow[xx] += in[i];
                            }
                        }
                    }
                }
    }
}

}  // namespace

Conv3d::Conv3d(const std::string& name, std::int64_t in, std::int64_t out, int kernel_,
               int stride_, int pad_)
    : w(name + ".w", {out, in, kernel_, kernel_, kernel_}),
      b(name + ".b", {out}),
      kernel(kernel_),
      stride(stride_),
      pad(pad_) {}

void Conv3d::init(Rng& rng) { init_trunc_normal(w, rng); }

ParamRefs Conv3d::params() { return {&w, &b}; }

std::vector<std::int64_t> Conv3d::out_shape(const Tensor& x) const {
    const ConvDims d = conv_dims(x, kernel, stride, pad);
    return {x.size(0), w.value.size(0), d.OD, d.OH, d.OW};
}

Tensor Conv3d::forward(const Tensor& x) {
    require_shape(x.rank() == 5 && x.size(1) == w.value.size(1),
                  "conv " + w.name + ": bad input " + shape_str(x.shape));
    x_cache = x;
    const ConvDims d = conv_dims(x, kernel, stride, pad);
    const std::int64_t B = x.size(0), Cout = w.value.size(0);
    const std::int64_t kk = w.value.size(1) * kernel * kernel * kernel;
    const std::int64_t out_s = d.OD * d.OH * d.OW;

    Tensor y({B, Cout, d.OD, d.OH, d.OW});
    Tensor cols({kk, out_s});
    for (std::int64_t bi = 0; bi < B; ++bi) {
        im2col(x.data() + bi * d.C * d.D * d.H * d.W, d, kernel, stride, pad, cols.data());
        MapM ym(y.data() + bi * Cout * out_s, Cout, out_s);
        ym.noalias() = MapC(w.value.data(), Cout, kk) * MapC(cols.data(), kk, out_s);
        for (std::int64_t c = 0; c < Cout; ++c)
            ym.row(c).array() += b.value[c];
    }
    return y;
}

Tensor Conv3d::backward(const Tensor& dy) {
    const Tensor& x = x_cache;
    const ConvDims d = conv_dims(x, kernel, stride, pad);
    const std::int64_t B = x.size(0), Cout = w.value.size(0);
    const std::int64_t kk = w.value.size(1) * kernel * kernel * kernel;
    const std::int64_t out_s = d.OD * d.OH * d.OW;
    require_shape(dy.size(0) == B && dy.size(1) == Cout && dy.size(2) == d.OD,
                  "conv " + w.name + ": bad grad " + shape_str(dy.shape));

    Tensor dx(x.shape);
    Tensor cols({kk, out_s});
    Tensor dcols({kk, out_s});
    for (std::int64_t bi = 0; bi < B; ++bi) {
        im2col(x.data() + bi * d.C * d.D * d.H * d.W, d, kernel, stride, pad, cols.data());
        MapC dym(dy.data() + bi * Cout * out_s, Cout, out_s);
        MapM(w.grad.data(), Cout, kk).noalias() += dym * MapC(cols.data(), kk, out_s).transpose();
        for (std::int64_t c = 0; c < Cout; ++c) b.grad[c] += dym.row(c).sum();
        MapM(dcols.data(), kk, out_s).noalias() =
            MapC(w.value.data(), Cout, kk).transpose() * dym;
        col2im(dcols.data(), d, kernel, stride, pad, dx.data() + bi * d.C * d.D * d.H * d.W);
    }
    return dx;
}

// --- ConvTranspose3d ------------------------------------------------------------

ConvTranspose3d::ConvTranspose3d(const std::string& name, std::int64_t in, std::int64_t out,
                                 int kernel_)
    : w(name + ".w", {in, out, kernel_, kernel_, kernel_}), b(name + ".b", {out}),
      kernel(kernel_) {}

void ConvTranspose3d::init(Rng& rng) { init_trunc_normal(w, rng); }

ParamRefs ConvTranspose3d::params() { return {&w, &b}; }

Tensor ConvTranspose3d::forward(const Tensor& x) {
    require_shape(x.rank() == 5 && x.size(1) == w.value.size(0),
                  "convT " + w.name + ": bad input " + shape_str(x.shape));
    x_cache = x;
    const std::int64_t B = x.size(0), Cin = x.size(1), Cout = w.value.size(1);
    const std::int64_t D = x.size(2), H = x.size(3), W = x.size(4);
    const int k = kernel;
    Tensor y({B, Cout, D * k, H * k, W * k});

    // kernel == stride: each input voxel paints its own k^3 block.
    for (std::int64_t bi = 0; bi < B; ++bi)
        for (std::int64_t co = 0; co < Cout; ++co) {
            double* yc = y.data() + ((bi * Cout + co) * D * k) * H * k * W * k;
            for (std::int64_t z = 0; z < D * k; ++z)
                for (std::int64_t yy = 0; yy < H * k; ++yy)
                    for (std::int64_t xx = 0; xx < W * k; ++xx)
                        yc[(z * H * k + yy) * W * k + xx] = b.value[co];
            for (std::int64_t ci = 0; ci < Cin; ++ci) {
                const double* xc = x.data() + ((bi * Cin + ci) * D) * H * W;
                const double* wk = w.value.data() + (ci * Cout + co) * k * k * k;
                for (std::int64_t z = 0; z < D; ++z)
                    for (std::int64_t yy = 0; yy < H; ++yy)
                        for (std::int64_t xx = 0; xx < W; ++xx) {
                            const double xv = xc[(z * H + yy) * W + xx];
                            for (int dz = 0; dz < k; ++dz)
                                for (int dyk = 0; dyk < k; ++dyk)
                                    for (int dxk = 0; dxk < k; ++dxk)
                                        yc[((z * k + dz) * H * k + yy * k + dyk) * W * k +
                                           xx * k + dxk] +=
                                            xv * wk[(dz * k + dyk) * k + dxk];
                        }
            }
        }
    return y;
}

Tensor ConvTranspose3d::backward(const Tensor& dy) {
    const Tensor& x = x_cache;
    const std::int64_t B = x.size(0), Cin = x.size(1), Cout = w.value.size(1);
    const std::int64_t D = x.size(2), H = x.size(3), W = x.size(4);
    const int k = kernel;
    require_shape(dy.size(1) == Cout && dy.size(2) == D * k,
                  "convT " + w.name + ": bad grad " + shape_str(dy.shape));

    Tensor dx(x.shape);
    for (std::int64_t bi = 0; bi < B; ++bi)
        for (std::int64_t co = 0; co < Cout; ++co) {
            const double* dyc = dy.data() + ((bi * Cout + co) * D * k) * H * k * W * k;
            for (std::int64_t z = 0; z < D * k; ++z)
                for (std::int64_t yy = 0; yy < H * k; ++yy)
                    for (std::int64_t xx = 0; xx < W * k; ++xx)
                        b.grad[co] += dyc[(z * H * k + yy) * W * k + xx];
            for (std::int64_t ci = 0; ci < Cin; ++ci) {
                const double* xc = x.data() + ((bi * Cin + ci) * D) * H * W;
                double* dxc = dx.data() + ((bi * Cin + ci) * D) * H * W;
                const double* wk = w.value.data() + (ci * Cout + co) * k * k * k;
                double* dwk = w.grad.data() + (ci * Cout + co) * k * k * k;
                for (std::int64_t z = 0; z < D; ++z)
                    for (std::int64_t yy = 0; yy < H; ++yy)
                        for (std::int64_t xx = 0; xx < W; ++xx) {
                            const double xv = xc[(z * H + yy) * W + xx];
                            double acc = 0.0;
                            for (int dz = 0; dz < k; ++dz)
                                for (int dyk = 0; dyk < k; ++dyk)
                                    for (int dxk = 0; dxk < k; ++dxk) {
                                        const double g =
                                            dyc[((z * k + dz) * H * k + yy * k + dyk) * W * k +
                                                xx * k + dxk];
                                        acc += g * wk[(dz * k + dyk) * k + dxk];
                                        dwk[(dz * k + dyk) * k + dxk] += g * xv;
                                    }
                            dxc[(z * H + yy) * W + xx] += acc;
                        }
            }
        }
    return dx;
}

// --- LayerNorm ------------------------------------------------------------------

LayerNorm::LayerNorm(const std::string& name, std::int64_t dim)
    : gamma(name + ".g", {dim}), beta(name + ".b", {dim}) {
    std::fill(gamma.value.v.begin(), gamma.value.v.end(), 1.0);
}

ParamRefs LayerNorm::params() { return {&gamma, &beta}; }

Tensor LayerNorm::forward(const Tensor& x) {
    const std::int64_t dim = gamma.value.size(0);
    require_shape(x.rank() >= 1 && x.shape.back() == dim,
                  "layernorm " + gamma.name + ": bad input " + shape_str(x.shape));
    const std::int64_t rows = x.numel() / dim;
    const double eps = 1e-5;

    Tensor y(x.shape);
    xhat_cache = Tensor(x.shape);
    inv_std_cache = Tensor({rows});
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * dim;
        double mean = 0.0;
        for (std::int64_t i = 0; i < dim; ++i) mean += xr[i];
        mean /= double(dim);
        double var = 0.0;
        for (std::int64_t i = 0; i < dim; ++i) var += (xr[i] - mean) * (xr[i] - mean);
        var /= double(dim);
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std_cache[r] = inv;
        for (std::int64_t i = 0; i < dim; ++i) {
            const double xh = (xr[i] - mean) * inv;
            xhat_cache[r * dim + i] = xh;
            y[r * dim + i] = gamma.value[i] * xh + beta.value[i];
        }
    }
    return y;
}

Tensor LayerNorm::backward(const Tensor& dy) {
    const std::int64_t dim = gamma.value.size(0);
    const std::int64_t rows = dy.numel() / dim;
    Tensor dx(dy.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* dyr = dy.data() + r * dim;
        const double* xh = xhat_cache.data() + r * dim;
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (std::int64_t i = 0; i < dim; ++i) {
            const double g = dyr[i] * gamma.value[i];
            sum_dy += g;
            sum_dy_xh += g * xh[i];
            gamma.grad[i] += dyr[i] * xh[i];
            beta.grad[i] += dyr[i];
        }
        const double inv = inv_std_cache[r];
        for (std::int64_t i = 0; i < dim; ++i) {
            const double g = dyr[i] * gamma.value[i];
            dx[r * dim + i] =
                inv * (g - sum_dy / double(dim) - xh[i] * sum_dy_xh / double(dim));
        }
    }
    return dx;
}

// --- activations ------------------------------------------------------------------

Tensor ReluOp::forward(const Tensor& x) {
    x_cache = x;
    Tensor y(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
    return y;
}

Tensor ReluOp::backward(const Tensor& dy) {
    Tensor dx(dy.shape);
    for (std::int64_t i = 0; i < dy.numel(); ++i) dx[i] = x_cache[i] > 0.0 ? dy[i] : 0.0;
    return dx;
}

namespace {
const double kInvSqrt2 = 0.7071067811865475244;
const double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor GeluOp::forward(const Tensor& x) {
    x_cache = x;
    Tensor y(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i)
        y[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
    return y;
}

Tensor GeluOp::backward(const Tensor& dy) {
    Tensor dx(dy.shape);
    for (std::int64_t i = 0; i < dy.numel(); ++i) {
        const double x = x_cache[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        dx[i] = dy[i] * (cdf + x * pdf);
    }
    return dx;
}

Tensor SigmoidOp::forward(const Tensor& x) {
    Tensor y(x.shape);
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
    y_cache = y;
    return y;
}

Tensor SigmoidOp::backward(const Tensor& dy) {
    Tensor dx(dy.shape);
    for (std::int64_t i = 0; i < dy.numel(); ++i)
        dx[i] = dy[i] * y_cache[i] * (1.0 - y_cache[i]);
    return dx;
}

Tensor softmax_lastdim(const Tensor& x) {
    const std::int64_t dim = x.shape.back();
    const std::int64_t rows = x.numel() / dim;
    Tensor y(x.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * dim;
        double* yr = y.data() + r * dim;
        double mx = xr[0];
        for (std::int64_t i = 1; i < dim; ++i) mx = std::max(mx, xr[i]);
        double sum = 0.0;
        for (std::int64_t i = 0; i < dim; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            sum += yr[i];
        }
        for (std::int64_t i = 0; i < dim; ++i) yr[i] /= sum;
    }
    return y;
}

Tensor softmax_backward_lastdim(const Tensor& dy, const Tensor& y) {
    const std::int64_t dim = y.shape.back();
    const std::int64_t rows = y.numel() / dim;
    Tensor dx(y.shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* dyr = dy.data() + r * dim;
        const double* yr = y.data() + r * dim;
        double dot = 0.0;
        for (std::int64_t i = 0; i < dim; ++i) dot += dyr[i] * yr[i];
        for (std::int64_t i = 0; i < dim; ++i) dx[r * dim + i] = yr[i] * (dyr[i] - dot);
    }
    return dx;
}

// --- pooling ----------------------------------------------------------------------

Tensor GlobalAvgPool::forward(const Tensor& x) {
    require_shape(x.rank() >= 3, "gap: input must be (B,C,spatial...)");
    in_shape_cache = x.shape;
    const std::int64_t B = x.size(0), C = x.size(1), S = spatial_numel(x);
    Tensor y({B, C});
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* xc = x.data() + (b * C + c) * S;
            double sum = 0.0;
            for (std::int64_t s = 0; s < S; ++s) sum += xc[s];
            y[b * C + c] = sum / double(S);
        }
    return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) {
    Tensor dx(in_shape_cache);
    const std::int64_t B = in_shape_cache[0], C = in_shape_cache[1];
    const std::int64_t S = dx.numel() / (B * C);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const double g = dy[b * C + c] / double(S);
            double* dxc = dx.data() + (b * C + c) * S;
            for (std::int64_t s = 0; s < S; ++s) dxc[s] = g;
        }
    return dx;
}

Tensor GlobalMaxPool::forward(const Tensor& x) {
    require_shape(x.rank() >= 3, "gmp: input must be (B,C,spatial...)");
    in_shape_cache = x.shape;
    const std::int64_t B = x.size(0), C = x.size(1), S = spatial_numel(x);
    Tensor y({B, C});
    argmax_cache.assign(std::size_t(B * C), 0);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* xc = x.data() + (b * C + c) * S;
            std::int64_t best = 0;
            for (std::int64_t s = 1; s < S; ++s)
                if (xc[s] > xc[best]) best = s;
            argmax_cache[std::size_t(b * C + c)] = best;
            y[b * C + c] = xc[best];
        }
    return y;
}

Tensor GlobalMaxPool::backward(const Tensor& dy) {
    Tensor dx(in_shape_cache);
    const std::int64_t B = in_shape_cache[0], C = in_shape_cache[1];
    const std::int64_t S = dx.numel() / (B * C);
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c)
            dx[(b * C + c) * S + argmax_cache[std::size_t(b * C + c)]] = dy[b * C + c];
    return dx;
}

}  // namespace fbn
