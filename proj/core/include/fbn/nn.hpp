#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fbn/rng.hpp"
#include "fbn/tensor.hpp"

namespace fbn {

// Trainable tensor with its gradient accumulator. All layers keep their
// forward caches as members, so one layer instance serves one in-flight
// forward/backward pair (concurrent training uses one model per worker).
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, std::vector<std::int64_t> shape)
        : name(std::move(n)), value(shape), grad(std::move(shape)) {}
};

using ParamRefs = std::vector<Parameter*>;

enum class Mode { Train, Eval };

// Truncated normal (|z| <= 2 sigma), snapped to float32-representable values
// so a freshly initialized model survives a checkpoint round trip bitwise.
void init_trunc_normal(Parameter& p, Rng& rng, double stddev = 0.02);

// --- shape helpers ----------------------------------------------------------

inline std::int64_t spatial_numel(const Tensor& t) {
    std::int64_t s = 1;
    for (int i = 2; i < t.rank(); ++i) s *= t.size(i);
    return s;
}

// --- dense layers -----------------------------------------------------------

struct Linear {
    Parameter w;  // (out, in)
    Parameter b;  // (out)
    Tensor x_cache;

    Linear() = default;
    Linear(const std::string& name, std::int64_t in, std::int64_t out);
    void init(Rng& rng);
    ParamRefs params();
    std::int64_t in_features() const { return w.value.size(1); }
    std::int64_t out_features() const { return w.value.size(0); }

    Tensor forward(const Tensor& x);   // (N, in) -> (N, out)
    Tensor backward(const Tensor& dy); // accumulates w.grad/b.grad, returns dx
};

struct Dropout {
    double rate = 0.5;
    Tensor mask_cache;

    Tensor forward(const Tensor& x, Mode mode, Rng& rng);
    Tensor backward(const Tensor& dy);
};

// linear -> ReLU -> (dropout) -> linear
struct Mlp {
    Linear fc1, fc2;
    Dropout drop;
    bool use_dropout = false;
    Tensor h_cache;  // post-ReLU

    Mlp() = default;
    Mlp(const std::string& name, std::int64_t in, std::int64_t hidden, std::int64_t out,
        double dropout_rate = 0.0);
    void init(Rng& rng);
    ParamRefs params();
    Tensor forward(const Tensor& x, Mode mode, Rng& rng);
    Tensor backward(const Tensor& dy);
};

// --- convolutions (B, C, D, H, W) --------------------------------------------

struct Conv3d {
    Parameter w;  // (out, in, k, k, k)
    Parameter b;  // (out)
    int kernel = 3, stride = 1, pad = 1;
    Tensor x_cache;

    Conv3d() = default;
    Conv3d(const std::string& name, std::int64_t in, std::int64_t out, int kernel, int stride,
           int pad);
    void init(Rng& rng);
    ParamRefs params();

    std::vector<std::int64_t> out_shape(const Tensor& x) const;
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
};

// Transposed conv with kernel == stride (non-overlapping upsample blocks).
struct ConvTranspose3d {
    Parameter w;  // (in, out, k, k, k)
    Parameter b;  // (out)
    int kernel = 2;
    Tensor x_cache;

    ConvTranspose3d() = default;
    ConvTranspose3d(const std::string& name, std::int64_t in, std::int64_t out, int kernel);
    void init(Rng& rng);
    ParamRefs params();

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
};

// --- normalization -----------------------------------------------------------

// Normalizes over the last dimension (token layout (..., C)).
struct LayerNorm {
    Parameter gamma, beta;
    Tensor xhat_cache;
    Tensor inv_std_cache;

    LayerNorm() = default;
    LayerNorm(const std::string& name, std::int64_t dim);
    ParamRefs params();
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
};

// --- activations -------------------------------------------------------------

struct ReluOp {
    Tensor x_cache;
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
};

struct GeluOp {
    Tensor x_cache;
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
};

struct SigmoidOp {
    Tensor y_cache;
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
};

// Softmax over the last dimension.
Tensor softmax_lastdim(const Tensor& x);
// dx given dy and y = softmax(x).
Tensor softmax_backward_lastdim(const Tensor& dy, const Tensor& y);

// --- pooling -----------------------------------------------------------------

struct GlobalAvgPool {
    std::vector<std::int64_t> in_shape_cache;
    Tensor forward(const Tensor& x);   // (B,C,spatial...) -> (B,C)
    Tensor backward(const Tensor& dy);
};

struct GlobalMaxPool {
    std::vector<std::int64_t> in_shape_cache;
    std::vector<std::int64_t> argmax_cache;
    Tensor forward(const Tensor& x);   // (B,C,spatial...) -> (B,C)
    Tensor backward(const Tensor& dy);
};

}  // namespace fbn
