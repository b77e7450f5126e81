#pragma once

#include <array>
#include <memory>

#include "fbn/nn.hpp"

namespace fbn {

// Splits a feature map (B, C, D, H, W) into non-overlapping windows of
// w^3 tokens: output (B*nW, T, C) with T = wd*wh*ww. The window extent is
// clamped to the grid per axis by the caller.
Tensor window_partition(const Tensor& x, const std::array<int, 3>& win);
Tensor window_reverse(const Tensor& tokens, const std::array<int, 3>& win,
                      const std::vector<std::int64_t>& x_shape);

// Cyclic roll of the spatial axes by -shift (undo with +shift).
Tensor cyclic_shift(const Tensor& x, const std::array<int, 3>& shift);

// Additive attention mask for shifted windows: (nW_spatial, T, T) of
// {0, -1e9}; pairs of tokens from different pre-shift regions must not
// attend to each other.
Tensor shifted_window_mask(const std::array<std::int64_t, 3>& grid,
                           const std::array<int, 3>& win, const std::array<int, 3>& shift);

// Multi-head self-attention within each window, optionally masked.
struct WindowAttention {
    int heads = 1;
    Linear qkv;   // C -> 3C
    Linear proj;  // C -> C

    // caches
    Tensor q_cache, k_cache, v_cache, attn_cache;

    WindowAttention() = default;
    WindowAttention(const std::string& name, std::int64_t dim, int heads);
    void init(Rng& rng);
    ParamRefs params();

    // tokens: (N, T, C); mask: empty or (nW_spatial, T, T) with
    // N == B * nW_spatial.
    Tensor forward(const Tensor& tokens, const Tensor& mask);
    Tensor backward(const Tensor& dy);
};

// One transformer block: window (optionally shifted) attention and a GELU MLP,
// both pre-normalized with residual connections. Operates on (B,C,D,H,W).
struct SwinBlock {
    std::int64_t dim = 0;
    int window = 4;
    bool shifted = false;

    LayerNorm norm1, norm2;
    WindowAttention attn;
    Linear mlp_fc1, mlp_fc2;
    GeluOp gelu;

    // geometry caches from the last forward
    std::array<int, 3> eff_win{};
    std::array<int, 3> eff_shift{};
    std::vector<std::int64_t> x_shape_cache;
    Tensor mask_cache;
    Tensor tok_cache, a_cache, norm2_in_cache;

    SwinBlock() = default;
    SwinBlock(const std::string& name, std::int64_t dim, int heads, int window, bool shifted,
              std::int64_t mlp_ratio = 4);
    void init(Rng& rng);
    ParamRefs params();

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
};

// Shape-compatible convolutional fallback: x + conv2(relu(conv1(x))).
struct ConvResidualBlock {
    Conv3d conv1, conv2;
    ReluOp relu;

    ConvResidualBlock() = default;
    ConvResidualBlock(const std::string& name, std::int64_t dim);
    void init(Rng& rng);
    ParamRefs params();

    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
};

}  // namespace fbn
