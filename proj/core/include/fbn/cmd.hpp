#pragma once

#include "fbn/nn.hpp"

namespace fbn {

struct CmdConfig {
    double gamma = 2.0;      // difference amplification, must be > 1
    double floor = 0.1;      // gating intensity floor in [0,1)
    int conv_channels = 16;  // shared conv stack width c
    int reduction = 4;       // channel-attention bottleneck c -> c/r -> c
    int spatial_kernel = 7;  // odd kernel for the spatial-attention convs
    int head_hidden = 64;
    int n_cls = 2;

    void validate() const;
};

// v * max(tumor_prob, floor), elementwise. Shapes must match.
Tensor soft_gate(const Tensor& v, const Tensor& tumor_prob, double floor);

// gamma * (f_t2 - f_flair); gamma <= 1 is a ConfigError.
Tensor differential(const Tensor& f_t2, const Tensor& f_flair, double gamma);

// A = CA (per channel) * SA (per position); F' = F * (1 + A) for both streams.
// ca: (B, c), sa: (B, 1, s...), streams: (B, c, s...).
std::pair<Tensor, Tensor> apply_mismatch(const Tensor& f_t2, const Tensor& f_flair,
                                         const Tensor& ca, const Tensor& sa);

// Intermediate maps from the last forward pass, for tests and debug export.
struct MismatchFeatures {
    Tensor f_t2, f_flair, f_diff;
    Tensor ca;       // (B, c)
    Tensor sa;       // (B, 1, s...)
    Tensor a;        // (B, c, s...)
    Tensor fp_t2, fp_flair;
};

class CmdModule {
  public:
    explicit CmdModule(const CmdConfig& cfg);
    void init(Rng& rng);
    ParamRefs params();

    // Volumes (B,1,D,H,W); tumor_prob (B,1,D,H,W) in [0,1]. Returns logits.
    Tensor forward(const Tensor& v_t2, const Tensor& v_flair, const Tensor& tumor_prob,
                   Mode mode, Rng& rng);
    // Returns the gradient w.r.t. tumor_prob (the only upstream tensor that
    // keeps training signal; the volumes themselves are inputs).
    Tensor backward(const Tensor& dlogits);

    const MismatchFeatures& features() const { return feat_; }
    const CmdConfig& config() const { return cfg_; }

  private:
    CmdConfig cfg_;
    Conv3d conv1_, conv2_;
    ReluOp conv_relu1_, conv_relu2_;
    Linear ca_fc1_, ca_fc2_;
    ReluOp ca_relu_;
    Conv3d sa_conv1_, sa_conv2_;
    ReluOp sa_relu_;
    Mlp head_;
    GlobalAvgPool gap_diff_, gap_t2_, gap_flair_;
    GlobalMaxPool gmp_diff_;

    MismatchFeatures feat_;
    Tensor v_t2_cache_, v_flair_cache_, gate_cache_, gate_open_cache_;
    Tensor ca_pre_, sa_pre_;          // pre-sigmoid activations
    std::vector<std::int64_t> pool_cat_shape_;
    std::vector<std::int64_t> chan_argmax_;  // spatial-attention channel-max picks
};

}  // namespace fbn
