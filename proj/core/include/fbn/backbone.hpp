#pragma once

#include <array>

#include "fbn/attention.hpp"
#include "fbn/nn.hpp"

namespace fbn {

enum class BlockKind { Attention, ConvResidual };

struct BackboneConfig {
    int in_channels = 4;
    int embed_dim = 8;  // C; stage i carries C*2^i channels (i = 0..3)
    std::array<int, 4> depths{1, 1, 1, 1};
    std::array<int, 4> num_heads{1, 2, 2, 4};
    int window = 4;
    std::array<std::int64_t, 3> input_size{32, 32, 32};
    BlockKind block_kind = BlockKind::Attention;

    std::int64_t stage_channels(int i) const { return std::int64_t(embed_dim) << i; }
    std::array<std::int64_t, 3> stage_grid(int i) const {
        return {input_size[0] >> (i + 1), input_size[1] >> (i + 1), input_size[2] >> (i + 1)};
    }
    // Throws ConfigError / ShapeError on an unbuildable configuration.
    void validate() const;
};

// x[0] (= x1, C channels, input/2 grid) ... x[3] (= x4, 8C, input/16).
struct FeaturePyramid {
    std::array<Tensor, 4> x;
};

struct SegOutput {
    Tensor logits;      // (B, 4, D, H, W)
    Tensor probs;       // channel softmax of logits
    Tensor tumor_prob;  // (B, 1, D, H, W): 1 - probs[background]
};

// Softmax over dim 1 of a (B, C, spatial...) map.
Tensor channel_softmax(const Tensor& x);
Tensor channel_softmax_backward(const Tensor& dy, const Tensor& y);

// Downsample by 2: concatenates each 2^3 neighborhood (8c vector), layernorm,
// linear to 2c.
struct PatchMerging {
    LayerNorm norm;
    Linear reduce;
    std::vector<std::int64_t> in_shape_cache;

    PatchMerging() = default;
    PatchMerging(const std::string& name, std::int64_t in_channels);
    void init(Rng& rng);
    ParamRefs params();
    Tensor forward(const Tensor& x);
    Tensor backward(const Tensor& dy);
};

class Encoder {
  public:
    explicit Encoder(const BackboneConfig& cfg);
    void init(Rng& rng);
    ParamRefs params();

    FeaturePyramid forward(const Tensor& batch);  // (B, in_ch, D, H, W)
    // dpyr holds the total gradient flowing into each stage output; returns
    // the gradient w.r.t. the input batch.
    Tensor backward(const FeaturePyramid& dpyr);

  private:
    BackboneConfig cfg_;
    Conv3d patch_embed_;
    LayerNorm embed_norm_;
    struct Stage {
        std::vector<SwinBlock> attn;
        std::vector<ConvResidualBlock> conv;
    };
    std::array<Stage, 4> stages_;
    std::array<PatchMerging, 3> merges_;

    Tensor stage_forward(int i, Tensor x);
    Tensor stage_backward(int i, Tensor d);
};

// U-Net style decoder over the pyramid: project every stage to a common
// width, fuse top-down with learned 2x upsampling and skip concatenation,
// then a final 2x transposed conv to 4-channel logits at input resolution.
class Decoder {
  public:
    explicit Decoder(const BackboneConfig& cfg);
    void init(Rng& rng);
    ParamRefs params();

    Tensor forward(const FeaturePyramid& pyr);          // seg logits
    FeaturePyramid backward(const Tensor& dlogits);     // grads w.r.t. pyramid

  private:
    BackboneConfig cfg_;
    std::array<Conv3d, 4> proj_;
    std::array<ReluOp, 4> proj_relu_;
    std::array<ConvTranspose3d, 3> up_;
    std::array<Conv3d, 3> mix_;
    std::array<ReluOp, 3> mix_relu_;
    ConvTranspose3d head_;
    std::array<std::vector<std::int64_t>, 3> cat_shapes_;
};

SegOutput make_seg_output(Tensor logits);

}  // namespace fbn
