#pragma once

#include <string>
#include <utility>
#include <vector>

#include "fbn/backbone.hpp"
#include "fbn/cmd.hpp"
#include "fbn/loss.hpp"
#include "fbn/tafe.hpp"
#include "fbn/volume.hpp"

namespace fbn {

// Concatenates the two head logits and maps them through a small MLP to the
// final class logits.
class FusionHead {
  public:
    FusionHead(int n_cls, int hidden);
    void init(Rng& rng);
    ParamRefs params();

    Tensor forward(const Tensor& c_tafe, const Tensor& c_cmd, Mode mode, Rng& rng);
    // Gradients w.r.t. (c_tafe, c_cmd).
    std::pair<Tensor, Tensor> backward(const Tensor& dfinal);

    Mlp& mlp() { return mlp_; }

  private:
    int n_cls_;
    Mlp mlp_;
};

struct ModelConfig {
    BackboneConfig backbone;
    TafeConfig tafe;
    CmdConfig cmd;
    LossConfig loss;
    bool tafe_on = true;
    bool cmd_on = true;
    int fusion_hidden = 64;

    void validate() const;
    // Architecture fingerprint; checkpoints store its digest so a file trained
    // under one shape cannot be loaded into another silently.
    std::string signature() const;
};

struct ModelOutput {
    FeaturePyramid pyramid;
    SegOutput seg;
    Tensor tafe_logits;  // empty when the stream is disabled
    Tensor cmd_logits;
    Tensor logits;  // final class logits (B, n_cls)
};

// Full network: shared encoder-decoder plus the two classification streams
// and their fusion. One instance holds one in-flight forward/backward pair.
class Model {
  public:
    explicit Model(const ModelConfig& cfg);
    void init(Rng& rng);
    ParamRefs params();
    void zero_grad();

    // batch (B, 4, D, H, W), sequence order t1, t1c, t2, flair.
    ModelOutput forward(const Tensor& batch, Mode mode, Rng& rng);
    // dfinal: gradient on the final class logits; dseg: gradient on the
    // segmentation logits. Accumulates parameter gradients.
    void backward(const Tensor& dfinal, const Tensor& dseg);

    const ModelConfig& config() const { return cfg_; }

  private:
    ModelConfig cfg_;
    Encoder encoder_;
    Decoder decoder_;
    TafeHead tafe_;
    CmdModule cmd_;
    FusionHead fusion_;

    ModelOutput out_cache_;
};

// Stacks cases into a (N, 4, D, H, W) batch in manifest order; every case must
// match dims. Labels/masks are collected where present.
Tensor batch_from_cases(const std::vector<const Case*>& cases);
Tensor mask_from_cases(const std::vector<const Case*>& cases);
std::vector<int> labels_from_cases(const std::vector<const Case*>& cases);

}  // namespace fbn
