#pragma once

#include "fbn/backbone.hpp"
#include "fbn/nn.hpp"

namespace fbn {

struct TafeConfig {
    int depth = 4;        // 1 = deepest stage only, k = deepest k stages
    int head_hidden = 64;
    int n_cls = 2;        // 1 selects single-logit sigmoid mode
    double dropout_rate = 0.5;

    void validate() const;
    // Classifier input width for a backbone of base width embed_dim.
    std::int64_t feature_width(int embed_dim) const;
};

// Mean over all spatial positions per channel: (B, d, s...) -> (B, d).
Tensor gap(const Tensor& x);

class TafeHead {
  public:
    TafeHead(const TafeConfig& cfg, int embed_dim);
    void init(Rng& rng);
    ParamRefs params();

    Tensor aggregate(const FeaturePyramid& pyr);
    Tensor classify(const Tensor& features, Mode mode, Rng& rng);
    Tensor forward(const FeaturePyramid& pyr, Mode mode, Rng& rng);
    // Accumulates stage gradients into dpyr (adds to whatever is there).
    void backward(const Tensor& dlogits, FeaturePyramid& dpyr);

  private:
    TafeConfig cfg_;
    int first_stage_;
    std::array<GlobalAvgPool, 4> pools_;
    std::array<std::int64_t, 4> widths_{};
    Mlp head_;
};

}  // namespace fbn
