#pragma once

#include <vector>

#include "fbn/tensor.hpp"

namespace fbn {

struct LossConfig {
    double alpha = 0.5;  // segmentation weight
    double beta = 1.0;   // classification weight
    double dice_smooth = 1e-5;
    std::vector<double> class_weights;  // empty = unweighted

    void validate() const;
};

// (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps) over one channel.
double soft_dice(const std::vector<double>& p, const std::vector<double>& g, double eps);

struct DiceResult {
    double value = 0.0;
    Tensor dprobs;  // gradient w.r.t. the probability tensor
};

// probs (B,4,D,H,W) channel probabilities, mask (B,D,H,W) or (B,1,D,H,W)
// integer labels 0..3. Loss = 1 - mean over batch*channels of soft dice.
DiceResult dice_probs(const Tensor& probs, const Tensor& mask, double eps);

struct DiceLogitsResult {
    double value = 0.0;
    Tensor dlogits;
};

// Softmax over channels, then dice_probs, with the chain rule folded in.
DiceLogitsResult dice_loss(const Tensor& logits, const Tensor& mask, double eps);

struct CeResult {
    double value = 0.0;
    Tensor dlogits;
};

// Mean weighted negative log-softmax of the true class.
CeResult ce_loss(const Tensor& logits, const std::vector<int>& y,
                 const std::vector<double>& class_weights = {});

struct TotalLoss {
    double total = 0.0, seg = 0.0, cla = 0.0;
    Tensor dseg_logits;  // alpha * dL_seg/dS
    Tensor dcla_logits;  // beta * dL_cla/dC
};

TotalLoss total_loss(const Tensor& seg_logits, const Tensor& mask, const Tensor& cla_logits,
                     const std::vector<int>& y, const LossConfig& cfg);

}  // namespace fbn
