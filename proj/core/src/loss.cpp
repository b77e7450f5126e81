#include "fbn/loss.hpp"

#include <cmath>

#include "fbn/backbone.hpp"
#include "fbn/errors.hpp"
#include "fbn/nn.hpp"

namespace fbn {

void LossConfig::validate() const {
    if (alpha < 0.0 || beta < 0.0) raise(ErrorCode::ConfigError, "loss: alpha and beta must be >= 0");
    if (alpha + beta <= 0.0) raise(ErrorCode::ConfigError, "loss: alpha + beta must be > 0");
    if (dice_smooth <= 0.0) raise(ErrorCode::ConfigError, "loss: dice_smooth must be > 0");
}

double soft_dice(const std::vector<double>& p, const std::vector<double>& g, double eps) {
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        inter += p[i] * g[i];
        psum += p[i];
        gsum += g[i];
    }
    return (2.0 * inter + eps) / (psum + gsum + eps);
}

DiceResult dice_probs(const Tensor& probs, const Tensor& mask, double eps) {
    const std::int64_t B = probs.size(0), C = probs.size(1), S = spatial_numel(probs);
    if (mask.numel() != B * S)
        raise(ErrorCode::ShapeError, "dice: mask " + shape_str(mask.shape) + " does not cover probs " +
                         shape_str(probs.shape));
    std::vector<int> labels(B * S);
    for (std::int64_t i = 0; i < B * S; ++i) {
        double m = mask.v[i];
        int lab = int(std::llround(m));
        if (std::abs(m - lab) > 1e-9 || lab < 0 || lab >= C)
            raise(ErrorCode::InvalidMask, "dice: mask value " + std::to_string(m) + " outside 0.." +
                              std::to_string(C - 1));
        labels[i] = lab;
    }
    DiceResult out;
    out.dprobs = Tensor(probs.shape);
    double acc = 0.0;
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            double inter = 0.0, psum = 0.0, gsum = 0.0;
            const double* p = probs.data() + (b * C + c) * S;
            for (std::int64_t s = 0; s < S; ++s) {
                double g = labels[b * S + s] == c ? 1.0 : 0.0;
                inter += p[s] * g;
                psum += p[s];
                gsum += g;
            }
            double denom = psum + gsum + eps;
            acc += (2.0 * inter + eps) / denom;
            // d(1 - mean dice)/dp = -(2g*denom - (2*inter+eps)) / denom^2 / (B*C)
            double* dp = out.dprobs.v.data() + (b * C + c) * S;
            for (std::int64_t s = 0; s < S; ++s) {
                double g = labels[b * S + s] == c ? 1.0 : 0.0;
                dp[s] = -(2.0 * g * denom - (2.0 * inter + eps)) / (denom * denom) /
                        double(B * C);
            }
        }
    out.value = 1.0 - acc / double(B * C);
    return out;
}

DiceLogitsResult dice_loss(const Tensor& logits, const Tensor& mask, double eps) {
    Tensor probs = channel_softmax(logits);
    DiceResult r = dice_probs(probs, mask, eps);
    DiceLogitsResult out;
    out.value = r.value;
    out.dlogits = channel_softmax_backward(r.dprobs, probs);
    return out;
}

CeResult ce_loss(const Tensor& logits, const std::vector<int>& y,
                 const std::vector<double>& class_weights) {
    const std::int64_t B = logits.size(0), n = logits.size(1);
    if (std::int64_t(y.size()) != B)
        raise(ErrorCode::ShapeError, "ce: " + std::to_string(y.size()) + " labels for batch " +
                         std::to_string(B));
    if (!class_weights.empty() && std::int64_t(class_weights.size()) != n)
        raise(ErrorCode::ConfigError, "ce: class_weights size must equal n_cls");
    for (int lab : y)
        if (lab < 0 || lab >= n)
            raise(ErrorCode::InvalidLabel, "ce: label " + std::to_string(lab) + " outside 0.." +
                               std::to_string(n - 1));
    CeResult out;
    out.dlogits = Tensor(logits.shape);
    double acc = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        double m = -1e300;
        for (std::int64_t j = 0; j < n; ++j) m = std::max(m, logits.v[b * n + j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < n; ++j) z += std::exp(logits.v[b * n + j] - m);
        double w = class_weights.empty() ? 1.0 : class_weights[y[b]];
        acc += w * (std::log(z) - (logits.v[b * n + y[b]] - m));
        for (std::int64_t j = 0; j < n; ++j) {
            double p = std::exp(logits.v[b * n + j] - m) / z;
            out.dlogits.v[b * n + j] = w * (p - (j == y[b] ? 1.0 : 0.0)) / double(B);
        }
    }
    out.value = acc / double(B);
    return out;
}

TotalLoss total_loss(const Tensor& seg_logits, const Tensor& mask, const Tensor& cla_logits,
                     const std::vector<int>& y, const LossConfig& cfg) {
    cfg.validate();
    TotalLoss out;
    DiceLogitsResult seg = dice_loss(seg_logits, mask, cfg.dice_smooth);
    CeResult cla = ce_loss(cla_logits, y, cfg.class_weights);
    out.seg = seg.value;
    out.cla = cla.value;
    out.total = cfg.alpha * seg.value + cfg.beta * cla.value;
    out.dseg_logits = std::move(seg.dlogits);
    for (auto& g : out.dseg_logits.v) g *= cfg.alpha;
    out.dcla_logits = std::move(cla.dlogits);
    for (auto& g : out.dcla_logits.v) g *= cfg.beta;
    return out;
}

}  // namespace fbn
