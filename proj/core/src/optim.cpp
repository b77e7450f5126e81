#include "fbn/optim.hpp"

#include <cmath>

#include "fbn/errors.hpp"

namespace fbn {

void AdamConfig::validate() const {
    if (lr <= 0.0) raise(ErrorCode::ConfigError, "learning rate must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        raise(ErrorCode::ConfigError, "Adam betas must lie in [0, 1)");
    if (eps <= 0.0) raise(ErrorCode::ConfigError, "Adam eps must be positive");
}

Adam::Adam(ParamRefs params, const AdamConfig& cfg) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
}

void Adam::step() {
    if (m_.empty()) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (auto* p : params_) {
            m_.emplace_back(p->value.shape);
            v_.emplace_back(p->value.shape);
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Parameter& p = *params_[k];
        Tensor& m = m_[k];
        Tensor& v = v_[k];
        for (std::int64_t i = 0; i < p.value.numel(); ++i) {
            const double g = p.grad[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            p.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

void Adam::zero_grad() {
    for (auto* p : params_) p->grad.zero();
}

}  // namespace fbn
