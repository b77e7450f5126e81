#pragma once

#include <vector>

#include "fbn/nn.hpp"

namespace fbn {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const;
};

// Adam with bias correction. First/second moment buffers are allocated lazily
// on the first step so the optimizer can be built before init.
class Adam {
  public:
    Adam(ParamRefs params, const AdamConfig& cfg);

    void step();
    void zero_grad();
    std::int64_t steps() const { return t_; }

  private:
    AdamConfig cfg_;
    ParamRefs params_;
    std::vector<Tensor> m_, v_;
    std::int64_t t_ = 0;
};

}  // namespace fbn
