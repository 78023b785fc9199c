#pragma once

#include <map>
#include <string>

#include "slim/slim_layer.hpp"

namespace slim {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 1.0;  // global-norm clip; 0 disables
};

// Adam with state keyed by parameter name; iteration order is the registry
// order, so updates are deterministic.
class Adam {
  public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    // grads maps parameter name -> gradient tensor (empty tensors mean zero).
    void step(const ParamRegistry& params, const std::map<std::string, Tensor>& grads);

    int64_t steps_taken() const { return t_; }

  private:
    struct State {
        Tensor m, v;
    };
    AdamConfig cfg_;
    std::map<std::string, State> state_;
    int64_t t_ = 0;
};

}  // namespace slim
