#include "slim/optim.hpp"

#include <cmath>

namespace slim {

void Adam::step(const ParamRegistry& params, const std::map<std::string, Tensor>& grads) {
    ++t_;
    // Global-norm clip over all present gradients.
    double clip_scale = 1.0;
    if (cfg_.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& [name, g] : grads) {
            (void)name;
            for (double v : g.data) sq += v * v;
        }
        const double norm = std::sqrt(sq);
        if (norm > cfg_.grad_clip) clip_scale = cfg_.grad_clip / norm;
    }
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (const NamedParam& p : params) {
        auto it = grads.find(p.name);
        if (it == grads.end() || it->second.empty()) continue;
        const Tensor& g = it->second;
        if (!same_shape(g, *p.value)) {
            throw std::invalid_argument("gradient shape mismatch for " + p.name);
        }
        State& st = state_[p.name];
        if (st.m.empty()) {
            st.m = Tensor::zeros(p.value->shape);
            st.v = Tensor::zeros(p.value->shape);
        }
        for (size_t i = 0; i < g.data.size(); ++i) {
            const double gv = g.data[i] * clip_scale;
            st.m.data[i] = cfg_.beta1 * st.m.data[i] + (1.0 - cfg_.beta1) * gv;
            st.v.data[i] = cfg_.beta2 * st.v.data[i] + (1.0 - cfg_.beta2) * gv * gv;
            const double mhat = st.m.data[i] / bc1;
            const double vhat = st.v.data[i] / bc2;
            p.value->data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

}  // namespace slim
