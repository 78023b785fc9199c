#include "slim/gradcheck.hpp"

#include <cmath>

namespace slim {

double finite_diff_check(const LossBuilder& f, std::vector<Tensor> params, double h) {
    if (h < 1e-7 || h > 1e-3) {
        throw std::invalid_argument("finite_diff_check step " + std::to_string(h) +
                                    " outside [1e-7, 1e-3]");
    }
    auto eval = [&](bool with_grad, std::vector<Tensor>* grads_out) {
        Tape tape;
        tape.grad_enabled = with_grad;
        std::vector<Var> leaves;
        leaves.reserve(params.size());
        for (const Tensor& p : params) leaves.push_back(tape.leaf(p));
        Var loss = f(tape, leaves);
        const Tensor& lv = tape.val(loss);
        if (lv.numel() != 1) {
            throw std::invalid_argument("finite_diff_check loss must be scalar, got " + lv.shape_str());
        }
        check_finite(lv, "finite_diff_check loss");
        double value = lv.data[0];
        if (with_grad) {
            std::vector<Tensor> grads = tape.backward(loss);
            grads_out->clear();
            for (Var v : leaves) {
                Tensor g = grads[static_cast<size_t>(v)];
                if (g.empty()) g = Tensor::zeros(tape.val(v).shape);
                grads_out->push_back(std::move(g));
            }
        }
        return value;
    };

    std::vector<Tensor> tape_grads;
    eval(true, &tape_grads);

    double max_rel = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        for (size_t ei = 0; ei < params[pi].data.size(); ++ei) {
            const double saved = params[pi].data[ei];
            params[pi].data[ei] = saved + h;
            const double lp = eval(false, nullptr);
            params[pi].data[ei] = saved - h;
            const double lm = eval(false, nullptr);
            params[pi].data[ei] = saved;
            const double g_fd = (lp - lm) / (2.0 * h);
            const double g_tape = tape_grads[pi].data[ei];
            const double den = std::max({std::fabs(g_tape), std::fabs(g_fd), 1e-8});
            max_rel = std::max(max_rel, std::fabs(g_tape - g_fd) / den);
        }
    }
    return max_rel;
}

}  // namespace slim
