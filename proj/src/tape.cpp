#include "slim/tape.hpp"

namespace slim {

Var Tape::put(Tensor value, std::initializer_list<Var> inputs, BackwardFn back) {
    Node node;
    node.value = std::move(value);
    if (grad_enabled) {
        bool needs = false;
        for (Var v : inputs) {
            check(v);
            needs = needs || nodes_[static_cast<size_t>(v)].needs_grad;
        }
        node.needs_grad = needs;
        if (needs) node.back = std::move(back);
    }
    nodes_.push_back(std::move(node));
    return static_cast<Var>(nodes_.size() - 1);
}

Var Tape::leaf(const Tensor& value, bool needs_grad) {
    Node node;
    node.value = value;
    node.needs_grad = grad_enabled && needs_grad;
    nodes_.push_back(std::move(node));
    return static_cast<Var>(nodes_.size() - 1);
}

std::vector<Tensor> Tape::backward(Var loss) {
    check(loss);
    const Tensor& lv = nodes_[static_cast<size_t>(loss)].value;
    if (lv.numel() != 1) {
        throw std::invalid_argument("backward requires a scalar loss, got shape " + lv.shape_str());
    }
    std::vector<Tensor> grads(nodes_.size());
    grads[static_cast<size_t>(loss)] = Tensor::scalar(1.0);
    for (Var v = loss; v >= 0; --v) {
        Node& node = nodes_[static_cast<size_t>(v)];
        if (grads[static_cast<size_t>(v)].empty() || !node.back) continue;
        node.back(grads[static_cast<size_t>(v)], node.value, *this, grads);
    }
    return grads;
}

Tensor& Tape::accum(std::vector<Tensor>& grads, Var v, const std::vector<int64_t>& shape) {
    Tensor& g = grads[static_cast<size_t>(v)];
    if (g.empty()) g = Tensor::zeros(shape);
    return g;
}

}  // namespace slim
