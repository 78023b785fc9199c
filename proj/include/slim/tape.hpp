#pragma once

#include <functional>
#include <initializer_list>
#include <vector>

#include "slim/tensor.hpp"

namespace slim {

// Handle to a value recorded on the tape.
using Var = int32_t;

// Define-by-run reverse-mode tape. Every forward op appends a node holding
// the output value and a closure that scatters the output gradient into the
// input gradients. backward() replays the nodes in exact reverse creation
// order; fan-out accumulates additively.
class Tape {
  public:
    // gout: gradient of the loss wrt this node's output; out: the node's own
    // forward output (saved on the tape).
    using BackwardFn =
        std::function<void(const Tensor& gout, const Tensor& out, Tape& tape, std::vector<Tensor>& grads)>;

    bool grad_enabled = true;

    Var put(Tensor value, std::initializer_list<Var> inputs, BackwardFn back);
    Var leaf(const Tensor& value, bool needs_grad = true);

    const Tensor& val(Var v) const {
        check(v);
        return nodes_[static_cast<size_t>(v)].value;
    }
    bool needs_grad(Var v) const {
        check(v);
        return nodes_[static_cast<size_t>(v)].needs_grad;
    }

    // Gradient for every node reachable from `loss` (a scalar). Unreached or
    // non-differentiable nodes get an empty tensor, which reads as zero.
    std::vector<Tensor> backward(Var loss);

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Returns the gradient buffer for v, allocating zeros on first touch.
    static Tensor& accum(std::vector<Tensor>& grads, Var v, const std::vector<int64_t>& shape);

  private:
    struct Node {
        Tensor value;
        BackwardFn back;
        bool needs_grad = false;
    };

    void check(Var v) const {
        if (v < 0 || static_cast<size_t>(v) >= nodes_.size()) {
            throw std::invalid_argument("tape variable " + std::to_string(v) + " is not on this tape");
        }
    }

    std::vector<Node> nodes_;
};

}  // namespace slim
