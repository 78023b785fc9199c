#include <cmath>

#include "slim/gradcheck.hpp"
#include "slim/slim_layer.hpp"

namespace slim {

namespace {

Tensor randn(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = scale * rng.gaussian();
    return t;
}

// Random values bounded away from zero (for |x| kinks) or from ties.
Tensor randn_away_from_zero(std::vector<int64_t> shape, Rng& rng, double min_abs) {
    Tensor t = randn(std::move(shape), rng);
    for (double& v : t.data) {
        if (std::fabs(v) < min_abs) v = v < 0.0 ? v - min_abs : v + min_abs;
    }
    return t;
}

// Scalarize through a fixed random linear functional plus a quadratic term so
// every output element influences the loss.
Var scalarize(Tape& t, Var y, const Tensor& weights) {
    Var c = t.leaf(weights, false);
    return add(t, sum(t, mul(t, y, c)), scale(t, sum(t, mul(t, y, y)), 0.5));
}

// Full mixture layer: tape gradients of a scalar loss wrt every adapter
// matrix and the gate, against central differences, with masks fixed and
// cluster state frozen.
double slim_layer_check(uint64_t seed) {
    Rng rng(seed);
    SlimLayerConfig cfg;
    cfg.d_in = cfg.d_out = 6;
    cfg.n_identity = 1;
    cfg.n_lora = 2;
    cfg.rank = 2;
    cfg.top_k = 2;
    cfg.mask_rate = 0.5;
    cfg.n_clusters = 2;
    cfg.l1_coeff = 0.01;

    Rng init_rng(derive_seed(seed, "base"));
    Linear base = Linear::init(6, 6, init_rng, 0.3);
    SlimLayer layer = SlimLayer::attach(cfg, "toy", base, derive_seed(seed, "attach"));
    // Move adapters off their zero init so both matmul factors carry signal
    // and the |.|-kink of the L1 term stays away from zero.
    for (LoraAdapter& ad : layer.adapters) {
        ad.b_down = randn_away_from_zero({6, 2}, rng, 0.05);
        ad.a_up = randn_away_from_zero({2, 6}, rng, 0.05);
    }
    // Keep yielded weights clear of top-k ties.
    for (double& v : layer.router.gate.data) v = rng.gaussian();

    const Tensor x = randn({4, 6}, rng, 0.8);
    const Tensor lossw = randn({4, 6}, rng);
    std::vector<MaskSpec> masks;
    for (int64_t j = 0; j < cfg.n_lora; ++j) masks.push_back(sample_mask(6, 6, cfg.mask_rate, seed + 7 + static_cast<uint64_t>(j)));

    ParamRegistry params;
    layer.trainable_params(params);

    auto eval = [&](bool with_grad, std::map<std::string, Tensor>* grads_out) {
        Tape tape;
        tape.grad_enabled = with_grad;
        ForwardCtx ctx;
        ctx.mode = Mode::Train;
        ctx.freeze_clusters = true;
        ctx.mask_override = &masks;
        ctx.tokens_per_sample = 2;
        std::vector<std::pair<std::string, Var>> pv;
        std::vector<std::pair<Var, Var>> av;
        ctx.params_out = &pv;
        ctx.adapter_vars = &av;
        Var y = layer.forward(tape, tape.leaf(x, false), ctx);
        Var loss = training_loss(tape, scalarize(tape, y, lossw), av, cfg.l1_coeff);
        const double value = tape.val(loss).data[0];
        if (with_grad) {
            std::vector<Tensor> grads = tape.backward(loss);
            for (const auto& [name, var] : pv) {
                Tensor g = grads[static_cast<size_t>(var)];
                if (g.empty()) g = Tensor::zeros(tape.val(var).shape);
                (*grads_out)[name] = std::move(g);
            }
        }
        return value;
    };

    std::map<std::string, Tensor> tape_grads;
    eval(true, &tape_grads);

    const double h = 1e-5;
    double max_rel = 0.0;
    for (const NamedParam& p : params) {
        const Tensor& g = tape_grads.at(p.name);
        for (size_t i = 0; i < p.value->data.size(); ++i) {
            const double saved = p.value->data[i];
            p.value->data[i] = saved + h;
            const double lp = eval(false, nullptr);
            p.value->data[i] = saved - h;
            const double lm = eval(false, nullptr);
            p.value->data[i] = saved;
            const double fd = (lp - lm) / (2.0 * h);
            const double den = std::max({std::fabs(g.data[i]), std::fabs(fd), 1e-8});
            max_rel = std::max(max_rel, std::fabs(g.data[i] - fd) / den);
        }
    }
    return max_rel;
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(uint64_t seed) {
    std::vector<GradCheckCase> cases;
    Rng rng(seed);
    auto push = [&](std::string name, double err) { cases.push_back({std::move(name), err}); };

    {
        Tensor lw = randn({3, 2}, rng);
        push("matmul", finite_diff_check(
                           [&](Tape& t, const std::vector<Var>& p) {
                               return scalarize(t, matmul(t, p[0], p[1]), lw);
                           },
                           {randn({3, 4}, rng), randn({4, 2}, rng)}));
    }
    {
        Tensor lw = randn({3, 4}, rng);
        push("add_bias_row", finite_diff_check(
                                 [&](Tape& t, const std::vector<Var>& p) {
                                     return scalarize(t, add_bias_row(t, p[0], p[1]), lw);
                                 },
                                 {randn({3, 4}, rng), randn({4}, rng)}));
    }
    {
        Tensor lw = randn({2, 5}, rng);
        push("gelu", finite_diff_check(
                         [&](Tape& t, const std::vector<Var>& p) {
                             return scalarize(t, gelu(t, p[0]), lw);
                         },
                         {randn({2, 5}, rng)}));
        push("relu", finite_diff_check(
                         [&](Tape& t, const std::vector<Var>& p) {
                             return scalarize(t, relu(t, p[0]), lw);
                         },
                         {randn_away_from_zero({2, 5}, rng, 0.05)}));
    }
    {
        Tensor lw = randn({3, 6}, rng);
        push("rmsnorm_rows", finite_diff_check(
                                 [&](Tape& t, const std::vector<Var>& p) {
                                     return scalarize(t, rmsnorm_rows(t, p[0], p[1]), lw);
                                 },
                                 {randn({3, 6}, rng), randn_away_from_zero({6}, rng, 0.1)}));
    }
    {
        Tensor lw = randn({2, 5}, rng);
        push("softmax_rows", finite_diff_check(
                                 [&](Tape& t, const std::vector<Var>& p) {
                                     return scalarize(t, softmax_rows(t, p[0]), lw);
                                 },
                                 {randn({2, 5}, rng)}));
    }
    {
        Tensor lw = randn({3, 4}, rng);
        push("scale_rows", finite_diff_check(
                               [&](Tape& t, const std::vector<Var>& p) {
                                   return scalarize(t, scale_rows(t, p[0], p[1]), lw);
                               },
                               {randn({3, 4}, rng), randn({3}, rng)}));
    }
    {
        Tensor lw = randn({3, 5}, rng);
        push("mask_cols", finite_diff_check(
                              [&](Tape& t, const std::vector<Var>& p) {
                                  return scalarize(t, mask_cols(t, p[0], {1, 3}), lw);
                              },
                              {randn({3, 5}, rng)}));
    }
    {
        // Margins keep the selection stable under the FD perturbation.
        Tensor x({3, 6});
        for (int64_t i = 0; i < 18; ++i) x.data[static_cast<size_t>(i)] = 0.3 * static_cast<double>((i * 7) % 11) + 0.01 * rng.gaussian();
        Tensor lw = randn({3, 6}, rng);
        push("topk_softmax_rows", finite_diff_check(
                                      [&](Tape& t, const std::vector<Var>& p) {
                                          return scalarize(t, topk_softmax_rows(t, p[0], 2), lw);
                                      },
                                      {x}));
    }
    {
        std::vector<std::pair<int32_t, int32_t>> targets{{0, 2}, {1, 0}, {3, 6}};
        push("cross_entropy_mean", finite_diff_check(
                                       [&](Tape& t, const std::vector<Var>& p) {
                                           return cross_entropy_mean(t, p[0], targets);
                                       },
                                       {randn({4, 7}, rng)}));
    }
    {
        std::vector<int32_t> ids{0, 3, 3, 5, 1};
        Tensor lw = randn({5, 4}, rng);
        push("embedding", finite_diff_check(
                              [&](Tape& t, const std::vector<Var>& p) {
                                  return scalarize(t, embedding(t, p[0], ids), lw);
                              },
                              {randn({6, 4}, rng)}));
    }
    {
        Tensor lw = randn({8, 4}, rng);
        push("causal_attention", finite_diff_check(
                                     [&](Tape& t, const std::vector<Var>& p) {
                                         return scalarize(t, causal_attention(t, p[0], p[1], p[2], 2, 4, 2), lw);
                                     },
                                     {randn({8, 4}, rng), randn({8, 4}, rng), randn({8, 4}, rng)}));
    }
    {
        push("mean_abs", finite_diff_check(
                             [&](Tape& t, const std::vector<Var>& p) { return mean_abs(t, p[0]); },
                             {randn_away_from_zero({3, 4}, rng, 0.05)}));
    }
    {
        Tensor lw = randn({3, 5}, rng);
        push("lora_forward", finite_diff_check(
                                 [&](Tape& t, const std::vector<Var>& p) {
                                     return scalarize(t, lora_forward(t, p[0], p[1], p[2]), lw);
                                 },
                                 {randn({5, 2}, rng), randn({2, 5}, rng), randn({3, 5}, rng)}));
    }
    {
        const MaskSpec mask = sample_mask(5, 5, 0.5, seed + 11);
        Tensor lw = randn({3, 5}, rng);
        push("fast_masked_forward",
             finite_diff_check(
                 [&](Tape& t, const std::vector<Var>& p) {
                     return scalarize(t, fast_masked_forward(t, p[0], p[1], mask, p[2]), lw);
                 },
                 {randn({5, 2}, rng), randn({2, 5}, rng), randn({3, 5}, rng)}));
    }
    {
        push("l1_penalty", finite_diff_check(
                               [&](Tape& t, const std::vector<Var>& p) {
                                   return l1_penalty(t, {{p[0], p[1]}, {p[2], p[3]}});
                               },
                               {randn_away_from_zero({5, 2}, rng, 0.05),
                                randn_away_from_zero({2, 5}, rng, 0.05),
                                randn_away_from_zero({5, 2}, rng, 0.05),
                                randn_away_from_zero({2, 5}, rng, 0.05)}));
    }
    {
        const Tensor w = randn({5, 5}, rng, 0.4);
        const Tensor b = randn({5}, rng, 0.1);
        Tensor lw = randn({3, 5}, rng);
        push("lora_baseline_layer",
             finite_diff_check(
                 [&](Tape& t, const std::vector<Var>& p) {
                     Var wv = t.leaf(w, false);
                     Var bv = t.leaf(b, false);
                     return scalarize(t, lora_baseline_forward(t, wv, bv, p[0], p[1], p[2]), lw);
                 },
                 {randn({5, 2}, rng), randn({2, 5}, rng), randn({3, 5}, rng)}));
    }
    {
        const Tensor w = randn({5, 5}, rng, 0.4);
        const Tensor b = randn({5}, rng, 0.1);
        Tensor lw = randn({3, 5}, rng);
        push("mixlora_baseline_layer",
             finite_diff_check(
                 [&](Tape& t, const std::vector<Var>& p) {
                     Var wv = t.leaf(w, false);
                     Var bv = t.leaf(b, false);
                     return scalarize(
                         t, mixlora_baseline_forward(t, wv, bv, {{p[0], p[1]}, {p[2], p[3]}}, p[4], p[5]),
                         lw);
                 },
                 {randn({5, 2}, rng), randn({2, 5}, rng), randn({5, 2}, rng), randn({2, 5}, rng),
                  randn({5, 2}, rng), randn({3, 5}, rng)}));
    }
    cases.push_back({"slim_layer", slim_layer_check(seed + 101)});
    return cases;
}

}  // namespace slim
