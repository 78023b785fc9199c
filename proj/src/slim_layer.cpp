#include "slim/slim_layer.hpp"

#include <algorithm>

namespace slim {

void SlimLayerConfig::validate() const {
    if (d_in < 1 || d_out < 1) throw std::invalid_argument("layer extents must be positive");
    if (n_identity < 0 || n_lora < 0 || n_experts() < 1) {
        throw std::invalid_argument("layer needs a nonnegative expert split with at least one expert");
    }
    if (n_identity >= 1 && identity_mode == IdentityMode::Residual && d_in != d_out) {
        throw std::invalid_argument("identity experts in residual mode require d_in == d_out, got " +
                                    std::to_string(d_in) + " vs " + std::to_string(d_out));
    }
    if (top_k < 1 || top_k > n_experts()) {
        throw std::invalid_argument("top_k " + std::to_string(top_k) + " out of range for " +
                                    std::to_string(n_experts()) + " experts");
    }
    if (!(mask_rate >= 0.0 && mask_rate < 1.0)) throw std::invalid_argument("mask_rate outside [0, 1)");
    if (n_lora > 0 && (rank < 1 || rank > std::min(d_in, d_out))) {
        throw std::invalid_argument("rank out of range for layer extents");
    }
    if (n_clusters < 1) throw std::invalid_argument("need at least one cluster");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum outside [0, 1)");
    if (l1_coeff < 0.0) throw std::invalid_argument("l1_coeff must be nonnegative");
    if (route_override == RouteOverride::AllIdentity && top_k > n_identity) {
        throw std::invalid_argument("identity route override requires top_k <= n_identity");
    }
}

Linear Linear::init(int64_t d_in, int64_t d_out, Rng& rng, double std) {
    Linear l;
    l.weight = Tensor({d_in, d_out});
    for (double& v : l.weight.data) v = std * rng.gaussian();
    l.bias = Tensor::zeros({d_out});
    return l;
}

Var linear_forward(Tape& t, Var w, Var b, Var x) { return add_bias_row(t, matmul(t, x, w), b); }

SlimLayer SlimLayer::attach(const SlimLayerConfig& cfg, std::string name, const Linear& base,
                            uint64_t seed) {
    cfg.validate();
    SlimLayer layer;
    layer.cfg = cfg;
    layer.name = std::move(name);
    layer.weight = base.weight;
    layer.bias = base.bias;
    // Seed tags use the LoRA ordinal (not the global expert index) so adapter
    // initialization does not shift when the identity-expert count changes.
    for (int64_t i = 0; i < cfg.n_lora; ++i) {
        Rng rng(derive_seed(seed, layer.name + ".lora" + std::to_string(i)));
        layer.adapters.push_back(LoraAdapter::init(cfg.d_in, cfg.d_out, cfg.rank, rng));
    }
    {
        Rng rng(derive_seed(seed, layer.name + ".gate"));
        layer.router = Router::init(cfg.d_in, cfg.n_experts(), rng);
    }
    layer.clusters = SlidingClusters::init(cfg.n_clusters, cfg.d_in, cfg.momentum,
                                           derive_seed(seed, layer.name + ".clusters"));
    layer.inference_mask_seeds.resize(static_cast<size_t>(cfg.n_lora));
    for (int64_t i = 0; i < cfg.n_lora; ++i) {
        layer.inference_mask_seeds[static_cast<size_t>(i)] =
            derive_seed(seed, layer.name + ".infer_mask" + std::to_string(i));
    }
    layer.rebuild_inference_masks();
    return layer;
}

void SlimLayer::rebuild_inference_masks() {
    inference_masks.clear();
    for (int64_t i = 0; i < cfg.n_lora; ++i) {
        inference_masks.push_back(sample_mask(cfg.d_in, cfg.d_out, cfg.mask_rate,
                                              inference_mask_seeds[static_cast<size_t>(i)],
                                              cfg.paper_masking_formula));
    }
}

Var SlimLayer::forward(Tape& t, Var x, ForwardCtx& ctx) {
    const Tensor& xv = t.val(x);
    if (xv.ndim() != 2 || xv.shape[1] != cfg.d_in) {
        throw std::invalid_argument("slim_forward input " + xv.shape_str() + " does not match d_in=" +
                                    std::to_string(cfg.d_in));
    }
    const int64_t n = xv.shape[0];
    const int64_t tps = ctx.tokens_per_sample;
    if (tps < 1 || n % tps != 0) {
        throw std::invalid_argument("slim_forward rows not divisible into samples");
    }
    const int64_t n_samples = n / tps;
    const bool train = ctx.mode == Mode::Train;

    Var w = t.leaf(weight, false);
    Var b = t.leaf(bias, false);
    Var base = linear_forward(t, w, b, x);

    // Per-sample cluster assignment and distance (pre-update center), then
    // the EMA update in train mode.
    std::vector<double> d_rows(static_cast<size_t>(n), 1.0);
    if (cfg.yield_enabled) {
        for (int64_t s = 0; s < n_samples; ++s) {
            std::vector<double> pooled = pool_tokens(xv, s * tps, (s + 1) * tps);
            const int idx = assign_cluster(clusters, pooled);
            const double d = compute_distance(clusters, idx, pooled, cfg.yield_offset, cfg.yield_clamp);
            for (int64_t r = s * tps; r < (s + 1) * tps; ++r) d_rows[static_cast<size_t>(r)] = d;
            if (train && !ctx.freeze_clusters) update_clusters(clusters, pooled, idx);
        }
    } else if (train && !ctx.freeze_clusters) {
        for (int64_t s = 0; s < n_samples; ++s) {
            std::vector<double> pooled = pool_tokens(xv, s * tps, (s + 1) * tps);
            update_clusters(clusters, pooled, assign_cluster(clusters, pooled));
        }
    }

    // Fresh masks each training step (sampled for every expert so the RNG
    // stream does not depend on routing); fixed seeded masks at inference.
    std::vector<MaskSpec> step_masks;
    const std::vector<MaskSpec>* masks = &inference_masks;
    if (ctx.mask_override) {
        masks = ctx.mask_override;
    } else if (train && cfg.route_override == RouteOverride::None) {
        if (!ctx.rng) throw std::invalid_argument("train-mode slim_forward needs an rng");
        step_masks.reserve(static_cast<size_t>(cfg.n_lora));
        for (int64_t i = 0; i < cfg.n_lora; ++i) {
            step_masks.push_back(sample_mask(cfg.d_in, cfg.d_out, cfg.mask_rate, ctx.rng->next_u64(),
                                             cfg.paper_masking_formula));
        }
        masks = &step_masks;
    }
    if (static_cast<int64_t>(masks->size()) != cfg.n_lora) {
        throw std::invalid_argument("slim_forward needs one mask per LoRA expert");
    }

    // Routing. Under the all-identity override the gate is bypassed and the
    // K lowest (identity) indices are selected with their full weight.
    std::vector<std::vector<int32_t>> selected;
    Var what = -1;
    if (cfg.route_override == RouteOverride::AllIdentity) {
        selected.assign(static_cast<size_t>(n), {});
        for (auto& s : selected) {
            for (int64_t i = 0; i < cfg.top_k; ++i) s.push_back(static_cast<int32_t>(i));
        }
    } else {
        Var gate = t.leaf(router.gate, true);
        if (ctx.params_out) ctx.params_out->emplace_back(name + ".gate", gate);
        Var logits = route_logits(t, gate, x);
        Var yielded = cfg.yield_enabled ? yield_weights(t, logits, cfg.n_identity, d_rows) : logits;
        what = select_topk(t, yielded, cfg.top_k, &selected);
    }

    if (ctx.selection_counts) {
        ctx.selection_counts->resize(static_cast<size_t>(cfg.n_experts()), 0);
        for (const auto& s : selected) {
            for (int32_t c : s) (*ctx.selection_counts)[static_cast<size_t>(c)] += 1;
        }
    }

    Var y = base;

    // Identity experts contribute sum_i w_i * x. Rows whose whole selection
    // is identity snap that coefficient to exactly one, which is the exact
    // value of the softmax restricted to the selected set.
    if (cfg.n_identity > 0 && cfg.identity_mode == IdentityMode::Residual) {
        if (cfg.route_override == RouteOverride::AllIdentity) {
            y = add(t, y, x);
        } else {
            std::vector<int32_t> id_cols;
            for (int64_t i = 0; i < cfg.n_identity; ++i) id_cols.push_back(static_cast<int32_t>(i));
            std::vector<int32_t> snap_rows;
            bool any_identity = false;
            for (int64_t r = 0; r < n; ++r) {
                const auto& s = selected[static_cast<size_t>(r)];
                const bool all_id = std::all_of(s.begin(), s.end(), [&](int32_t c) {
                    return c < cfg.n_identity;
                });
                const bool some_id = std::any_of(s.begin(), s.end(), [&](int32_t c) {
                    return c < cfg.n_identity;
                });
                any_identity = any_identity || some_id;
                if (all_id) snap_rows.push_back(static_cast<int32_t>(r));
            }
            if (any_identity) {
                Var idw = sum_cols(t, what, id_cols, snap_rows);
                y = add(t, y, scale_rows(t, x, idw));
            }
        }
    }

    // LoRA experts: masked low-rank product, weighted per token. Experts
    // selected by no token are skipped entirely.
    if (cfg.route_override == RouteOverride::None && cfg.n_lora > 0) {
        std::vector<char> used(static_cast<size_t>(cfg.n_lora), 0);
        for (const auto& s : selected) {
            for (int32_t c : s) {
                if (c >= cfg.n_identity) used[static_cast<size_t>(c - cfg.n_identity)] = 1;
            }
        }
        for (int64_t j = 0; j < cfg.n_lora; ++j) {
            LoraAdapter& ad = adapters[static_cast<size_t>(j)];
            Var bd = t.leaf(ad.b_down, true);
            Var au = t.leaf(ad.a_up, true);
            if (ctx.params_out) {
                const std::string base_name = name + ".expert" + std::to_string(cfg.n_identity + j);
                ctx.params_out->emplace_back(base_name + ".B", bd);
                ctx.params_out->emplace_back(base_name + ".A", au);
            }
            if (ctx.adapter_vars) ctx.adapter_vars->emplace_back(bd, au);
            if (!used[static_cast<size_t>(j)]) continue;
            Var f = fast_masked_forward(t, bd, au, (*masks)[static_cast<size_t>(j)], x);
            Var wcol = col(t, what, cfg.n_identity + j);
            y = add(t, y, scale_rows(t, f, wcol));
        }
    }
    return y;
}

void SlimLayer::trainable_params(ParamRegistry& out) {
    out.push_back({name + ".gate", &router.gate});
    for (int64_t j = 0; j < cfg.n_lora; ++j) {
        const std::string base_name = name + ".expert" + std::to_string(cfg.n_identity + j);
        out.push_back({base_name + ".B", &adapters[static_cast<size_t>(j)].b_down});
        out.push_back({base_name + ".A", &adapters[static_cast<size_t>(j)].a_up});
    }
}

void SlimLayer::state_tensors(ParamRegistry& out) {
    trainable_params(out);
    out.push_back({name + ".clusters.centers", &clusters.centers});
    out.push_back({name + ".clusters.m2", &clusters.m2});
    out.push_back({name + ".clusters.sigma", &clusters.sigma});
}

LoraBaselineLayer LoraBaselineLayer::attach(int64_t rank, std::string name, const Linear& base,
                                            uint64_t seed) {
    LoraBaselineLayer layer;
    layer.name = std::move(name);
    layer.weight = base.weight;
    layer.bias = base.bias;
    Rng rng(derive_seed(seed, layer.name + ".adapter"));
    layer.adapter = LoraAdapter::init(base.weight.shape[0], base.weight.shape[1], rank, rng);
    return layer;
}

Var lora_baseline_forward(Tape& t, Var w, Var b, Var b_down, Var a_up, Var x) {
    return add(t, linear_forward(t, w, b, x), lora_forward(t, b_down, a_up, x));
}

Var LoraBaselineLayer::forward(Tape& t, Var x, ForwardCtx& ctx) {
    Var w = t.leaf(weight, false);
    Var b = t.leaf(bias, false);
    Var bd = t.leaf(adapter.b_down, true);
    Var au = t.leaf(adapter.a_up, true);
    if (ctx.params_out) {
        ctx.params_out->emplace_back(name + ".adapter.B", bd);
        ctx.params_out->emplace_back(name + ".adapter.A", au);
    }
    if (ctx.adapter_vars) ctx.adapter_vars->emplace_back(bd, au);
    return lora_baseline_forward(t, w, b, bd, au, x);
}

void LoraBaselineLayer::trainable_params(ParamRegistry& out) {
    out.push_back({name + ".adapter.B", &adapter.b_down});
    out.push_back({name + ".adapter.A", &adapter.a_up});
}

MixLoraBaselineLayer MixLoraBaselineLayer::attach(int64_t n_experts, int64_t rank, std::string name,
                                                  const Linear& base, uint64_t seed) {
    if (n_experts < 2) throw std::invalid_argument("mixlora baseline needs at least two experts");
    MixLoraBaselineLayer layer;
    layer.name = std::move(name);
    layer.weight = base.weight;
    layer.bias = base.bias;
    for (int64_t i = 0; i < n_experts; ++i) {
        Rng rng(derive_seed(seed, layer.name + ".expert" + std::to_string(i)));
        layer.adapters.push_back(
            LoraAdapter::init(base.weight.shape[0], base.weight.shape[1], rank, rng));
    }
    Rng rng(derive_seed(seed, layer.name + ".gate"));
    layer.router = Router::init(base.weight.shape[0], n_experts, rng);
    return layer;
}

Var mixlora_baseline_forward(Tape& t, Var w, Var b, const std::vector<std::pair<Var, Var>>& adapters,
                             Var gate, Var x) {
    Var y = linear_forward(t, w, b, x);
    Var logits = route_logits(t, gate, x);
    std::vector<std::vector<int32_t>> selected;
    Var what = mixlora_gate(t, logits, &selected);
    std::vector<char> used(adapters.size(), 0);
    for (const auto& s : selected) {
        for (int32_t c : s) used[static_cast<size_t>(c)] = 1;
    }
    for (size_t j = 0; j < adapters.size(); ++j) {
        if (!used[j]) continue;
        Var f = lora_forward(t, adapters[j].first, adapters[j].second, x);
        y = add(t, y, scale_rows(t, f, col(t, what, static_cast<int64_t>(j))));
    }
    return y;
}

Var MixLoraBaselineLayer::forward(Tape& t, Var x, ForwardCtx& ctx) {
    Var w = t.leaf(weight, false);
    Var b = t.leaf(bias, false);
    Var gate = t.leaf(router.gate, true);
    if (ctx.params_out) ctx.params_out->emplace_back(name + ".gate", gate);
    std::vector<std::pair<Var, Var>> ad_vars;
    for (size_t j = 0; j < adapters.size(); ++j) {
        Var bd = t.leaf(adapters[j].b_down, true);
        Var au = t.leaf(adapters[j].a_up, true);
        if (ctx.params_out) {
            const std::string base_name = name + ".expert" + std::to_string(j);
            ctx.params_out->emplace_back(base_name + ".B", bd);
            ctx.params_out->emplace_back(base_name + ".A", au);
        }
        if (ctx.adapter_vars) ctx.adapter_vars->emplace_back(bd, au);
        ad_vars.emplace_back(bd, au);
    }
    return mixlora_baseline_forward(t, w, b, ad_vars, gate, x);
}

void MixLoraBaselineLayer::trainable_params(ParamRegistry& out) {
    out.push_back({name + ".gate", &router.gate});
    for (size_t j = 0; j < adapters.size(); ++j) {
        const std::string base_name = name + ".expert" + std::to_string(j);
        out.push_back({base_name + ".B", &adapters[j].b_down});
        out.push_back({base_name + ".A", &adapters[j].a_up});
    }
}

Var training_loss(Tape& t, Var task_loss, const std::vector<std::pair<Var, Var>>& adapters,
                  double l1_coeff) {
    if (l1_coeff < 0.0) throw std::invalid_argument("l1 coefficient must be nonnegative");
    if (l1_coeff == 0.0 || adapters.empty()) return task_loss;
    return add(t, task_loss, scale(t, l1_penalty(t, adapters), l1_coeff));
}

}  // namespace slim
