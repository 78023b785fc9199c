#pragma once

#include <cstdint>
#include <vector>

#include "slim/ops.hpp"
#include "slim/rng.hpp"

namespace slim {

// Linear gate mapping a C-dim token to one logit per expert.
struct Router {
    Tensor gate;  // [C x E]
    static Router init(int64_t c, int64_t e, Rng& rng, double std = 0.02);
};

Var route_logits(Tape& t, Var gate, Var x);

// Online cluster centers with per-channel deviation estimates. Centers and
// second moments move by EMA during training only; sigma is derived as
// sqrt(max(m2 - center^2, 1e-12)), so it stays >= 1e-6.
struct SlidingClusters {
    Tensor centers;  // [N x C]
    Tensor m2;       // [N x C]
    Tensor sigma;    // [N x C]
    double beta = 0.99;
    bool update_enabled = true;
    uint64_t seed = 0;

    int64_t count() const { return centers.shape[0]; }
    int64_t channels() const { return centers.shape[1]; }

    // Centers ~ 0.02 * N(0,1); sigma starts at one.
    static SlidingClusters init(int64_t n, int64_t c, double beta, uint64_t seed);
    void refresh_sigma(int64_t idx);
};

// Token-mean pooling of a [tokens x C] sample.
std::vector<double> pool_tokens(const Tensor& x, int64_t row_lo, int64_t row_hi);

// Nearest center by L2 distance; ties go to the lower index.
int assign_cluster(const SlidingClusters& cl, const std::vector<double>& pooled);

// EMA update of the assigned cluster; no-op when updates are disabled.
void update_clusters(SlidingClusters& cl, const std::vector<double>& pooled, int idx);

// m = mean_c |pooled_c - center_c| / sigma_c;  d = 1 / max(offset - m, clamp).
// With the published constants (offset 3, clamp 1e-4) d lies in [1/3, 1e4].
double compute_distance(const SlidingClusters& cl, int idx, const std::vector<double>& pooled,
                        double offset = 3.0, double clamp = 1e-4);

// Identity experts occupy columns [0, n_identity); their logits are shifted
// by d - 1 while LoRA expert logits pass through unchanged.
Var yield_weights(Tape& t, Var logits, int64_t n_identity, const std::vector<double>& d_per_row);

// Keep the K largest yielded weights per row (ties to the lower index) and
// softmax over exactly those K values; the rest are zero.
Var select_topk(Tape& t, Var yielded, int64_t k, std::vector<std::vector<int32_t>>* selected = nullptr);

// MixLoRA-style baseline gate: softmax over all logits, keep the top two,
// renormalize by their sum. Algebraically equal to select_topk with K=2.
Var mixlora_gate(Tape& t, Var logits, std::vector<std::vector<int32_t>>* selected = nullptr);

// Untaped single-sample routing snapshot for inspection and property tests.
struct YieldedRouting {
    std::vector<double> raw;      // router logits
    std::vector<double> yielded;  // after identity adjustment
    std::vector<int32_t> selected;
    std::vector<double> weights;  // normalized, zero off-selection
    double distance = 1.0;
    int cluster = 0;
};

YieldedRouting route_sample(const Router& router, const SlidingClusters& cl, const Tensor& x_tokens,
                            int64_t n_identity, int64_t k, bool yield_enabled = true,
                            double offset = 3.0, double clamp = 1e-4);

}  // namespace slim
