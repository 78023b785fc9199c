#include "slim/routing.hpp"

#include <algorithm>
#include <cmath>

namespace slim {

Router Router::init(int64_t c, int64_t e, Rng& rng, double std) {
    Router r;
    r.gate = Tensor({c, e});
    for (double& v : r.gate.data) v = std * rng.gaussian();
    return r;
}

Var route_logits(Tape& t, Var gate, Var x) { return matmul(t, x, gate); }

SlidingClusters SlidingClusters::init(int64_t n, int64_t c, double beta, uint64_t seed) {
    if (n < 1 || c < 1) throw std::invalid_argument("clusters need at least one center and channel");
    if (!(beta >= 0.0 && beta < 1.0)) throw std::invalid_argument("cluster momentum outside [0, 1)");
    SlidingClusters cl;
    cl.beta = beta;
    cl.seed = seed;
    Rng rng(seed);
    cl.centers = Tensor({n, c});
    for (double& v : cl.centers.data) v = 0.02 * rng.gaussian();
    // m2 chosen so the initial variance estimate is exactly one.
    cl.m2 = cl.centers;
    for (double& v : cl.m2.data) v = v * v + 1.0;
    cl.sigma = Tensor::full({n, c}, 1.0);
    return cl;
}

void SlidingClusters::refresh_sigma(int64_t idx) {
    const int64_t c = channels();
    for (int64_t j = 0; j < c; ++j) {
        const double mean = centers.at(idx, j);
        const double var = std::max(m2.at(idx, j) - mean * mean, 1e-12);
        sigma.at(idx, j) = std::sqrt(var);
    }
}

std::vector<double> pool_tokens(const Tensor& x, int64_t row_lo, int64_t row_hi) {
    if (x.ndim() != 2 || row_lo < 0 || row_hi > x.shape[0] || row_lo >= row_hi) {
        throw std::invalid_argument("pool_tokens bad row range for " + x.shape_str());
    }
    const int64_t c = x.shape[1];
    std::vector<double> pooled(static_cast<size_t>(c), 0.0);
    for (int64_t i = row_lo; i < row_hi; ++i) {
        const double* row = x.data.data() + i * c;
        for (int64_t j = 0; j < c; ++j) pooled[static_cast<size_t>(j)] += row[j];
    }
    const double inv = 1.0 / static_cast<double>(row_hi - row_lo);
    for (double& v : pooled) v *= inv;
    return pooled;
}

int assign_cluster(const SlidingClusters& cl, const std::vector<double>& pooled) {
    const int64_t n = cl.count(), c = cl.channels();
    if (static_cast<int64_t>(pooled.size()) != c) {
        throw std::invalid_argument("assign_cluster channel mismatch");
    }
    int best = 0;
    double best_d2 = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d2 = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            const double diff = cl.centers.at(i, j) - pooled[static_cast<size_t>(j)];
            d2 += diff * diff;
        }
        if (i == 0 || d2 < best_d2) {
            best = static_cast<int>(i);
            best_d2 = d2;
        }
    }
    return best;
}

void update_clusters(SlidingClusters& cl, const std::vector<double>& pooled, int idx) {
    if (!cl.update_enabled) return;
    if (idx < 0 || idx >= cl.count()) throw std::invalid_argument("update_clusters index out of range");
    const int64_t c = cl.channels();
    const double b = cl.beta;
    for (int64_t j = 0; j < c; ++j) {
        const double x = pooled[static_cast<size_t>(j)];
        cl.centers.at(idx, j) = b * cl.centers.at(idx, j) + (1.0 - b) * x;
        cl.m2.at(idx, j) = b * cl.m2.at(idx, j) + (1.0 - b) * x * x;
    }
    cl.refresh_sigma(idx);
}

double compute_distance(const SlidingClusters& cl, int idx, const std::vector<double>& pooled,
                        double offset, double clamp) {
    if (idx < 0 || idx >= cl.count()) throw std::invalid_argument("compute_distance index out of range");
    const int64_t c = cl.channels();
    double m = 0.0;
    for (int64_t j = 0; j < c; ++j) {
        m += std::fabs(pooled[static_cast<size_t>(j)] - cl.centers.at(idx, j)) / cl.sigma.at(idx, j);
    }
    m /= static_cast<double>(c);
    return 1.0 / std::max(offset - m, clamp);
}

Var yield_weights(Tape& t, Var logits, int64_t n_identity, const std::vector<double>& d_per_row) {
    if (n_identity == 0) return logits;
    std::vector<double> shift(d_per_row.size());
    for (size_t i = 0; i < d_per_row.size(); ++i) shift[i] = d_per_row[i] - 1.0;
    return add_to_cols(t, logits, 0, n_identity, shift);
}

Var select_topk(Tape& t, Var yielded, int64_t k, std::vector<std::vector<int32_t>>* selected) {
    return topk_softmax_rows(t, yielded, k, selected);
}

Var mixlora_gate(Tape& t, Var logits, std::vector<std::vector<int32_t>>* selected) {
    const Tensor& lv = t.val(logits);
    if (lv.ndim() != 2 || lv.shape[1] < 2) {
        throw std::invalid_argument("mixlora_gate needs at least two experts, got " + lv.shape_str());
    }
    // Renormalizing the top-2 entries of a full softmax equals a softmax over
    // just those two logits, so the structured top-k kernel applies directly.
    return topk_softmax_rows(t, logits, 2, selected);
}

YieldedRouting route_sample(const Router& router, const SlidingClusters& cl, const Tensor& x_tokens,
                            int64_t n_identity, int64_t k, bool yield_enabled, double offset,
                            double clamp) {
    Tape t;
    t.grad_enabled = false;
    const int64_t tokens = x_tokens.shape[0];
    const int64_t e = router.gate.shape[1];

    YieldedRouting out;
    std::vector<double> pooled = pool_tokens(x_tokens, 0, tokens);
    out.cluster = assign_cluster(cl, pooled);
    out.distance = yield_enabled ? compute_distance(cl, out.cluster, pooled, offset, clamp) : 1.0;

    // Pool first, then route the pooled vector once: the snapshot describes
    // the sample-level decision.
    Tensor xbar({1, cl.channels()}, pooled);
    Var logits = route_logits(t, t.leaf(router.gate, false), t.leaf(xbar, false));
    Var yielded = yield_weights(t, logits, n_identity, {out.distance});
    std::vector<std::vector<int32_t>> sel;
    Var weights = select_topk(t, yielded, k, &sel);

    out.raw = t.val(logits).data;
    out.yielded = t.val(yielded).data;
    out.weights = t.val(weights).data;
    out.selected = sel[0];
    (void)e;
    return out;
}

}  // namespace slim
