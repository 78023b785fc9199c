#include "slim/lora.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "slim/kernels.hpp"

namespace slim {

LoraAdapter LoraAdapter::init(int64_t d1, int64_t d2, int64_t r, Rng& rng) {
    if (d1 < 1 || d2 < 1 || r < 1) throw std::invalid_argument("lora adapter extents must be positive");
    const int64_t mn = std::min(d1, d2);
    if (r > mn) {
        throw std::invalid_argument("lora rank " + std::to_string(r) + " exceeds min(d1,d2)=" +
                                    std::to_string(mn));
    }
    if (r > mn / 4) {
        std::fprintf(stderr, "warning: lora rank %lld > min(%lld,%lld)/4; adapter is barely low-rank\n",
                     static_cast<long long>(r), static_cast<long long>(d1), static_cast<long long>(d2));
    }
    LoraAdapter ad;
    ad.b_down = Tensor::zeros({d1, r});
    ad.a_up = Tensor({r, d2});
    for (double& v : ad.a_up.data) v = 0.02 * rng.gaussian();
    return ad;
}

MaskSpec sample_mask(int64_t d1, int64_t d2, double p, uint64_t seed, bool paper_formula) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw std::invalid_argument("mask rate " + std::to_string(p) + " outside [0, 1)");
    }
    MaskSpec m;
    m.seed = seed;
    if (p == 0.0) return m;
    const double p_rc = paper_formula ? 1.0 - std::sqrt(p) : 1.0 - std::sqrt(1.0 - p);
    Rng rng(seed);
    for (int64_t i = 0; i < d1; ++i) {
        if (rng.bernoulli(p_rc)) m.rows.push_back(static_cast<int32_t>(i));
    }
    for (int64_t j = 0; j < d2; ++j) {
        if (rng.bernoulli(p_rc)) m.cols.push_back(static_cast<int32_t>(j));
    }
    return m;
}

Var lora_forward(Tape& t, Var b_down, Var a_up, Var x) {
    return matmul(t, matmul(t, x, b_down), a_up);
}

Tensor lora_apply(const LoraAdapter& ad, const Tensor& x) {
    Tape t;
    t.grad_enabled = false;
    Var out = lora_forward(t, t.leaf(ad.b_down, false), t.leaf(ad.a_up, false), t.leaf(x, false));
    return t.val(out);
}

Var fast_masked_forward(Tape& t, Var b_down, Var a_up, const MaskSpec& mask, Var x) {
    // Zeroing the masked rows of B is the same as zeroing those input
    // features of x; zeroing the masked columns of A is the same as zeroing
    // those output columns.
    Var h = mask.rows.empty() ? x : mask_cols(t, x, mask.rows);
    Var out = matmul(t, matmul(t, h, b_down), a_up);
    if (!mask.cols.empty()) out = mask_cols(t, out, mask.cols);
    return out;
}

Tensor fast_masked_apply(const LoraAdapter& ad, const MaskSpec& mask, const Tensor& x) {
    if (x.ndim() != 2 || x.shape[1] != ad.d1()) {
        throw std::invalid_argument("fast_masked_apply input " + x.shape_str() + " does not match adapter d1=" +
                                    std::to_string(ad.d1()));
    }
    const int64_t n = x.shape[0], d1 = ad.d1(), d2 = ad.d2(), r = ad.rank();
    Tensor xm = x;
    for (int64_t i = 0; i < n; ++i) {
        double* row = xm.data.data() + i * d1;
        for (int32_t c : mask.rows) row[c] = 0.0;
    }
    Tensor mid({n, r});
    kern::matmul_nn(xm.data.data(), ad.b_down.data.data(), mid.data.data(), n, d1, r);
    Tensor out({n, d2});
    kern::matmul_nn(mid.data.data(), ad.a_up.data.data(), out.data.data(), n, r, d2);
    for (int64_t i = 0; i < n; ++i) {
        double* row = out.data.data() + i * d2;
        for (int32_t c : mask.cols) row[c] = 0.0;
    }
    return out;
}

Tensor dense_masked_oracle(const LoraAdapter& ad, const MaskSpec& mask, const Tensor& x) {
    if (x.ndim() != 2 || x.shape[1] != ad.d1()) {
        throw std::invalid_argument("dense_masked_oracle input " + x.shape_str() +
                                    " does not match adapter d1=" + std::to_string(ad.d1()));
    }
    const int64_t n = x.shape[0], d1 = ad.d1(), d2 = ad.d2(), r = ad.rank();
    for (int32_t c : mask.rows) {
        if (c < 0 || c >= d1) throw std::invalid_argument("mask row index out of range");
    }
    for (int32_t c : mask.cols) {
        if (c < 0 || c >= d2) throw std::invalid_argument("mask col index out of range");
    }
    Tensor ba({d1, d2});
    kern::matmul_nn(ad.b_down.data.data(), ad.a_up.data.data(), ba.data.data(), d1, r, d2);
    for (int32_t row : mask.rows) {
        double* p = ba.data.data() + static_cast<int64_t>(row) * d2;
        for (int64_t j = 0; j < d2; ++j) p[j] = 0.0;
    }
    for (int32_t col : mask.cols) {
        for (int64_t i = 0; i < d1; ++i) ba.data[static_cast<size_t>(i * d2 + col)] = 0.0;
    }
    Tensor out({n, d2});
    kern::matmul_nn(x.data.data(), ba.data.data(), out.data.data(), n, d1, d2);
    return out;
}

Var l1_penalty(Tape& t, const std::vector<std::pair<Var, Var>>& adapters) {
    if (adapters.empty()) throw std::invalid_argument("l1_penalty over empty adapter list");
    Var total = -1;
    for (const auto& [b_down, a_up] : adapters) {
        Var term = add(t, mean_abs(t, b_down), mean_abs(t, a_up));
        total = (total < 0) ? term : add(t, total, term);
    }
    return total;
}

Tensor dare_merge(const Tensor& theta_pre, const Tensor& theta_ins, const Tensor& ba,
                  const Tensor& mask_l, const Tensor& mask_a, double lambda, double p) {
    if (!same_shape(theta_pre, theta_ins) || !same_shape(theta_pre, ba) ||
        !same_shape(theta_pre, mask_l) || !same_shape(theta_pre, mask_a)) {
        throw std::invalid_argument("dare_merge operands must share one shape");
    }
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dare_merge rate outside [0, 1)");
    for (size_t i = 0; i < mask_l.data.size(); ++i) {
        const double l = mask_l.data[i], a = mask_a.data[i];
        const bool binary = (l == 0.0 || l == 1.0) && (a == 0.0 || a == 1.0);
        if (!binary || l + a != 1.0) {
            throw std::invalid_argument("dare_merge masks must be binary and complementary");
        }
    }
    const double w = lambda / (1.0 - p);
    Tensor out = theta_pre;
    for (size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] += w * mask_l.data[i] * (theta_ins.data[i] - theta_pre.data[i]) +
                       w * mask_a.data[i] * (theta_ins.data[i] + ba.data[i] - theta_pre.data[i]);
    }
    return out;
}

double verify_dare_identity(double p, int64_t d1, int64_t d2, int64_t r, Rng& rng) {
    const double lambda = 1.0 - p;
    Tensor pre({d1, d2}), ins({d1, d2}), bm({d1, r}), am({r, d2});
    for (double& v : pre.data) v = rng.gaussian();
    for (double& v : ins.data) v = rng.gaussian();
    for (double& v : bm.data) v = rng.gaussian();
    for (double& v : am.data) v = rng.gaussian();
    Tensor ba({d1, d2});
    kern::matmul_nn(bm.data.data(), am.data.data(), ba.data.data(), d1, r, d2);
    Tensor mask_a({d1, d2}), mask_l({d1, d2});
    for (size_t i = 0; i < mask_a.data.size(); ++i) {
        mask_a.data[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
        mask_l.data[i] = 1.0 - mask_a.data[i];
    }
    Tensor merged = dare_merge(pre, ins, ba, mask_l, mask_a, lambda, p);
    double dev = 0.0;
    for (size_t i = 0; i < merged.data.size(); ++i) {
        const double collapsed = ins.data[i] + mask_a.data[i] * ba.data[i];
        dev = std::max(dev, std::fabs(merged.data[i] - collapsed));
    }
    return dev;
}

}  // namespace slim
