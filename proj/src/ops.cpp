#include "slim/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "slim/kernels.hpp"

namespace slim {

namespace {

void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) {
        throw std::invalid_argument(std::string(op) + " requires a 2-D tensor, got " + t.shape_str());
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!same_shape(a, b)) {
        throw std::invalid_argument(std::string(op) + " shape mismatch " + a.shape_str() + " vs " +
                                    b.shape_str());
    }
}

// Exponent floor keeping exp() strictly positive; e^-700 ~ 1e-304.
constexpr double kExpFloor = -700.0;

using Grads = std::vector<Tensor>;

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    require_2d(av, "matmul");
    require_2d(bv, "matmul");
    if (av.shape[1] != bv.shape[0]) {
        throw std::invalid_argument("matmul shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    }
    const int64_t n = av.shape[0], k = av.shape[1], m = bv.shape[1];
    Tensor out({n, m});
    kern::matmul_nn(av.data.data(), bv.data.data(), out.data.data(), n, k, m);
    check_finite(out, "matmul");
    return t.put(std::move(out), {a, b},
                 [a, b, n, k, m](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
                     if (tp.needs_grad(a)) {
                         Tensor da({n, k});
                         kern::matmul_nt(g.data.data(), tp.val(b).data.data(), da.data.data(), n, m, k);
                         Tensor& acc = Tape::accum(gr, a, {n, k});
                         for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += da.data[i];
                     }
                     if (tp.needs_grad(b)) {
                         Tensor db({k, m});
                         kern::matmul_tn(tp.val(a).data.data(), g.data.data(), db.data.data(), k, n, m);
                         Tensor& acc = Tape::accum(gr, b, {k, m});
                         for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += db.data[i];
                     }
                 });
}

Var add(Tape& t, Var a, Var b) {
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    require_same_shape(av, bv, "add");
    Tensor out = av;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
    check_finite(out, "add");
    return t.put(std::move(out), {a, b}, [a, b](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
        for (Var v : {a, b}) {
            if (!tp.needs_grad(v)) continue;
            Tensor& acc = Tape::accum(gr, v, tp.val(v).shape);
            for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += g.data[i];
        }
    });
}

Var mul(Tape& t, Var a, Var b) {
    const Tensor& av = t.val(a);
    const Tensor& bv = t.val(b);
    require_same_shape(av, bv, "mul");
    Tensor out = av;
    for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
    check_finite(out, "mul");
    return t.put(std::move(out), {a, b}, [a, b](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
        if (tp.needs_grad(a)) {
            Tensor& acc = Tape::accum(gr, a, tp.val(a).shape);
            const Tensor& o = tp.val(b);
            for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += g.data[i] * o.data[i];
        }
        if (tp.needs_grad(b)) {
            Tensor& acc = Tape::accum(gr, b, tp.val(b).shape);
            const Tensor& o = tp.val(a);
            for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += g.data[i] * o.data[i];
        }
    });
}

Var add_bias_row(Tape& t, Var x, Var bias) {
    const Tensor& xv = t.val(x);
    const Tensor& bv = t.val(bias);
    require_2d(xv, "add_bias_row");
    if (bv.ndim() != 1 || bv.shape[0] != xv.shape[1]) {
        throw std::invalid_argument("add_bias_row shape mismatch " + xv.shape_str() + " vs " +
                                    bv.shape_str());
    }
    const int64_t n = xv.shape[0], d = xv.shape[1];
    Tensor out = xv;
    for (int64_t i = 0; i < n; ++i) {
        double* row = out.data.data() + i * d;
        for (int64_t j = 0; j < d; ++j) row[j] += bv.data[static_cast<size_t>(j)];
    }
    check_finite(out, "add_bias_row");
    return t.put(std::move(out), {x, bias},
                 [x, bias, n, d](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
                     if (tp.needs_grad(x)) {
                         Tensor& acc = Tape::accum(gr, x, {n, d});
                         for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += g.data[i];
                     }
                     if (tp.needs_grad(bias)) {
                         Tensor& acc = Tape::accum(gr, bias, {d});
                         for (int64_t i = 0; i < n; ++i) {
                             const double* row = g.data.data() + i * d;
                             for (int64_t j = 0; j < d; ++j) acc.data[static_cast<size_t>(j)] += row[j];
                         }
                     }
                 });
}

Var scale(Tape& t, Var x, double c) {
    Tensor out = t.val(x);
    for (double& v : out.data) v *= c;
    check_finite(out, "scale");
    return t.put(std::move(out), {x}, [x, c](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
        if (!tp.needs_grad(x)) return;
        Tensor& acc = Tape::accum(gr, x, tp.val(x).shape);
        for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += c * g.data[i];
    });
}

Var scale_rows(Tape& t, Var x, Var s) {
    const Tensor& xv = t.val(x);
    const Tensor& sv = t.val(s);
    require_2d(xv, "scale_rows");
    if (sv.ndim() != 1 || sv.shape[0] != xv.shape[0]) {
        throw std::invalid_argument("scale_rows shape mismatch " + xv.shape_str() + " vs " + sv.shape_str());
    }
    const int64_t n = xv.shape[0], d = xv.shape[1];
    Tensor out = xv;
    for (int64_t i = 0; i < n; ++i) {
        const double si = sv.data[static_cast<size_t>(i)];
        double* row = out.data.data() + i * d;
        for (int64_t j = 0; j < d; ++j) row[j] *= si;
    }
    check_finite(out, "scale_rows");
    return t.put(std::move(out), {x, s}, [x, s, n, d](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
        if (tp.needs_grad(x)) {
            Tensor& acc = Tape::accum(gr, x, {n, d});
            const Tensor& sv2 = tp.val(s);
            for (int64_t i = 0; i < n; ++i) {
                const double si = sv2.data[static_cast<size_t>(i)];
                const double* grow = g.data.data() + i * d;
                double* arow = acc.data.data() + i * d;
                for (int64_t j = 0; j < d; ++j) arow[j] += si * grow[j];
            }
        }
        if (tp.needs_grad(s)) {
            Tensor& acc = Tape::accum(gr, s, {n});
            const Tensor& xv2 = tp.val(x);
            for (int64_t i = 0; i < n; ++i) {
                const double* grow = g.data.data() + i * d;
                const double* xrow = xv2.data.data() + i * d;
                double dot = 0.0;
                for (int64_t j = 0; j < d; ++j) dot += grow[j] * xrow[j];
                acc.data[static_cast<size_t>(i)] += dot;
            }
        }
    });
}

Var col(Tape& t, Var x, int64_t j) {
    const Tensor& xv = t.val(x);
    require_2d(xv, "col");
    const int64_t n = xv.shape[0], d = xv.shape[1];
    if (j < 0 || j >= d) throw std::invalid_argument("col index out of range");
    Tensor out({n});
    for (int64_t i = 0; i < n; ++i) out.data[static_cast<size_t>(i)] = xv.at(i, j);
    return t.put(std::move(out), {x}, [x, j, n, d](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
        if (!tp.needs_grad(x)) return;
        Tensor& acc = Tape::accum(gr, x, {n, d});
        for (int64_t i = 0; i < n; ++i) acc.at(i, j) += g.data[static_cast<size_t>(i)];
    });
}

Var mask_cols(Tape& t, Var x, const std::vector<int32_t>& cols) {
    const Tensor& xv = t.val(x);
    require_2d(xv, "mask_cols");
    const int64_t n = xv.shape[0], d = xv.shape[1];
    for (size_t i = 0; i < cols.size(); ++i) {
        if (cols[i] < 0 || cols[i] >= d) {
            throw std::invalid_argument("mask_cols index " + std::to_string(cols[i]) +
                                        " out of range for " + xv.shape_str());
        }
        if (i > 0 && cols[i] <= cols[i - 1]) {
            throw std::invalid_argument("mask_cols indices must be sorted and unique");
        }
    }
    Tensor out = xv;
    for (int64_t i = 0; i < n; ++i) {
        double* row = out.data.data() + i * d;
        for (int32_t c : cols) row[c] = 0.0;
    }
    auto idx = std::make_shared<std::vector<int32_t>>(cols);
    return t.put(std::move(out), {x}, [x, idx, n, d](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
        if (!tp.needs_grad(x)) return;
        Tensor& acc = Tape::accum(gr, x, {n, d});
        std::vector<char> keep(static_cast<size_t>(d), 1);
        for (int32_t c : *idx) keep[static_cast<size_t>(c)] = 0;
        for (int64_t i = 0; i < n; ++i) {
            const double* grow = g.data.data() + i * d;
            double* arow = acc.data.data() + i * d;
            for (int64_t j = 0; j < d; ++j) {
                if (keep[static_cast<size_t>(j)]) arow[j] += grow[j];
            }
        }
    });
}

Var add_to_cols(Tape& t, Var x, int64_t col_lo, int64_t col_hi, const std::vector<double>& c) {
    const Tensor& xv = t.val(x);
    require_2d(xv, "add_to_cols");
    const int64_t n = xv.shape[0], d = xv.shape[1];
    if (col_lo < 0 || col_hi > d || col_lo > col_hi) {
        throw std::invalid_argument("add_to_cols bad column range");
    }
    if (static_cast<int64_t>(c.size()) != n) {
        throw std::invalid_argument("add_to_cols needs one constant per row");
    }
    Tensor out = xv;
    for (int64_t i = 0; i < n; ++i) {
        double* row = out.data.data() + i * d;
        for (int64_t j = col_lo; j < col_hi; ++j) row[j] += c[static_cast<size_t>(i)];
    }
    check_finite(out, "add_to_cols");
    return t.put(std::move(out), {x}, [x](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
        if (!tp.needs_grad(x)) return;
        Tensor& acc = Tape::accum(gr, x, tp.val(x).shape);
        for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += g.data[i];
    });
}

Var relu(Tape& t, Var x) {
    Tensor out = t.val(x);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return t.put(std::move(out), {x}, [x](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
        if (!tp.needs_grad(x)) return;
        const Tensor& xv = tp.val(x);
        Tensor& acc = Tape::accum(gr, x, xv.shape);
        for (size_t i = 0; i < acc.data.size(); ++i) {
            if (xv.data[i] > 0.0) acc.data[i] += g.data[i];
        }
    });
}

Var gelu(Tape& t, Var x) {
    // Exact erf form: x * Phi(x).
    Tensor out = t.val(x);
    for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
    check_finite(out, "gelu");
    return t.put(std::move(out), {x}, [x](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
        if (!tp.needs_grad(x)) return;
        const Tensor& xv = tp.val(x);
        Tensor& acc = Tape::accum(gr, x, xv.shape);
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (size_t i = 0; i < acc.data.size(); ++i) {
            const double v = xv.data[i];
            const double phi = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            acc.data[i] += g.data[i] * (phi + v * pdf);
        }
    });
}

Var softmax_rows(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    require_2d(xv, "softmax_rows");
    const int64_t n = xv.shape[0], d = xv.shape[1];
    if (d == 0) throw std::invalid_argument("softmax over empty axis");
    Tensor out({n, d});
    for (int64_t i = 0; i < n; ++i) {
        const double* row = xv.data.data() + i * d;
        double* orow = out.data.data() + i * d;
        double mx = row[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            orow[j] = std::exp(std::max(row[j] - mx, kExpFloor));
            z += orow[j];
        }
        for (int64_t j = 0; j < d; ++j) orow[j] /= z;
    }
    check_finite(out, "softmax_rows");
    return t.put(std::move(out), {x}, [x, n, d](const Tensor& g, const Tensor& p, Tape& tp, Grads& gr) {
        if (!tp.needs_grad(x)) return;
        Tensor& acc = Tape::accum(gr, x, {n, d});
        for (int64_t i = 0; i < n; ++i) {
            const double* grow = g.data.data() + i * d;
            const double* prow = p.data.data() + i * d;
            double dot = 0.0;
            for (int64_t j = 0; j < d; ++j) dot += grow[j] * prow[j];
            double* arow = acc.data.data() + i * d;
            for (int64_t j = 0; j < d; ++j) arow[j] += prow[j] * (grow[j] - dot);
        }
    });
}

Var topk_softmax_rows(Tape& t, Var x, int64_t k, std::vector<std::vector<int32_t>>* selected) {
    const Tensor& xv = t.val(x);
    require_2d(xv, "topk_softmax_rows");
    const int64_t n = xv.shape[0], e = xv.shape[1];
    if (k < 1 || k > e) {
        throw std::invalid_argument("top-k count " + std::to_string(k) + " out of range for " +
                                    xv.shape_str());
    }
    Tensor out({n, e});
    auto sel = std::make_shared<std::vector<std::vector<int32_t>>>(static_cast<size_t>(n));
    std::vector<int32_t> order(static_cast<size_t>(e));
    for (int64_t i = 0; i < n; ++i) {
        const double* row = xv.data.data() + i * e;
        std::iota(order.begin(), order.end(), 0);
        // Largest first; stable sort keeps ties at the lower index.
        std::stable_sort(order.begin(), order.end(), [&](int32_t a, int32_t b) { return row[a] > row[b]; });
        auto& si = (*sel)[static_cast<size_t>(i)];
        si.assign(order.begin(), order.begin() + k);
        std::sort(si.begin(), si.end());
        double mx = row[si[0]];
        for (int32_t c : si) mx = std::max(mx, row[c]);
        double z = 0.0;
        double* orow = out.data.data() + i * e;
        for (int32_t c : si) {
            orow[c] = std::exp(std::max(row[c] - mx, kExpFloor));
            z += orow[c];
        }
        for (int32_t c : si) orow[c] /= z;
    }
    if (selected) *selected = *sel;
    check_finite(out, "topk_softmax_rows");
    return t.put(std::move(out), {x}, [x, sel, n, e](const Tensor& g, const Tensor& w, Tape& tp, Grads& gr) {
        if (!tp.needs_grad(x)) return;
        Tensor& acc = Tape::accum(gr, x, {n, e});
        // Softmax Jacobian restricted to each row's selected set; unselected
        // logits receive exactly zero gradient.
        for (int64_t i = 0; i < n; ++i) {
            const auto& si = (*sel)[static_cast<size_t>(i)];
            const double* grow = g.data.data() + i * e;
            const double* wrow = w.data.data() + i * e;
            double dot = 0.0;
            for (int32_t c : si) dot += grow[c] * wrow[c];
            double* arow = acc.data.data() + i * e;
            for (int32_t c : si) arow[c] += wrow[c] * (grow[c] - dot);
        }
    });
}

Var sum_cols(Tape& t, Var x, const std::vector<int32_t>& cols, const std::vector<int32_t>& snap_rows) {
    const Tensor& xv = t.val(x);
    require_2d(xv, "sum_cols");
    const int64_t n = xv.shape[0], d = xv.shape[1];
    for (int32_t c : cols) {
        if (c < 0 || c >= d) throw std::invalid_argument("sum_cols index out of range");
    }
    Tensor out({n});
    for (int64_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (int32_t c : cols) s += xv.at(i, c);
        out.data[static_cast<size_t>(i)] = s;
    }
    for (int32_t r : snap_rows) out.data[static_cast<size_t>(r)] = 1.0;
    auto idx = std::make_shared<std::vector<int32_t>>(cols);
    return t.put(std::move(out), {x}, [x, idx, n, d](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
        if (!tp.needs_grad(x)) return;
        Tensor& acc = Tape::accum(gr, x, {n, d});
        for (int64_t i = 0; i < n; ++i) {
            const double gi = g.data[static_cast<size_t>(i)];
            for (int32_t c : *idx) acc.at(i, c) += gi;
        }
    });
}

Var rmsnorm_rows(Tape& t, Var x, Var gain, double eps) {
    const Tensor& xv = t.val(x);
    const Tensor& gv = t.val(gain);
    require_2d(xv, "rmsnorm_rows");
    if (gv.ndim() != 1 || gv.shape[0] != xv.shape[1]) {
        throw std::invalid_argument("rmsnorm_rows shape mismatch " + xv.shape_str() + " vs " +
                                    gv.shape_str());
    }
    const int64_t n = xv.shape[0], d = xv.shape[1];
    Tensor out({n, d});
    auto inv_rms = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const double* row = xv.data.data() + i * d;
        double ss = 0.0;
        for (int64_t j = 0; j < d; ++j) ss += row[j] * row[j];
        const double r = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
        (*inv_rms)[static_cast<size_t>(i)] = r;
        double* orow = out.data.data() + i * d;
        for (int64_t j = 0; j < d; ++j) orow[j] = row[j] * r * gv.data[static_cast<size_t>(j)];
    }
    check_finite(out, "rmsnorm_rows");
    return t.put(std::move(out), {x, gain},
                 [x, gain, inv_rms, n, d](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
                     const Tensor& xv2 = tp.val(x);
                     const Tensor& gv2 = tp.val(gain);
                     if (tp.needs_grad(x)) {
                         Tensor& acc = Tape::accum(gr, x, {n, d});
                         for (int64_t i = 0; i < n; ++i) {
                             const double r = (*inv_rms)[static_cast<size_t>(i)];
                             const double* grow = g.data.data() + i * d;
                             const double* xrow = xv2.data.data() + i * d;
                             double dot = 0.0;
                             for (int64_t j = 0; j < d; ++j) {
                                 dot += grow[j] * gv2.data[static_cast<size_t>(j)] * xrow[j];
                             }
                             const double coef = r * r * r * dot / static_cast<double>(d);
                             double* arow = acc.data.data() + i * d;
                             for (int64_t j = 0; j < d; ++j) {
                                 arow[j] += r * gv2.data[static_cast<size_t>(j)] * grow[j] - coef * xrow[j];
                             }
                         }
                     }
                     if (tp.needs_grad(gain)) {
                         Tensor& acc = Tape::accum(gr, gain, {d});
                         for (int64_t i = 0; i < n; ++i) {
                             const double r = (*inv_rms)[static_cast<size_t>(i)];
                             const double* grow = g.data.data() + i * d;
                             const double* xrow = xv2.data.data() + i * d;
                             for (int64_t j = 0; j < d; ++j) {
                                 acc.data[static_cast<size_t>(j)] += grow[j] * xrow[j] * r;
                             }
                         }
                     }
                 });
}

Var embedding(Tape& t, Var table, const std::vector<int32_t>& ids) {
    const Tensor& tv = t.val(table);
    require_2d(tv, "embedding");
    const int64_t v = tv.shape[0], d = tv.shape[1];
    const int64_t n = static_cast<int64_t>(ids.size());
    for (int32_t id : ids) {
        if (id < 0 || id >= v) {
            throw std::invalid_argument("embedding id " + std::to_string(id) + " out of range for " +
                                        tv.shape_str());
        }
    }
    Tensor out({n, d});
    for (int64_t i = 0; i < n; ++i) {
        const double* src = tv.data.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d;
        std::copy(src, src + d, out.data.data() + i * d);
    }
    auto idx = std::make_shared<std::vector<int32_t>>(ids);
    return t.put(std::move(out), {table},
                 [table, idx, v, d, n](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
                     if (!tp.needs_grad(table)) return;
                     Tensor& acc = Tape::accum(gr, table, {v, d});
                     for (int64_t i = 0; i < n; ++i) {
                         double* dst = acc.data.data() + static_cast<int64_t>((*idx)[static_cast<size_t>(i)]) * d;
                         const double* src = g.data.data() + i * d;
                         for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
                     }
                 });
}

Var causal_attention(Tape& t, Var q, Var k, Var v, int64_t b, int64_t tt, int64_t heads) {
    const Tensor& qv = t.val(q);
    const Tensor& kv = t.val(k);
    const Tensor& vv = t.val(v);
    require_2d(qv, "causal_attention");
    require_same_shape(qv, kv, "causal_attention");
    require_same_shape(qv, vv, "causal_attention");
    const int64_t n = qv.shape[0], d = qv.shape[1];
    if (n != b * tt || heads < 1 || d % heads != 0) {
        throw std::invalid_argument("causal_attention bad geometry for " + qv.shape_str());
    }
    const int64_t hd = d / heads;
    const double scl = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor out({n, d});
    // Attention probabilities, [b*heads, tt, tt] flattened; entries above the
    // diagonal stay zero.
    auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(b * heads * tt * tt), 0.0);

    const double* qd = qv.data.data();
    const double* kd = kv.data.data();
    const double* vd = vv.data.data();
#pragma omp parallel for schedule(static) collapse(2) if (kern::parallel_enabled())
    for (int64_t bi = 0; bi < b; ++bi) {
        for (int64_t h = 0; h < heads; ++h) {
            double* p = probs->data() + (bi * heads + h) * tt * tt;
            const int64_t row0 = bi * tt;
            const int64_t c0 = h * hd;
            for (int64_t i = 0; i < tt; ++i) {
                const double* qi = qd + (row0 + i) * d + c0;
                double* pi = p + i * tt;
                double mx = -1e300;
                for (int64_t j = 0; j <= i; ++j) {
                    const double* kj = kd + (row0 + j) * d + c0;
                    double s = 0.0;
                    for (int64_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                    pi[j] = s * scl;
                    mx = std::max(mx, pi[j]);
                }
                double z = 0.0;
                for (int64_t j = 0; j <= i; ++j) {
                    pi[j] = std::exp(std::max(pi[j] - mx, kExpFloor));
                    z += pi[j];
                }
                double* oi = out.data.data() + (row0 + i) * d + c0;
                for (int64_t c = 0; c < hd; ++c) oi[c] = 0.0;
                for (int64_t j = 0; j <= i; ++j) {
                    pi[j] /= z;
                    const double* vj = vd + (row0 + j) * d + c0;
                    const double pij = pi[j];
                    for (int64_t c = 0; c < hd; ++c) oi[c] += pij * vj[c];
                }
            }
        }
    }
    check_finite(out, "causal_attention");
    return t.put(std::move(out), {q, k, v},
                 [q, k, v, probs, b, tt, heads, hd, d, scl](const Tensor& g, const Tensor&, Tape& tp,
                                                            Grads& gr) {
                     const bool nq = tp.needs_grad(q), nk = tp.needs_grad(k), nv = tp.needs_grad(v);
                     if (!nq && !nk && !nv) return;
                     const Tensor& qv2 = tp.val(q);
                     const Tensor& kv2 = tp.val(k);
                     const Tensor& vv2 = tp.val(v);
                     Tensor& dq = Tape::accum(gr, q, qv2.shape);
                     Tensor& dk = Tape::accum(gr, k, qv2.shape);
                     Tensor& dv = Tape::accum(gr, v, qv2.shape);
#pragma omp parallel for schedule(static) collapse(2) if (kern::parallel_enabled())
                     for (int64_t bi = 0; bi < b; ++bi) {
                         for (int64_t h = 0; h < heads; ++h) {
                             const double* p = probs->data() + (bi * heads + h) * tt * tt;
                             const int64_t row0 = bi * tt;
                             const int64_t c0 = h * hd;
                             std::vector<double> dp(static_cast<size_t>(tt));
                             for (int64_t i = 0; i < tt; ++i) {
                                 const double* gi = g.data.data() + (row0 + i) * d + c0;
                                 const double* pi = p + i * tt;
                                 // dP then dS (softmax backward), then dQ/dK/dV.
                                 double dot = 0.0;
                                 for (int64_t j = 0; j <= i; ++j) {
                                     const double* vj = vv2.data.data() + (row0 + j) * d + c0;
                                     double s = 0.0;
                                     for (int64_t c = 0; c < hd; ++c) s += gi[c] * vj[c];
                                     dp[static_cast<size_t>(j)] = s;
                                     dot += s * pi[j];
                                 }
                                 const double* qi = qv2.data.data() + (row0 + i) * d + c0;
                                 double* dqi = dq.data.data() + (row0 + i) * d + c0;
                                 for (int64_t j = 0; j <= i; ++j) {
                                     const double ds = pi[j] * (dp[static_cast<size_t>(j)] - dot) * scl;
                                     const double* kj = kv2.data.data() + (row0 + j) * d + c0;
                                     double* dkj = dk.data.data() + (row0 + j) * d + c0;
                                     double* dvj = dv.data.data() + (row0 + j) * d + c0;
                                     const double pij = pi[j];
                                     for (int64_t c = 0; c < hd; ++c) {
                                         dqi[c] += ds * kj[c];
                                         dkj[c] += ds * qi[c];
                                         dvj[c] += pij * gi[c];
                                     }
                                 }
                             }
                         }
                     }
                 });
}

Var cross_entropy_mean(Tape& t, Var logits, const std::vector<std::pair<int32_t, int32_t>>& targets) {
    const Tensor& lv = t.val(logits);
    require_2d(lv, "cross_entropy_mean");
    const int64_t n = lv.shape[0], cdim = lv.shape[1];
    if (targets.empty()) throw std::invalid_argument("cross_entropy_mean needs at least one target");
    if (cdim == 0) throw std::invalid_argument("cross_entropy_mean over empty class axis");
    for (const auto& [row, cls] : targets) {
        if (row < 0 || row >= n) throw std::invalid_argument("cross_entropy_mean row out of range");
        if (cls < 0 || cls >= cdim) {
            throw std::invalid_argument("cross_entropy_mean class " + std::to_string(cls) +
                                        " out of range for " + lv.shape_str());
        }
    }
    // Save softmax rows for the targeted rows only.
    auto saved = std::make_shared<std::vector<std::vector<double>>>();
    saved->reserve(targets.size());
    double loss = 0.0;
    for (const auto& [row, cls] : targets) {
        const double* r = lv.data.data() + static_cast<int64_t>(row) * cdim;
        double mx = r[0];
        for (int64_t j = 1; j < cdim; ++j) mx = std::max(mx, r[j]);
        double z = 0.0;
        std::vector<double> p(static_cast<size_t>(cdim));
        for (int64_t j = 0; j < cdim; ++j) {
            p[static_cast<size_t>(j)] = std::exp(std::max(r[j] - mx, kExpFloor));
            z += p[static_cast<size_t>(j)];
        }
        for (double& pv : p) pv /= z;
        loss -= (r[cls] - mx) - std::log(z);
        saved->push_back(std::move(p));
    }
    loss /= static_cast<double>(targets.size());
    Tensor out = Tensor::scalar(loss);
    check_finite(out, "cross_entropy_mean");
    auto tgt = std::make_shared<std::vector<std::pair<int32_t, int32_t>>>(targets);
    return t.put(std::move(out), {logits},
                 [logits, tgt, saved, n, cdim](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
                     if (!tp.needs_grad(logits)) return;
                     Tensor& acc = Tape::accum(gr, logits, {n, cdim});
                     const double w = g.data[0] / static_cast<double>(tgt->size());
                     for (size_t ti = 0; ti < tgt->size(); ++ti) {
                         const auto& [row, cls] = (*tgt)[ti];
                         const std::vector<double>& p = (*saved)[ti];
                         double* arow = acc.data.data() + static_cast<int64_t>(row) * cdim;
                         for (int64_t j = 0; j < cdim; ++j) arow[j] += w * p[static_cast<size_t>(j)];
                         arow[cls] -= w;
                     }
                 });
}

Var sum(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    double s = 0.0;
    for (double v : xv.data) s += v;
    Tensor out = Tensor::scalar(s);
    check_finite(out, "sum");
    return t.put(std::move(out), {x}, [x](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
        if (!tp.needs_grad(x)) return;
        Tensor& acc = Tape::accum(gr, x, tp.val(x).shape);
        for (double& v : acc.data) v += g.data[0];
    });
}

Var mean_abs(Tape& t, Var x) {
    const Tensor& xv = t.val(x);
    if (xv.numel() == 0) throw std::invalid_argument("mean_abs of empty tensor");
    double s = 0.0;
    for (double v : xv.data) s += std::fabs(v);
    Tensor out = Tensor::scalar(s / static_cast<double>(xv.numel()));
    return t.put(std::move(out), {x}, [x](const Tensor& g, const Tensor&, Tape& tp, Grads& gr) {
        if (!tp.needs_grad(x)) return;
        const Tensor& xv2 = tp.val(x);
        Tensor& acc = Tape::accum(gr, x, xv2.shape);
        const double w = g.data[0] / static_cast<double>(xv2.numel());
        for (size_t i = 0; i < acc.data.size(); ++i) {
            const double v = xv2.data[i];
            // Subgradient 0 at exactly zero.
            acc.data[i] += w * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
        }
    });
}

}  // namespace slim
