#include "slim/tensor.hpp"

#include <atomic>
#include <cmath>

namespace slim {

namespace {
std::atomic<bool> g_finite_checks{true};
}

void set_finite_checks(bool on) { g_finite_checks.store(on, std::memory_order_relaxed); }
bool finite_checks_enabled() { return g_finite_checks.load(std::memory_order_relaxed); }

void check_finite(const Tensor& t, const char* where) {
    if (!g_finite_checks.load(std::memory_order_relaxed)) return;
    for (size_t i = 0; i < t.data.size(); ++i) {
        if (!std::isfinite(t.data[i])) {
            throw NumericError(std::string("non-finite value in ") + where + " at flat index " +
                               std::to_string(i));
        }
    }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!same_shape(a, b)) {
        throw std::invalid_argument("max_abs_diff shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
    return m;
}

double max_rel_diff(const Tensor& a, const Tensor& b, double floor) {
    if (!same_shape(a, b)) {
        throw std::invalid_argument("max_rel_diff shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
    double m = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double den = std::max({std::fabs(a.data[i]), std::fabs(b.data[i]), floor});
        m = std::max(m, std::fabs(a.data[i] - b.data[i]) / den);
    }
    return m;
}

}  // namespace slim
