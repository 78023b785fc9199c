#include "slim/kernels.hpp"

#include <atomic>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace slim::kern {

namespace {
std::atomic<bool> g_parallel{true};

// Problems smaller than this many multiply-adds are not worth a parallel region.
constexpr int64_t kParallelFlops = 1 << 15;

inline bool use_parallel(int64_t work) {
#ifdef _OPENMP
    return g_parallel.load(std::memory_order_relaxed) && work >= kParallelFlops;
#else
    (void)work;
    return false;
#endif
}
}  // namespace

void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }
bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }

// i-k-j loop order: the inner j loop vectorizes and every C[i,:] row is owned
// by exactly one thread, so serial and parallel results match bit for bit.
static inline void nn_row(const double* a, const double* b, double* c, int64_t i, int64_t k, int64_t m) {
    double* ci = c + i * m;
    std::memset(ci, 0, static_cast<size_t>(m) * sizeof(double));
    const double* ai = a + i * k;
    for (int64_t kk = 0; kk < k; ++kk) {
        const double av = ai[kk];
        const double* bk = b + kk * m;
        for (int64_t j = 0; j < m; ++j) ci[j] += av * bk[j];
    }
}

void matmul_nn_serial(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m) {
    for (int64_t i = 0; i < n; ++i) nn_row(a, b, c, i, k, m);
}

void matmul_nn_omp(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) nn_row(a, b, c, i, k, m);
}

void matmul_nn(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m) {
    if (use_parallel(n * k * m)) {
        matmul_nn_omp(a, b, c, n, k, m);
    } else {
        matmul_nn_serial(a, b, c, n, k, m);
    }
}

static inline void nt_row(const double* a, const double* b, double* c, int64_t i, int64_t k, int64_t m) {
    const double* ai = a + i * k;
    double* ci = c + i * m;
    for (int64_t j = 0; j < m; ++j) {
        const double* bj = b + j * k;
        double acc = 0.0;
        for (int64_t kk = 0; kk < k; ++kk) acc += ai[kk] * bj[kk];
        ci[j] = acc;
    }
}

void matmul_nt_serial(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m) {
    for (int64_t i = 0; i < n; ++i) nt_row(a, b, c, i, k, m);
}

void matmul_nt_omp(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) nt_row(a, b, c, i, k, m);
}

void matmul_nt(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m) {
    if (use_parallel(n * k * m)) {
        matmul_nt_omp(a, b, c, n, k, m);
    } else {
        matmul_nt_serial(a, b, c, n, k, m);
    }
}

static inline void tn_row(const double* a, const double* b, double* c, int64_t i, int64_t k, int64_t n, int64_t m) {
    double* ci = c + i * m;
    std::memset(ci, 0, static_cast<size_t>(m) * sizeof(double));
    for (int64_t kk = 0; kk < k; ++kk) {
        const double av = a[kk * n + i];
        const double* bk = b + kk * m;
        for (int64_t j = 0; j < m; ++j) ci[j] += av * bk[j];
    }
}

void matmul_tn_serial(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m) {
    for (int64_t i = 0; i < n; ++i) tn_row(a, b, c, i, k, n, m);
}

void matmul_tn_omp(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) tn_row(a, b, c, i, k, n, m);
}

void matmul_tn(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m) {
    if (use_parallel(n * k * m)) {
        matmul_tn_omp(a, b, c, n, k, m);
    } else {
        matmul_tn_serial(a, b, c, n, k, m);
    }
}

void axpy_serial(const double* d, double s, double* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += s * d[i];
}

void axpy_omp(const double* d, double s, double* y, int64_t n) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; ++i) y[i] += s * d[i];
}

void axpy(const double* d, double s, double* y, int64_t n) {
    if (use_parallel(n * 4)) {
        axpy_omp(d, s, y, n);
    } else {
        axpy_serial(d, s, y, n);
    }
}

}  // namespace slim::kern
