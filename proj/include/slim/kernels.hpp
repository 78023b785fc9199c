#pragma once

#include <cstdint>

// Dense f64 kernels. Each kernel has a serial reference implementation and an
// OpenMP version that parallelizes over independent output rows, so both
// produce bit-identical results (the per-element accumulation order is the
// same). The dispatching entry points pick the parallel path for large
// problems when parallelism is enabled.

namespace slim::kern {

// C[n x m] = A[n x k] * B[k x m]
void matmul_nn_serial(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m);
void matmul_nn_omp(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m);
void matmul_nn(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m);

// C[n x m] = A[n x k] * B[m x k]^T
void matmul_nt_serial(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m);
void matmul_nt_omp(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m);
void matmul_nt(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m);

// C[n x m] = A[k x n]^T * B[k x m]
void matmul_tn_serial(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m);
void matmul_tn_omp(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m);
void matmul_tn(const double* a, const double* b, double* c, int64_t n, int64_t k, int64_t m);

// y[i] = x[i] + s * d[i]
void axpy_serial(const double* d, double s, double* y, int64_t n);
void axpy_omp(const double* d, double s, double* y, int64_t n);
void axpy(const double* d, double s, double* y, int64_t n);

void set_parallel(bool on);
bool parallel_enabled();

}  // namespace slim::kern
