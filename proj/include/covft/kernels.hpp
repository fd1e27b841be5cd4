#pragma once

#include <cstddef>

// Dense GEMM kernels used by the autodiff engine. Every kernel accumulates
// into C (C += op(A) * op(B)); callers zero C when they need an overwrite.
//
// `serial` is the reference implementation. `parallel` splits output rows
// across OpenMP threads; each output element is still reduced in the same
// k-order, so both paths produce bit-identical results.

namespace covft::kernels {

namespace serial {
/// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
/// C[m,k] += A[m,n] * B[k,n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k);
/// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
}  // namespace serial

namespace parallel {
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k);
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
}  // namespace parallel

/// Work size (m*k*n) above which the dispatchers below use the parallel kernels.
inline constexpr std::size_t kParallelThreshold = std::size_t{1} << 18;

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k);
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);

/// Number of OpenMP threads available (1 when built without OpenMP).
int max_threads();
/// True inside an active OpenMP parallel region.
bool in_parallel();

}  // namespace covft::kernels
