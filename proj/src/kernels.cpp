#include "covft/kernels.hpp"

#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace covft::kernels {

namespace {

// Row-range bodies shared by the serial and parallel entry points. The inner
// reduction index is unrolled by four with the adds kept in sequence, so every
// element of C is summed in plain index order regardless of the unrolling.

inline void nn_rows(const double* __restrict a, const double* __restrict b, double* __restrict c,
                    std::size_t r0, std::size_t r1, std::size_t k, std::size_t n) {
    for (std::size_t i = r0; i < r1; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        std::size_t p = 0;
        for (; p + 4 <= k; p += 4) {
            const double a0 = ai[p], a1 = ai[p + 1], a2 = ai[p + 2], a3 = ai[p + 3];
            const double* b0 = b + p * n;
            const double* b1 = b0 + n;
            const double* b2 = b1 + n;
            const double* b3 = b2 + n;
            for (std::size_t j = 0; j < n; ++j) ci[j] = (((ci[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j];
        }
        for (; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// Output rows of C are the k index; the reduction runs over m in order.
inline void tn_rows(const double* __restrict a, const double* __restrict b, double* __restrict c,
                    std::size_t p0, std::size_t p1, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = p0; p < p1; ++p) {
        double* cp = c + p * n;
        std::size_t i = 0;
        for (; i + 4 <= m; i += 4) {
            const double a0 = a[i * k + p], a1 = a[(i + 1) * k + p], a2 = a[(i + 2) * k + p],
                         a3 = a[(i + 3) * k + p];
            const double* b0 = b + i * n;
            const double* b1 = b0 + n;
            const double* b2 = b1 + n;
            const double* b3 = b2 + n;
            for (std::size_t j = 0; j < n; ++j) cp[j] = (((cp[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j];
        }
        for (; i < m; ++i) {
            const double av = a[i * k + p];
            const double* bi = b + i * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

// B [k,n] -> Bt [n,k], so A * B^T becomes a row-streaming product.
std::vector<double> transposed(const double* b, std::size_t k, std::size_t n) {
    std::vector<double> t(k * n);
    for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) t[j * k + p] = b[p * n + j];
    return t;
}

}  // namespace

namespace serial {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    nn_rows(a, b, c, 0, m, k, n);
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
    const auto bt = transposed(b, k, n);
    nn_rows(a, bt.data(), c, 0, m, n, k);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    tn_rows(a, b, c, 0, k, m, k, n);
}

}  // namespace serial

namespace parallel {

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i)
        nn_rows(a, b, c, static_cast<std::size_t>(i), static_cast<std::size_t>(i) + 1, k, n);
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
    const auto bt = transposed(b, k, n);
    const double* btp = bt.data();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i)
        nn_rows(a, btp, c, static_cast<std::size_t>(i), static_cast<std::size_t>(i) + 1, n, k);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(k); ++p)
        tn_rows(a, b, c, static_cast<std::size_t>(p), static_cast<std::size_t>(p) + 1, m, k, n);
}

}  // namespace parallel

namespace {
bool use_parallel(std::size_t work) {
    return work >= kParallelThreshold && max_threads() > 1 && !in_parallel();
}
}  // namespace

void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    if (use_parallel(m * k * n))
        parallel::gemm_nn(a, b, c, m, k, n);
    else
        serial::gemm_nn(a, b, c, m, k, n);
}

void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
    if (use_parallel(m * k * n))
        parallel::gemm_nt(a, b, c, m, n, k);
    else
        serial::gemm_nt(a, b, c, m, n, k);
}

void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    if (use_parallel(m * k * n))
        parallel::gemm_tn(a, b, c, m, k, n);
    else
        serial::gemm_tn(a, b, c, m, k, n);
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

bool in_parallel() {
#ifdef _OPENMP
    return omp_in_parallel() != 0;
#else
    return false;
#endif
}

}  // namespace covft::kernels
