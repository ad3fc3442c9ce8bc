// AVX2+FMA kernel variants. This translation unit is compiled with
// -mavx2 -mfma on x86_64; elsewhere it degrades to a null table and the
// dispatcher stays on the scalar reference path.
#include "dmlpanel/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <cmath>

namespace dmlpanel::kernels {
namespace {

inline double hsum_pd(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    __m128d sum = _mm_add_pd(lo, hi);
    __m128d shuf = _mm_unpackhi_pd(sum, sum);
    return _mm_cvtsd_f64(_mm_add_sd(sum, shuf));
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    if (i + 4 <= n) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        i += 4;
    }
    double acc = hsum_pd(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
    __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d vy = _mm256_loadu_pd(y + i);
        vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
        _mm256_storeu_pd(y + i, vy);
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

double sum_abs_avx2(const double* x, std::size_t n) {
    const __m256d sign_mask = _mm256_set1_pd(-0.0);
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        acc = _mm256_add_pd(acc, _mm256_andnot_pd(sign_mask, _mm256_loadu_pd(x + i)));
    double s = hsum_pd(acc);
    for (; i < n; ++i) s += std::fabs(x[i]);
    return s;
}

double sum_sq_avx2(const double* x, std::size_t n) {
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d v = _mm256_loadu_pd(x + i);
        acc = _mm256_fmadd_pd(v, v, acc);
    }
    double s = hsum_pd(acc);
    for (; i < n; ++i) s += x[i] * x[i];
    return s;
}

void relu_avx2(const double* pre, double* out, std::size_t n) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(out + i, _mm256_max_pd(_mm256_loadu_pd(pre + i), zero));
    for (; i < n; ++i) out[i] = pre[i] > 0.0 ? pre[i] : 0.0;
}

void relu_backward_avx2(const double* pre, const double* grad_out, double* grad_in,
                        std::size_t n) {
    const __m256d zero = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(pre + i), zero, _CMP_GT_OQ);
        _mm256_storeu_pd(grad_in + i, _mm256_and_pd(mask, _mm256_loadu_pd(grad_out + i)));
    }
    for (; i < n; ++i) grad_in[i] = pre[i] > 0.0 ? grad_out[i] : 0.0;
}

void adam_update_avx2(double* param, double* m, double* v, const double* grad, std::size_t n,
                      double lr, double beta1, double beta2, double eps, double bias1,
                      double bias2) {
    const __m256d vb1 = _mm256_set1_pd(beta1);
    const __m256d vb2 = _mm256_set1_pd(beta2);
    const __m256d v1mb1 = _mm256_set1_pd(1.0 - beta1);
    const __m256d v1mb2 = _mm256_set1_pd(1.0 - beta2);
    const __m256d vlr = _mm256_set1_pd(lr);
    const __m256d veps = _mm256_set1_pd(eps);
    const __m256d vib1 = _mm256_set1_pd(1.0 / bias1);
    const __m256d vib2 = _mm256_set1_pd(1.0 / bias2);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        __m256d g = _mm256_loadu_pd(grad + i);
        __m256d vm = _mm256_fmadd_pd(vb1, _mm256_loadu_pd(m + i), _mm256_mul_pd(v1mb1, g));
        __m256d vv = _mm256_fmadd_pd(vb2, _mm256_loadu_pd(v + i),
                                     _mm256_mul_pd(v1mb2, _mm256_mul_pd(g, g)));
        _mm256_storeu_pd(m + i, vm);
        _mm256_storeu_pd(v + i, vv);
        __m256d m_hat = _mm256_mul_pd(vm, vib1);
        __m256d v_hat = _mm256_mul_pd(vv, vib2);
        __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(v_hat), veps);
        __m256d step = _mm256_div_pd(_mm256_mul_pd(vlr, m_hat), denom);
        _mm256_storeu_pd(param + i, _mm256_sub_pd(_mm256_loadu_pd(param + i), step));
    }
    if (i < n)
        scalar::adam_update(param + i, m + i, v + i, grad + i, n - i, lr, beta1, beta2, eps,
                            bias1, bias2);
}

const KernelTable avx2_table = {
    &dot_avx2,  &axpy_avx2,          &sum_abs_avx2,     &sum_sq_avx2,
    &relu_avx2, &relu_backward_avx2, &adam_update_avx2,
};

}  // namespace

const KernelTable* avx2_kernel_table() { return &avx2_table; }

}  // namespace dmlpanel::kernels

#else

namespace dmlpanel::kernels {
const KernelTable* avx2_kernel_table() { return nullptr; }
}  // namespace dmlpanel::kernels

#endif
