// AVX2+FMA kernel variants. Compiled with per-function target attributes so
// the translation unit itself needs no -mavx2; dispatch happens at runtime.

#include "loraseg/kernels.hpp"

#include <algorithm>
#include <cmath>

#if defined(__x86_64__) || defined(_M_X64)
#define LORASEG_X86 1
#include <immintrin.h>
#else
#define LORASEG_X86 0
#endif

namespace loraseg::kernels {

#if LORASEG_X86

#define LORASEG_AVX2 __attribute__((target("avx2,fma")))

namespace {

LORASEG_AVX2 inline float hsum256(__m256 v) {
    __m128 lo = _mm256_castps256_ps128(v);
    __m128 hi = _mm256_extractf128_ps(v, 1);
    __m128 s = _mm_add_ps(lo, hi);
    s = _mm_hadd_ps(s, s);
    s = _mm_hadd_ps(s, s);
    return _mm_cvtss_f32(s);
}

LORASEG_AVX2 void v_matmul_nn(int m, int n, int k, const float* a, int lda,
                              const float* b, int ldb, float* c, int ldc,
                              bool accumulate) {
    for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<int64_t>(i) * ldc;
        if (!accumulate) std::fill(crow, crow + n, 0.0f);
        const float* arow = a + static_cast<int64_t>(i) * lda;
        for (int p = 0; p < k; ++p) {
            const __m256 av = _mm256_set1_ps(arow[p]);
            const float* brow = b + static_cast<int64_t>(p) * ldb;
            int j = 0;
            for (; j + 8 <= n; j += 8) {
                __m256 cv = _mm256_loadu_ps(crow + j);
                cv = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + j), cv);
                _mm256_storeu_ps(crow + j, cv);
            }
            const float as = arow[p];
            for (; j < n; ++j) crow[j] += as * brow[j];
        }
    }
}

LORASEG_AVX2 void v_matmul_nt(int m, int n, int k, const float* a, int lda,
                              const float* b, int ldb, float* c, int ldc,
                              bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<int64_t>(i) * lda;
        float* crow = c + static_cast<int64_t>(i) * ldc;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + static_cast<int64_t>(j) * ldb;
            __m256 acc = _mm256_setzero_ps();
            int p = 0;
            for (; p + 8 <= k; p += 8) {
                acc = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p),
                                      _mm256_loadu_ps(brow + p), acc);
            }
            float dotv = hsum256(acc);
            for (; p < k; ++p) dotv += arow[p] * brow[p];
            crow[j] = accumulate ? crow[j] + dotv : dotv;
        }
    }
}

LORASEG_AVX2 void v_matmul_tn(int m, int n, int k, const float* a, int lda,
                              const float* b, int ldb, float* c, int ldc,
                              bool accumulate) {
    for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<int64_t>(i) * ldc;
        if (!accumulate) std::fill(crow, crow + n, 0.0f);
        for (int p = 0; p < k; ++p) {
            const float as = a[static_cast<int64_t>(p) * lda + i];
            const __m256 av = _mm256_set1_ps(as);
            const float* brow = b + static_cast<int64_t>(p) * ldb;
            int j = 0;
            for (; j + 8 <= n; j += 8) {
                __m256 cv = _mm256_loadu_ps(crow + j);
                cv = _mm256_fmadd_ps(av, _mm256_loadu_ps(brow + j), cv);
                _mm256_storeu_ps(crow + j, cv);
            }
            for (; j < n; ++j) crow[j] += as * brow[j];
        }
    }
}

LORASEG_AVX2 void v_add(float* dst, const float* a, const float* b,
                        int64_t n) {
    int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(dst + i, _mm256_add_ps(_mm256_loadu_ps(a + i),
                                                _mm256_loadu_ps(b + i)));
    }
    for (; i < n; ++i) dst[i] = a[i] + b[i];
}

LORASEG_AVX2 void v_mul(float* dst, const float* a, const float* b,
                        int64_t n) {
    int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(dst + i, _mm256_mul_ps(_mm256_loadu_ps(a + i),
                                                _mm256_loadu_ps(b + i)));
    }
    for (; i < n; ++i) dst[i] = a[i] * b[i];
}

LORASEG_AVX2 void v_axpy(float* y, float a, const float* x, int64_t n) {
    const __m256 av = _mm256_set1_ps(a);
    int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        __m256 yv = _mm256_loadu_ps(y + i);
        yv = _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i), yv);
        _mm256_storeu_ps(y + i, yv);
    }
    for (; i < n; ++i) y[i] += a * x[i];
}

LORASEG_AVX2 void v_scale(float* dst, const float* x, float s, int64_t n) {
    const __m256 sv = _mm256_set1_ps(s);
    int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        _mm256_storeu_ps(dst + i, _mm256_mul_ps(sv, _mm256_loadu_ps(x + i)));
    }
    for (; i < n; ++i) dst[i] = x[i] * s;
}

LORASEG_AVX2 float v_sum(const float* x, int64_t n) {
    __m256 acc = _mm256_setzero_ps();
    int64_t i = 0;
    for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
    double total = hsum256(acc);
    for (; i < n; ++i) total += x[i];
    return static_cast<float>(total);
}

LORASEG_AVX2 float v_dot(const float* a, const float* b, int64_t n) {
    __m256 acc = _mm256_setzero_ps();
    int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i),
                              acc);
    }
    double total = hsum256(acc);
    for (; i < n; ++i) total += static_cast<double>(a[i]) * b[i];
    return static_cast<float>(total);
}

LORASEG_AVX2 float v_max(const float* x, int64_t n) {
    if (n < 8) {
        float m = x[0];
        for (int64_t i = 1; i < n; ++i) m = std::max(m, x[i]);
        return m;
    }
    __m256 acc = _mm256_loadu_ps(x);
    int64_t i = 8;
    for (; i + 8 <= n; i += 8) acc = _mm256_max_ps(acc, _mm256_loadu_ps(x + i));
    alignas(32) float lanes[8];
    _mm256_store_ps(lanes, acc);
    float m = lanes[0];
    for (int j = 1; j < 8; ++j) m = std::max(m, lanes[j]);
    for (; i < n; ++i) m = std::max(m, x[i]);
    return m;
}

LORASEG_AVX2 void v_adam_step(float* p, const float* g, float* m, float* v,
                              int64_t n, float lr, float beta1, float beta2,
                              float eps, float inv_bc1, float inv_bc2) {
    const __m256 b1 = _mm256_set1_ps(beta1);
    const __m256 b2 = _mm256_set1_ps(beta2);
    const __m256 ob1 = _mm256_set1_ps(1.0f - beta1);
    const __m256 ob2 = _mm256_set1_ps(1.0f - beta2);
    const __m256 bc1 = _mm256_set1_ps(inv_bc1);
    const __m256 bc2 = _mm256_set1_ps(inv_bc2);
    const __m256 lrv = _mm256_set1_ps(lr);
    const __m256 epsv = _mm256_set1_ps(eps);
    int64_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 gv = _mm256_loadu_ps(g + i);
        __m256 mv = _mm256_loadu_ps(m + i);
        __m256 vv = _mm256_loadu_ps(v + i);
        mv = _mm256_fmadd_ps(b1, mv, _mm256_mul_ps(ob1, gv));
        vv = _mm256_fmadd_ps(b2, vv, _mm256_mul_ps(ob2, _mm256_mul_ps(gv, gv)));
        _mm256_storeu_ps(m + i, mv);
        _mm256_storeu_ps(v + i, vv);
        const __m256 mhat = _mm256_mul_ps(mv, bc1);
        const __m256 vhat = _mm256_mul_ps(vv, bc2);
        const __m256 denom = _mm256_add_ps(_mm256_sqrt_ps(vhat), epsv);
        __m256 pv = _mm256_loadu_ps(p + i);
        pv = _mm256_sub_ps(pv,
                           _mm256_div_ps(_mm256_mul_ps(lrv, mhat), denom));
        _mm256_storeu_ps(p + i, pv);
    }
    for (; i < n; ++i) {
        const float gi = g[i];
        m[i] = beta1 * m[i] + (1.0f - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0f - beta2) * gi * gi;
        p[i] -= lr * (m[i] * inv_bc1) / (std::sqrt(v[i] * inv_bc2) + eps);
    }
}

}  // namespace

bool avx2_supported() {
    static const bool ok =
        __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    return ok;
}

const Backend& avx2_backend() {
    static const Backend b = {
        "avx2", v_matmul_nn, v_matmul_nt, v_matmul_tn, v_add,  v_mul,
        v_axpy, v_scale,     v_sum,       v_dot,       v_max,  v_adam_step,
    };
    return avx2_supported() ? b : scalar_backend();
}

#else  // !LORASEG_X86

bool avx2_supported() { return false; }
const Backend& avx2_backend() { return scalar_backend(); }

#endif

}  // namespace loraseg::kernels
