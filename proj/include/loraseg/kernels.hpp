#pragma once

#include <cstdint>

// Raw f32 compute kernels behind the tensor ops. Two implementations exist:
// a scalar reference and an AVX2+FMA variant. `active()` picks one per
// process (cpuid probe, overridable with LORASEG_KERNELS=scalar|avx2), so a
// run is deterministic: the same backend serves every call.
//
// Matrices are row-major with explicit leading dimensions. Scalar reductions
// accumulate in double; the AVX2 variants keep lane accumulators in f32, so
// cross-backend agreement is tolerance-level, not bitwise (see the
// equivalence tests).

namespace loraseg::kernels {

struct Backend {
    const char* name;

    // c[m x n] = a[m x k] * b[k x n]            (+ c when accumulate)
    void (*matmul_nn)(int m, int n, int k, const float* a, int lda,
                      const float* b, int ldb, float* c, int ldc,
                      bool accumulate);
    // c[m x n] = a[m x k] * b[n x k]^T
    void (*matmul_nt)(int m, int n, int k, const float* a, int lda,
                      const float* b, int ldb, float* c, int ldc,
                      bool accumulate);
    // c[m x n] = a[k x m]^T * b[k x n]
    void (*matmul_tn)(int m, int n, int k, const float* a, int lda,
                      const float* b, int ldb, float* c, int ldc,
                      bool accumulate);

    void (*add)(float* dst, const float* a, const float* b, int64_t n);
    void (*mul)(float* dst, const float* a, const float* b, int64_t n);
    void (*axpy)(float* y, float a, const float* x, int64_t n);  // y += a*x
    void (*scale)(float* dst, const float* x, float s, int64_t n);

    float (*sum)(const float* x, int64_t n);
    float (*dot)(const float* a, const float* b, int64_t n);
    float (*max)(const float* x, int64_t n);  // n >= 1

    // Bias-corrected Adam update: inv_bc1 = 1/(1-beta1^t), inv_bc2 likewise.
    void (*adam_step)(float* p, const float* g, float* m, float* v, int64_t n,
                      float lr, float beta1, float beta2, float eps,
                      float inv_bc1, float inv_bc2);
};

const Backend& scalar_backend();
const Backend& avx2_backend();  // falls back to scalar entries off x86/AVX2
bool avx2_supported();

// The backend every tensor op uses; fixed at first call for the process.
const Backend& active();

}  // namespace loraseg::kernels
