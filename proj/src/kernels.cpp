#include "loraseg/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>

namespace loraseg::kernels {

namespace {

void s_matmul_nn(int m, int n, int k, const float* a, int lda, const float* b,
                 int ldb, float* c, int ldc, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<int64_t>(i) * ldc;
        if (!accumulate) std::fill(crow, crow + n, 0.0f);
        const float* arow = a + static_cast<int64_t>(i) * lda;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            const float* brow = b + static_cast<int64_t>(p) * ldb;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void s_matmul_nt(int m, int n, int k, const float* a, int lda, const float* b,
                 int ldb, float* c, int ldc, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<int64_t>(i) * lda;
        float* crow = c + static_cast<int64_t>(i) * ldc;
        for (int j = 0; j < n; ++j) {
            const float* brow = b + static_cast<int64_t>(j) * ldb;
            float acc = 0.0f;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = accumulate ? crow[j] + acc : acc;
        }
    }
}

void s_matmul_tn(int m, int n, int k, const float* a, int lda, const float* b,
                 int ldb, float* c, int ldc, bool accumulate) {
    for (int i = 0; i < m; ++i) {
        float* crow = c + static_cast<int64_t>(i) * ldc;
        if (!accumulate) std::fill(crow, crow + n, 0.0f);
        for (int p = 0; p < k; ++p) {
            const float av = a[static_cast<int64_t>(p) * lda + i];
            const float* brow = b + static_cast<int64_t>(p) * ldb;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void s_add(float* dst, const float* a, const float* b, int64_t n) {
    for (int64_t i = 0; i < n; ++i) dst[i] = a[i] + b[i];
}

void s_mul(float* dst, const float* a, const float* b, int64_t n) {
    for (int64_t i = 0; i < n; ++i) dst[i] = a[i] * b[i];
}

void s_axpy(float* y, float a, const float* x, int64_t n) {
    for (int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void s_scale(float* dst, const float* x, float s, int64_t n) {
    for (int64_t i = 0; i < n; ++i) dst[i] = x[i] * s;
}

float s_sum(const float* x, int64_t n) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += x[i];
    return static_cast<float>(acc);
}

float s_dot(const float* a, const float* b, int64_t n) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * b[i];
    return static_cast<float>(acc);
}

float s_max(const float* x, int64_t n) {
    float m = x[0];
    for (int64_t i = 1; i < n; ++i) m = std::max(m, x[i]);
    return m;
}

void s_adam_step(float* p, const float* g, float* m, float* v, int64_t n,
                 float lr, float beta1, float beta2, float eps, float inv_bc1,
                 float inv_bc2) {
    for (int64_t i = 0; i < n; ++i) {
        const float gi = g[i];
        m[i] = beta1 * m[i] + (1.0f - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0f - beta2) * gi * gi;
        const float mhat = m[i] * inv_bc1;
        const float vhat = v[i] * inv_bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace

const Backend& scalar_backend() {
    static const Backend b = {
        "scalar",   s_matmul_nn, s_matmul_nt, s_matmul_tn, s_add, s_mul,
        s_axpy,     s_scale,     s_sum,       s_dot,       s_max, s_adam_step,
    };
    return b;
}

const Backend& active() {
    static const Backend& chosen = []() -> const Backend& {
        if (const char* env = std::getenv("LORASEG_KERNELS")) {
            if (std::strcmp(env, "scalar") == 0) return scalar_backend();
            if (std::strcmp(env, "avx2") == 0) return avx2_backend();
        }
        return avx2_supported() ? avx2_backend() : scalar_backend();
    }();
    return chosen;
}

}  // namespace loraseg::kernels
