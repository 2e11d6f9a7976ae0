#pragma once

// Test-only oracles, independent of the library's compute paths: a
// central-difference gradient checker (double arithmetic around f32 forward
// evaluations) and a plain-loop multi-head attention reference.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "loraseg/rng.hpp"
#include "loraseg/tensor.hpp"

namespace oracles {

inline double rel_err(double a, double b, double floor_abs = 1e-6) {
    const double m = std::max(std::abs(a), std::abs(b));
    if (m < floor_abs) return 0.0;
    return std::abs(a - b) / m;
}

// Forward factory: must rebuild the loss from current tensor values each
// call. With a tape it is used once for the analytic pass; with nullptr for
// the finite-difference evaluations.
using ForwardFn = std::function<loraseg::Tensor(loraseg::Tape*)>;

struct GradCheckResult {
    double max_rel = 0.0;
    int64_t checked = 0;
};

// Central differences on the listed coordinates of one tensor against its
// analytic gradient (which must already be populated). The error denominator
// includes a fraction of the tensor's gradient scale, so coordinates whose
// true gradient sits near zero are judged against the f32 noise floor of the
// surrounding gradient field rather than against themselves.
inline GradCheckResult check_tensor_grad(const ForwardFn& forward,
                                         loraseg::Tensor param,
                                         const std::vector<float>& analytic,
                                         const std::vector<int64_t>& coords,
                                         double eps, double floor_abs = 1e-6,
                                         double scale_frac = 1e-2) {
    double scale = 0.0;
    for (float g : analytic) scale = std::max(scale, std::abs(static_cast<double>(g)));
    GradCheckResult r;
    float* d = param.data();
    for (int64_t i : coords) {
        const float orig = d[i];
        d[i] = static_cast<float>(orig + eps);
        const double fp = static_cast<double>(forward(nullptr).item());
        d[i] = static_cast<float>(orig - eps);
        const double fm = static_cast<double>(forward(nullptr).item());
        d[i] = orig;
        const double fd = (fp - fm) / (2.0 * eps);
        const double a = static_cast<double>(analytic[static_cast<size_t>(i)]);
        const double denom =
            std::max({std::abs(a), std::abs(fd), scale_frac * scale, floor_abs});
        r.max_rel = std::max(r.max_rel, std::abs(a - fd) / denom);
        ++r.checked;
    }
    return r;
}

// Runs one taped forward+backward, then finite-differences every listed
// parameter at `samples` random coordinates (all coordinates when
// samples <= 0).
inline GradCheckResult grad_check(const ForwardFn& forward,
                                  std::vector<loraseg::Tensor> params,
                                  double eps, int samples = -1,
                                  uint64_t seed = 1234,
                                  double floor_abs = 1e-6,
                                  double scale_frac = 1e-2) {
    loraseg::Tape tape;
    loraseg::Tensor loss = forward(&tape);
    tape.backward(loss);

    std::vector<std::vector<float>> grads;
    for (loraseg::Tensor& p : params) {
        const float* g = p.grad();
        grads.emplace_back(g, g + p.numel());
    }

    loraseg::Rng rng(seed);
    GradCheckResult total;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        std::vector<int64_t> coords;
        const int64_t n = params[pi].numel();
        if (samples <= 0 || samples >= n) {
            for (int64_t i = 0; i < n; ++i) coords.push_back(i);
        } else {
            for (int s = 0; s < samples; ++s)
                coords.push_back(static_cast<int64_t>(
                    rng.uniform_int(static_cast<uint64_t>(n))));
        }
        const GradCheckResult r = check_tensor_grad(
            forward, params[pi], grads[pi], coords, eps, floor_abs, scale_frac);
        total.max_rel = std::max(total.max_rel, r.max_rel);
        total.checked += r.checked;
    }
    return total;
}

// Plain-loop multi-head attention in double precision: h [N x D] already
// normalized, row-vector convention q = h*Wq + bq, per-head softmax over
// scaled scores, concatenation, output projection.
inline std::vector<double> naive_mha(
    const std::vector<double>& h, int n, int d, int heads,
    const std::vector<double>& wq, const std::vector<double>& bq,
    const std::vector<double>& wk, const std::vector<double>& bk,
    const std::vector<double>& wv, const std::vector<double>& bv,
    const std::vector<double>& wo, const std::vector<double>& bo,
    double scale_dim) {
    const int dh = d / heads;
    auto project = [&](const std::vector<double>& w,
                       const std::vector<double>& b) {
        std::vector<double> out(static_cast<size_t>(n) * d, 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) {
                double acc = b[static_cast<size_t>(j)];
                for (int p = 0; p < d; ++p)
                    acc += h[static_cast<size_t>(i) * d + p] *
                           w[static_cast<size_t>(p) * d + j];
                out[static_cast<size_t>(i) * d + j] = acc;
            }
        return out;
    };
    const std::vector<double> q = project(wq, bq);
    const std::vector<double> k = project(wk, bk);
    const std::vector<double> v = project(wv, bv);

    std::vector<double> cat(static_cast<size_t>(n) * d, 0.0);
    const double inv_scale = 1.0 / std::sqrt(scale_dim);
    for (int hd = 0; hd < heads; ++hd) {
        const int off = hd * dh;
        for (int i = 0; i < n; ++i) {
            std::vector<double> scores(static_cast<size_t>(n));
            double mx = -1e300;
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                for (int p = 0; p < dh; ++p)
                    s += q[static_cast<size_t>(i) * d + off + p] *
                         k[static_cast<size_t>(j) * d + off + p];
                scores[static_cast<size_t>(j)] = s * inv_scale;
                mx = std::max(mx, scores[static_cast<size_t>(j)]);
            }
            double denom = 0.0;
            for (int j = 0; j < n; ++j) {
                scores[static_cast<size_t>(j)] =
                    std::exp(scores[static_cast<size_t>(j)] - mx);
                denom += scores[static_cast<size_t>(j)];
            }
            for (int p = 0; p < dh; ++p) {
                double acc = 0.0;
                for (int j = 0; j < n; ++j)
                    acc += scores[static_cast<size_t>(j)] / denom *
                           v[static_cast<size_t>(j) * d + off + p];
                cat[static_cast<size_t>(i) * d + off + p] = acc;
            }
        }
    }

    std::vector<double> out(static_cast<size_t>(n) * d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            double acc = bo[static_cast<size_t>(j)];
            for (int p = 0; p < d; ++p)
                acc += cat[static_cast<size_t>(i) * d + p] *
                       wo[static_cast<size_t>(p) * d + j];
            out[static_cast<size_t>(i) * d + j] = acc;
        }
    return out;
}

inline void fill_normal(loraseg::Tensor& t, loraseg::Rng& rng,
                        double stddev = 1.0) {
    float* d = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
        d[i] = static_cast<float>(rng.normal(0.0, stddev));
}

inline std::vector<double> to_doubles(const loraseg::Tensor& t) {
    const float* d = t.data();
    return std::vector<double>(d, d + t.numel());
}

}  // namespace oracles
