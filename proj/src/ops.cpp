#include "loraseg/ops.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "loraseg/kernels.hpp"

namespace loraseg::ops {

namespace {

const kernels::Backend& K() { return kernels::active(); }

bool track(Tape* tape, std::initializer_list<Tensor> ins) {
    if (!tape) return false;
    for (const Tensor& t : ins)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

[[noreturn]] void shape_error(const std::string& op, const Tensor& a,
                              const Tensor& b) {
    throw std::invalid_argument(op + ": incompatible shapes " + a.shape_str() +
                                " and " + b.shape_str());
}

void mul_acc(float* dst, const float* a, const float* b, int64_t n) {
    for (int64_t i = 0; i < n; ++i) dst[i] += a[i] * b[i];
}

}  // namespace

Tensor matmul(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        shape_error("matmul", a, b);
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    K().matmul_nn(m, n, k, a.data(), k, b.data(), n, out.data(), n, false);
    if (track(tape, {a, b})) {
        out.set_requires_grad(true);
        tape->record(
            [a = a, b = b, out, m, n, k]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                if (a.requires_grad())  // dA += g * B^T
                    K().matmul_nt(m, k, n, g, n, b.data(), n, a.grad_buffer(),
                                  k, true);
                if (b.requires_grad())  // dB += A^T * g
                    K().matmul_tn(k, n, m, a.data(), k, g, n, b.grad_buffer(),
                                  n, true);
            },
            {a, b});
    }
    return out;
}

Tensor matmul_nt(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
        shape_error("matmul_nt", a, b);
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out = Tensor::zeros({m, n});
    K().matmul_nt(m, n, k, a.data(), k, b.data(), k, out.data(), n, false);
    if (track(tape, {a, b})) {
        out.set_requires_grad(true);
        tape->record(
            [a = a, b = b, out, m, n, k]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                if (a.requires_grad())  // dA += g * B
                    K().matmul_nn(m, k, n, g, n, b.data(), k, a.grad_buffer(),
                                  k, true);
                if (b.requires_grad())  // dB += g^T * A
                    K().matmul_tn(n, k, m, g, n, a.data(), k, b.grad_buffer(),
                                  k, true);
            },
            {a, b});
    }
    return out;
}

Tensor add(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("add", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const int64_t n = a.numel();
    K().add(out.data(), a.data(), b.data(), n);
    if (track(tape, {a, b})) {
        out.set_requires_grad(true);
        tape->record(
            [a = a, b = b, out, n]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                if (a.requires_grad()) K().axpy(a.grad_buffer(), 1.0f, g, n);
                if (b.requires_grad()) K().axpy(b.grad_buffer(), 1.0f, g, n);
            },
            {a, b});
    }
    return out;
}

Tensor mul(Tape* tape, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("mul", a, b);
    Tensor out = Tensor::zeros(a.shape());
    const int64_t n = a.numel();
    K().mul(out.data(), a.data(), b.data(), n);
    if (track(tape, {a, b})) {
        out.set_requires_grad(true);
        tape->record(
            [a = a, b = b, out, n]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                if (a.requires_grad()) mul_acc(a.grad_buffer(), g, b.data(), n);
                if (b.requires_grad()) mul_acc(b.grad_buffer(), g, a.data(), n);
            },
            {a, b});
    }
    return out;
}

Tensor scale(Tape* tape, const Tensor& x, float s) {
    Tensor out = Tensor::zeros(x.shape());
    const int64_t n = x.numel();
    K().scale(out.data(), x.data(), s, n);
    if (track(tape, {x})) {
        out.set_requires_grad(true);
        tape->record(
            [x = x, out, s, n]() mutable {
                if (!out.has_grad()) return;
                K().axpy(x.grad_buffer(), s, out.grad(), n);
            },
            {x});
    }
    return out;
}

Tensor add_row_bias(Tape* tape, const Tensor& x, const Tensor& bias) {
    if (bias.ndim() != 1 || x.dim(-1) != bias.dim(0))
        shape_error("add_row_bias", x, bias);
    const int d = bias.dim(0);
    const int64_t rows = x.numel() / d;
    Tensor out = Tensor::zeros(x.shape());
    for (int64_t r = 0; r < rows; ++r)
        K().add(out.data() + r * d, x.data() + r * d, bias.data(), d);
    if (track(tape, {x, bias})) {
        out.set_requires_grad(true);
        tape->record(
            [x = x, bias = bias, out, rows, d]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                if (x.requires_grad())
                    K().axpy(x.grad_buffer(), 1.0f, g, rows * d);
                if (bias.requires_grad()) {
                    float* gb = bias.grad_buffer();
                    for (int64_t r = 0; r < rows; ++r)
                        K().axpy(gb, 1.0f, g + r * d, d);
                }
            },
            {x, bias});
    }
    return out;
}

Tensor slice_cols(Tape* tape, const Tensor& x, int start, int len) {
    if (x.ndim() != 2 || start < 0 || len <= 0 || start + len > x.dim(1))
        throw std::invalid_argument(
            "slice_cols: [" + std::to_string(start) + ", " +
            std::to_string(start + len) + ") out of range for " +
            x.shape_str());
    const int rows = x.dim(0), cols = x.dim(1);
    Tensor out = Tensor::zeros({rows, len});
    for (int r = 0; r < rows; ++r)
        std::memcpy(out.data() + static_cast<int64_t>(r) * len,
                    x.data() + static_cast<int64_t>(r) * cols + start,
                    sizeof(float) * static_cast<size_t>(len));
    if (track(tape, {x})) {
        out.set_requires_grad(true);
        tape->record(
            [x = x, out, rows, cols, start, len]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                float* gx = x.grad_buffer();
                for (int r = 0; r < rows; ++r)
                    K().axpy(gx + static_cast<int64_t>(r) * cols + start, 1.0f,
                             g + static_cast<int64_t>(r) * len, len);
            },
            {x});
    }
    return out;
}

Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
    if (parts.empty())
        throw std::invalid_argument("concat_cols: no tensors given");
    const int rows = parts[0].dim(0);
    int total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != rows)
            shape_error("concat_cols", parts[0], p);
        total += p.dim(1);
    }
    Tensor out = Tensor::zeros({rows, total});
    int off = 0;
    for (const Tensor& p : parts) {
        const int len = p.dim(1);
        for (int r = 0; r < rows; ++r)
            std::memcpy(out.data() + static_cast<int64_t>(r) * total + off,
                        p.data() + static_cast<int64_t>(r) * len,
                        sizeof(float) * static_cast<size_t>(len));
        off += len;
    }
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (tape && any) {
        out.set_requires_grad(true);
        std::vector<Tensor> held = parts;
        tape->record(
            [held, out, rows, total]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                int off = 0;
                for (Tensor& p : held) {
                    const int len = p.dim(1);
                    if (p.requires_grad()) {
                        float* gp = p.grad_buffer();
                        for (int r = 0; r < rows; ++r)
                            K().axpy(gp + static_cast<int64_t>(r) * len, 1.0f,
                                     g + static_cast<int64_t>(r) * total + off,
                                     len);
                    }
                    off += len;
                }
            },
            parts);
    }
    return out;
}

Tensor concat_axis0(Tape* tape, const std::vector<Tensor>& parts) {
    if (parts.empty())
        throw std::invalid_argument("concat_axis0: no tensors given");
    std::vector<int> rest(parts[0].shape().begin() + 1,
                          parts[0].shape().end());
    int total0 = 0;
    for (const Tensor& p : parts) {
        std::vector<int> r(p.shape().begin() + 1, p.shape().end());
        if (r != rest) shape_error("concat_axis0", parts[0], p);
        total0 += p.dim(0);
    }
    std::vector<int> oshape = {total0};
    oshape.insert(oshape.end(), rest.begin(), rest.end());
    Tensor out = Tensor::zeros(oshape);
    int64_t off = 0;
    for (const Tensor& p : parts) {
        std::memcpy(out.data() + off, p.data(),
                    sizeof(float) * static_cast<size_t>(p.numel()));
        off += p.numel();
    }
    bool any = false;
    for (const Tensor& p : parts) any = any || p.requires_grad();
    if (tape && any) {
        out.set_requires_grad(true);
        std::vector<Tensor> held = parts;
        tape->record(
            [held, out]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                int64_t off = 0;
                for (Tensor& p : held) {
                    if (p.requires_grad())
                        K().axpy(p.grad_buffer(), 1.0f, g + off, p.numel());
                    off += p.numel();
                }
            },
            parts);
    }
    return out;
}

Tensor softmax(Tape* tape, const Tensor& x, int axis) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd)
        throw std::invalid_argument("softmax: axis out of range for " +
                                    x.shape_str());
    const auto& s = x.shape();
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[i];
    for (int i = axis + 1; i < nd; ++i) inner *= s[i];
    const int len = s[axis];

    Tensor out = Tensor::zeros(x.shape());
    const float* xd = x.data();
    float* od = out.data();
    std::vector<float> buf(static_cast<size_t>(len));
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * len * inner + in;
            for (int j = 0; j < len; ++j) buf[j] = xd[base + j * inner];
            const float mx = K().max(buf.data(), len);
            double sum = 0.0;
            for (int j = 0; j < len; ++j) {
                buf[j] = std::exp(buf[j] - mx);
                sum += buf[j];
            }
            const float inv = static_cast<float>(1.0 / sum);
            for (int j = 0; j < len; ++j) od[base + j * inner] = buf[j] * inv;
        }
    }
    if (track(tape, {x})) {
        out.set_requires_grad(true);
        tape->record(
            [x = x, out, outer, inner, len]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                const float* y = out.data();
                float* gx = x.grad_buffer();
                for (int64_t o = 0; o < outer; ++o) {
                    for (int64_t in = 0; in < inner; ++in) {
                        const int64_t base = o * len * inner + in;
                        double dot = 0.0;
                        for (int j = 0; j < len; ++j) {
                            const int64_t q = base + j * inner;
                            dot += static_cast<double>(g[q]) * y[q];
                        }
                        const float d = static_cast<float>(dot);
                        for (int j = 0; j < len; ++j) {
                            const int64_t q = base + j * inner;
                            gx[q] += y[q] * (g[q] - d);
                        }
                    }
                }
            },
            {x});
    }
    return out;
}

Tensor layer_norm(Tape* tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, float eps) {
    if (eps <= 0.0f) throw std::invalid_argument("layer_norm: eps must be > 0");
    const int d = x.dim(-1);
    if (gamma.ndim() != 1 || gamma.dim(0) != d) shape_error("layer_norm", x, gamma);
    if (beta.ndim() != 1 || beta.dim(0) != d) shape_error("layer_norm", x, beta);
    const int64_t rows = x.numel() / d;

    Tensor out = Tensor::zeros(x.shape());
    // Saved for backward: the standardized activations and 1/sigma per row.
    auto xhat = std::make_shared<std::vector<float>>(x.numel());
    auto rstd = std::make_shared<std::vector<float>>(rows);
    const float* xd = x.data();
    float* od = out.data();
    const float* gm = gamma.data();
    const float* bt = beta.data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* row = xd + r * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= d;
        const float inv =
            static_cast<float>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        (*rstd)[static_cast<size_t>(r)] = inv;
        float* xh = xhat->data() + r * d;
        float* orow = od + r * d;
        const float mu = static_cast<float>(mean);
        for (int j = 0; j < d; ++j) {
            xh[j] = (row[j] - mu) * inv;
            orow[j] = gm[j] * xh[j] + bt[j];
        }
    }
    if (track(tape, {x, gamma, beta})) {
        out.set_requires_grad(true);
        Tensor xc = x, gc = gamma, bc = beta;
        tape->record(
            [xc, gc, bc, out, xhat, rstd, rows, d]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                const float* gm = gc.data();
                float* ggamma = gc.requires_grad() ? gc.grad_buffer() : nullptr;
                float* gbeta = bc.requires_grad() ? bc.grad_buffer() : nullptr;
                float* gx = xc.requires_grad() ? xc.grad_buffer() : nullptr;
                for (int64_t r = 0; r < rows; ++r) {
                    const float* grow = g + r * d;
                    const float* xh = xhat->data() + r * d;
                    if (ggamma)
                        for (int j = 0; j < d; ++j)
                            ggamma[j] += grow[j] * xh[j];
                    if (gbeta)
                        for (int j = 0; j < d; ++j) gbeta[j] += grow[j];
                    if (gx) {
                        double s1 = 0.0, s2 = 0.0;
                        for (int j = 0; j < d; ++j) {
                            const double dxh =
                                static_cast<double>(grow[j]) * gm[j];
                            s1 += dxh;
                            s2 += dxh * xh[j];
                        }
                        const float m1 = static_cast<float>(s1 / d);
                        const float m2 = static_cast<float>(s2 / d);
                        const float inv = (*rstd)[static_cast<size_t>(r)];
                        float* gxrow = gx + r * d;
                        for (int j = 0; j < d; ++j) {
                            const float dxh = grow[j] * gm[j];
                            gxrow[j] += inv * (dxh - m1 - xh[j] * m2);
                        }
                    }
                }
            },
            {x, gamma, beta});
    }
    return out;
}

namespace {

constexpr float kInvSqrt2 = 0.70710678118654752440f;
constexpr float kInvSqrt2Pi = 0.39894228040143267794f;

float gelu_fwd(float v) { return 0.5f * v * (1.0f + std::erf(v * kInvSqrt2)); }

float gelu_grad(float v) {
    const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
    const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
    return cdf + v * pdf;
}

}  // namespace

Tensor gelu(Tape* tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const int64_t n = x.numel();
    const float* xd = x.data();
    float* od = out.data();
    for (int64_t i = 0; i < n; ++i) od[i] = gelu_fwd(xd[i]);
    if (track(tape, {x})) {
        out.set_requires_grad(true);
        tape->record(
            [x = x, out, n]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                const float* xd = x.data();
                float* gx = x.grad_buffer();
                for (int64_t i = 0; i < n; ++i)
                    gx[i] += g[i] * gelu_grad(xd[i]);
            },
            {x});
    }
    return out;
}

Tensor relu(Tape* tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const int64_t n = x.numel();
    const float* xd = x.data();
    float* od = out.data();
    for (int64_t i = 0; i < n; ++i) od[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
    if (track(tape, {x})) {
        out.set_requires_grad(true);
        tape->record(
            [x = x, out, n]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                const float* xd = x.data();
                float* gx = x.grad_buffer();
                for (int64_t i = 0; i < n; ++i)
                    if (xd[i] > 0.0f) gx[i] += g[i];
            },
            {x});
    }
    return out;
}

namespace {

float sigmoid_fwd(float v) {
    if (v >= 0.0f) return 1.0f / (1.0f + std::exp(-v));
    const float e = std::exp(v);
    return e / (1.0f + e);
}

}  // namespace

Tensor sigmoid(Tape* tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const int64_t n = x.numel();
    const float* xd = x.data();
    float* od = out.data();
    for (int64_t i = 0; i < n; ++i) od[i] = sigmoid_fwd(xd[i]);
    if (track(tape, {x})) {
        out.set_requires_grad(true);
        tape->record(
            [x = x, out, n]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                const float* y = out.data();
                float* gx = x.grad_buffer();
                for (int64_t i = 0; i < n; ++i)
                    gx[i] += g[i] * y[i] * (1.0f - y[i]);
            },
            {x});
    }
    return out;
}

namespace {

struct ConvDims {
    int cin, h, w, cout, k, oh, ow, ckk;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b,
                   int stride, int dilation, int padding) {
    if (x.ndim() != 3 || w.ndim() != 4) shape_error("conv2d", x, w);
    ConvDims d{};
    d.cin = x.dim(0);
    d.h = x.dim(1);
    d.w = x.dim(2);
    d.cout = w.dim(0);
    d.k = w.dim(2);
    if (w.dim(1) != d.cin || w.dim(3) != d.k) shape_error("conv2d", x, w);
    if (d.k != 1 && d.k != 3)
        throw std::invalid_argument("conv2d: kernel size must be 1 or 3, got " +
                                    std::to_string(d.k));
    if (b.ndim() != 1 || b.dim(0) != d.cout) shape_error("conv2d bias", w, b);
    if (stride < 1 || dilation < 1 || padding < 0)
        throw std::invalid_argument("conv2d: bad stride/dilation/padding");
    const int eh = d.h + 2 * padding - dilation * (d.k - 1) - 1;
    const int ew = d.w + 2 * padding - dilation * (d.k - 1) - 1;
    if (eh < 0 || ew < 0 || eh % stride != 0 || ew % stride != 0)
        throw std::invalid_argument(
            "conv2d: non-integral output size for input " + x.shape_str() +
            ", kernel " + std::to_string(d.k) + ", stride " +
            std::to_string(stride) + ", dilation " + std::to_string(dilation) +
            ", padding " + std::to_string(padding));
    d.oh = eh / stride + 1;
    d.ow = ew / stride + 1;
    d.ckk = d.cin * d.k * d.k;
    return d;
}

// col[(c*k*k + ky*k + kx)][oy*ow + ox]
void im2col(const float* x, const ConvDims& d, int stride, int dilation,
            int padding, float* col) {
    const int64_t ocols = static_cast<int64_t>(d.oh) * d.ow;
    for (int c = 0; c < d.cin; ++c) {
        const float* plane = x + static_cast<int64_t>(c) * d.h * d.w;
        for (int ky = 0; ky < d.k; ++ky) {
            for (int kx = 0; kx < d.k; ++kx) {
                float* crow =
                    col + (static_cast<int64_t>(c) * d.k * d.k + ky * d.k + kx) *
                              ocols;
                for (int oy = 0; oy < d.oh; ++oy) {
                    const int iy = oy * stride - padding + ky * dilation;
                    float* dst = crow + static_cast<int64_t>(oy) * d.ow;
                    if (iy < 0 || iy >= d.h) {
                        std::fill(dst, dst + d.ow, 0.0f);
                        continue;
                    }
                    const float* src = plane + static_cast<int64_t>(iy) * d.w;
                    for (int ox = 0; ox < d.ow; ++ox) {
                        const int ix = ox * stride - padding + kx * dilation;
                        dst[ox] = (ix >= 0 && ix < d.w) ? src[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_acc(const float* col, const ConvDims& d, int stride, int dilation,
                int padding, float* gx) {
    const int64_t ocols = static_cast<int64_t>(d.oh) * d.ow;
    for (int c = 0; c < d.cin; ++c) {
        float* plane = gx + static_cast<int64_t>(c) * d.h * d.w;
        for (int ky = 0; ky < d.k; ++ky) {
            for (int kx = 0; kx < d.k; ++kx) {
                const float* crow =
                    col + (static_cast<int64_t>(c) * d.k * d.k + ky * d.k + kx) *
                              ocols;
                for (int oy = 0; oy < d.oh; ++oy) {
                    const int iy = oy * stride - padding + ky * dilation;
                    if (iy < 0 || iy >= d.h) continue;
                    const float* src = crow + static_cast<int64_t>(oy) * d.ow;
                    float* dst = plane + static_cast<int64_t>(iy) * d.w;
                    for (int ox = 0; ox < d.ow; ++ox) {
                        const int ix = ox * stride - padding + kx * dilation;
                        if (ix >= 0 && ix < d.w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(Tape* tape, const Tensor& x, const Tensor& w, const Tensor& b,
              int stride, int dilation, int padding) {
    const ConvDims d = conv_dims(x, w, b, stride, dilation, padding);
    const int64_t ocols = static_cast<int64_t>(d.oh) * d.ow;
    std::vector<float> col(static_cast<size_t>(d.ckk) * ocols);
    im2col(x.data(), d, stride, dilation, padding, col.data());

    Tensor out = Tensor::zeros({d.cout, d.oh, d.ow});
    K().matmul_nn(d.cout, static_cast<int>(ocols), d.ckk, w.data(), d.ckk,
                  col.data(), static_cast<int>(ocols), out.data(),
                  static_cast<int>(ocols), false);
    for (int c = 0; c < d.cout; ++c) {
        float* row = out.data() + static_cast<int64_t>(c) * ocols;
        const float bias = b.data()[c];
        for (int64_t i = 0; i < ocols; ++i) row[i] += bias;
    }
    if (track(tape, {x, w, b})) {
        out.set_requires_grad(true);
        Tensor xc = x, wc = w, bc = b;
        // The im2col buffer is recomputed in backward rather than captured.
        tape->record(
            [xc, wc, bc, out, d, stride, dilation, padding, ocols]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                if (bc.requires_grad()) {
                    float* gb = bc.grad_buffer();
                    for (int c = 0; c < d.cout; ++c)
                        gb[c] += K().sum(g + static_cast<int64_t>(c) * ocols,
                                         ocols);
                }
                if (wc.requires_grad()) {
                    std::vector<float> col(static_cast<size_t>(d.ckk) * ocols);
                    im2col(xc.data(), d, stride, dilation, padding, col.data());
                    K().matmul_nt(d.cout, d.ckk, static_cast<int>(ocols), g,
                                  static_cast<int>(ocols), col.data(),
                                  static_cast<int>(ocols), wc.grad_buffer(),
                                  d.ckk, true);
                }
                if (xc.requires_grad()) {
                    std::vector<float> gcol(static_cast<size_t>(d.ckk) * ocols);
                    K().matmul_tn(d.ckk, static_cast<int>(ocols), d.cout,
                                  wc.data(), d.ckk, g, static_cast<int>(ocols),
                                  gcol.data(), static_cast<int>(ocols), false);
                    col2im_acc(gcol.data(), d, stride, dilation, padding,
                               xc.grad_buffer());
                }
            },
            {x, w, b});
    }
    return out;
}

namespace {

struct Lerp {
    int i0, i1;
    float w1;  // weight of i1; i0 gets 1 - w1
};

// Half-pixel source coordinate, clamped to the valid range.
Lerp lerp_coeff(int out_idx, int out_len, int in_len) {
    const double s =
        (static_cast<double>(out_idx) + 0.5) * in_len / out_len - 0.5;
    const double c = std::min(std::max(s, 0.0), static_cast<double>(in_len - 1));
    Lerp l;
    l.i0 = static_cast<int>(c);
    l.i1 = std::min(l.i0 + 1, in_len - 1);
    l.w1 = static_cast<float>(c - l.i0);
    return l;
}

}  // namespace

Tensor bilinear_resize(Tape* tape, const Tensor& x, int out_h, int out_w) {
    if (x.ndim() != 3)
        throw std::invalid_argument("bilinear_resize: expected [C x h x w], got " +
                                    x.shape_str());
    if (out_h < 1 || out_w < 1)
        throw std::invalid_argument("bilinear_resize: output size must be >= 1");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    std::vector<Lerp> ly(static_cast<size_t>(out_h)), lx(static_cast<size_t>(out_w));
    for (int i = 0; i < out_h; ++i) ly[static_cast<size_t>(i)] = lerp_coeff(i, out_h, h);
    for (int i = 0; i < out_w; ++i) lx[static_cast<size_t>(i)] = lerp_coeff(i, out_w, w);

    Tensor out = Tensor::zeros({c, out_h, out_w});
    const float* xd = x.data();
    float* od = out.data();
    for (int ch = 0; ch < c; ++ch) {
        const float* plane = xd + static_cast<int64_t>(ch) * h * w;
        float* oplane = od + static_cast<int64_t>(ch) * out_h * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
            const Lerp& y = ly[static_cast<size_t>(oy)];
            const float* r0 = plane + static_cast<int64_t>(y.i0) * w;
            const float* r1 = plane + static_cast<int64_t>(y.i1) * w;
            float* orow = oplane + static_cast<int64_t>(oy) * out_w;
            for (int ox = 0; ox < out_w; ++ox) {
                const Lerp& xc = lx[static_cast<size_t>(ox)];
                const float top = r0[xc.i0] * (1.0f - xc.w1) + r0[xc.i1] * xc.w1;
                const float bot = r1[xc.i0] * (1.0f - xc.w1) + r1[xc.i1] * xc.w1;
                orow[ox] = top * (1.0f - y.w1) + bot * y.w1;
            }
        }
    }
    if (track(tape, {x})) {
        out.set_requires_grad(true);
        tape->record(
            [x = x, out, ly, lx, c, h, w, out_h, out_w]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                float* gx = x.grad_buffer();
                for (int ch = 0; ch < c; ++ch) {
                    float* gplane = gx + static_cast<int64_t>(ch) * h * w;
                    const float* goplane =
                        g + static_cast<int64_t>(ch) * out_h * out_w;
                    for (int oy = 0; oy < out_h; ++oy) {
                        const Lerp& y = ly[static_cast<size_t>(oy)];
                        const float* grow =
                            goplane + static_cast<int64_t>(oy) * out_w;
                        for (int ox = 0; ox < out_w; ++ox) {
                            const Lerp& xc = lx[static_cast<size_t>(ox)];
                            const float gv = grow[ox];
                            gplane[y.i0 * w + xc.i0] +=
                                gv * (1.0f - y.w1) * (1.0f - xc.w1);
                            gplane[y.i0 * w + xc.i1] += gv * (1.0f - y.w1) * xc.w1;
                            gplane[y.i1 * w + xc.i0] += gv * y.w1 * (1.0f - xc.w1);
                            gplane[y.i1 * w + xc.i1] += gv * y.w1 * xc.w1;
                        }
                    }
                }
            },
            {x});
    }
    return out;
}

Tensor adaptive_avg_pool(Tape* tape, const Tensor& x) {
    if (x.ndim() != 3)
        throw std::invalid_argument("adaptive_avg_pool: expected [C x h x w], got " +
                                    x.shape_str());
    const int c = x.dim(0);
    const int64_t hw = static_cast<int64_t>(x.dim(1)) * x.dim(2);
    Tensor out = Tensor::zeros({c, 1, 1});
    for (int ch = 0; ch < c; ++ch)
        out.data()[ch] =
            K().sum(x.data() + static_cast<int64_t>(ch) * hw, hw) /
            static_cast<float>(hw);
    if (track(tape, {x})) {
        out.set_requires_grad(true);
        tape->record(
            [x = x, out, c, hw]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                float* gx = x.grad_buffer();
                const float inv = 1.0f / static_cast<float>(hw);
                for (int ch = 0; ch < c; ++ch) {
                    const float gv = g[ch] * inv;
                    float* plane = gx + static_cast<int64_t>(ch) * hw;
                    for (int64_t i = 0; i < hw; ++i) plane[i] += gv;
                }
            },
            {x});
    }
    return out;
}

Tensor tokens_to_grid(Tape* tape, const Tensor& x) {
    if (x.ndim() != 2)
        throw std::invalid_argument("tokens_to_grid: expected [N x D], got " +
                                    x.shape_str());
    const int n = x.dim(0), d = x.dim(1);
    const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
    if (g * g != n)
        throw std::invalid_argument("tokens_to_grid: token count " +
                                    std::to_string(n) + " is not a perfect square");
    Tensor out = Tensor::zeros({d, g, g});
    const float* xd = x.data();
    float* od = out.data();
    for (int t = 0; t < n; ++t)
        for (int j = 0; j < d; ++j)
            od[static_cast<int64_t>(j) * n + t] =
                xd[static_cast<int64_t>(t) * d + j];
    if (track(tape, {x})) {
        out.set_requires_grad(true);
        tape->record(
            [x = x, out, n, d]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                float* gx = x.grad_buffer();
                for (int t = 0; t < n; ++t)
                    for (int j = 0; j < d; ++j)
                        gx[static_cast<int64_t>(t) * d + j] +=
                            g[static_cast<int64_t>(j) * n + t];
            },
            {x});
    }
    return out;
}

Tensor grid_to_tokens(Tape* tape, const Tensor& x) {
    if (x.ndim() != 3 || x.dim(1) != x.dim(2))
        throw std::invalid_argument("grid_to_tokens: expected [D x g x g], got " +
                                    x.shape_str());
    const int d = x.dim(0), g = x.dim(1), n = g * g;
    Tensor out = Tensor::zeros({n, d});
    const float* xd = x.data();
    float* od = out.data();
    for (int t = 0; t < n; ++t)
        for (int j = 0; j < d; ++j)
            od[static_cast<int64_t>(t) * d + j] =
                xd[static_cast<int64_t>(j) * n + t];
    if (track(tape, {x})) {
        out.set_requires_grad(true);
        tape->record(
            [x = x, out, n, d]() mutable {
                if (!out.has_grad()) return;
                const float* gr = out.grad();
                float* gx = x.grad_buffer();
                for (int t = 0; t < n; ++t)
                    for (int j = 0; j < d; ++j)
                        gx[static_cast<int64_t>(j) * n + t] +=
                            gr[static_cast<int64_t>(t) * d + j];
            },
            {x});
    }
    return out;
}

Tensor extract_patches(Tape* tape, const Tensor& image, int patch) {
    if (image.ndim() != 3)
        throw std::invalid_argument("extract_patches: expected [C x H x W], got " +
                                    image.shape_str());
    const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (patch <= 0 || h % patch != 0 || w % patch != 0)
        throw std::invalid_argument(
            "extract_patches: image " + image.shape_str() +
            " not divisible by patch size " + std::to_string(patch));
    const int gh = h / patch, gw = w / patch, n = gh * gw;
    const int cols = c * patch * patch;
    Tensor out = Tensor::zeros({n, cols});
    const float* xd = image.data();
    float* od = out.data();
    for (int t = 0; t < n; ++t) {
        const int pr = (t / gw) * patch, pc = (t % gw) * patch;
        float* row = od + static_cast<int64_t>(t) * cols;
        for (int ch = 0; ch < c; ++ch) {
            const float* plane = xd + static_cast<int64_t>(ch) * h * w;
            for (int py = 0; py < patch; ++py) {
                std::memcpy(row + (ch * patch + py) * patch,
                            plane + static_cast<int64_t>(pr + py) * w + pc,
                            sizeof(float) * static_cast<size_t>(patch));
            }
        }
    }
    if (track(tape, {image})) {
        out.set_requires_grad(true);
        Tensor img = image;
        tape->record(
            [img, out, c, h, w, patch, gw, n, cols]() mutable {
                if (!out.has_grad()) return;
                const float* g = out.grad();
                float* gx = img.grad_buffer();
                for (int t = 0; t < n; ++t) {
                    const int pr = (t / gw) * patch, pc = (t % gw) * patch;
                    const float* row = g + static_cast<int64_t>(t) * cols;
                    for (int ch = 0; ch < c; ++ch) {
                        float* plane = gx + static_cast<int64_t>(ch) * h * w;
                        for (int py = 0; py < patch; ++py)
                            K().axpy(plane +
                                         static_cast<int64_t>(pr + py) * w + pc,
                                     1.0f, row + (ch * patch + py) * patch,
                                     patch);
                    }
                }
            },
            {image});
    }
    return out;
}

Tensor bce_with_logits(Tape* tape, const Tensor& logits,
                       const Tensor& targets) {
    if (logits.shape() != targets.shape())
        shape_error("bce_with_logits", logits, targets);
    const int64_t n = logits.numel();
    const float* xd = logits.data();
    const float* yd = targets.data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const float y = yd[i];
        if (y != 0.0f && y != 1.0f)
            throw std::invalid_argument(
                "bce_with_logits: target value " + std::to_string(y) +
                " at index " + std::to_string(i) + " is not in {0, 1}");
        const float x = xd[i];
        acc += std::max(x, 0.0f) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    Tensor out = Tensor::scalar_value(static_cast<float>(acc / n));
    if (track(tape, {logits})) {
        out.set_requires_grad(true);
        Tensor lg = logits, tg = targets;
        tape->record(
            [lg, tg, out, n]() mutable {
                if (!out.has_grad()) return;
                const float g = out.grad()[0];
                const float* xd = lg.data();
                const float* yd = tg.data();
                float* gx = lg.grad_buffer();
                const float inv = g / static_cast<float>(n);
                for (int64_t i = 0; i < n; ++i)
                    gx[i] += inv * (sigmoid_fwd(xd[i]) - yd[i]);
            },
            {logits});
    }
    return out;
}

Tensor sum_all(Tape* tape, const Tensor& x) {
    Tensor out = Tensor::scalar_value(K().sum(x.data(), x.numel()));
    if (track(tape, {x})) {
        out.set_requires_grad(true);
        const int64_t n = x.numel();
        tape->record(
            [x = x, out, n]() mutable {
                if (!out.has_grad()) return;
                const float g = out.grad()[0];
                float* gx = x.grad_buffer();
                for (int64_t i = 0; i < n; ++i) gx[i] += g;
            },
            {x});
    }
    return out;
}

}  // namespace loraseg::ops
