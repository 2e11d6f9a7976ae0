#pragma once

// Test-only double-precision reference forward for the segmentation model.
// Plain nested loops, no shared code with the library's kernels or ops; it
// reads the model's f32 weights at call time, so finite differences applied
// to those weights probe an independent, effectively exact loss surface.

#include <cmath>
#include <vector>

#include "loraseg/model.hpp"

namespace refmodel {

using Mat = std::vector<double>;  // row-major

inline Mat to_d(const loraseg::Tensor& t) {
    const float* p = t.data();
    return Mat(p, p + t.numel());
}

inline void layer_norm_rows(Mat& x, int rows, int d, const Mat& g,
                            const Mat& b, double eps = 1e-6) {
    for (int r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += x[static_cast<size_t>(r) * d + j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = x[static_cast<size_t>(r) * d + j] - mean;
            var += c * c;
        }
        var /= d;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < d; ++j) {
            double& v = x[static_cast<size_t>(r) * d + j];
            v = g[static_cast<size_t>(j)] * (v - mean) * inv +
                b[static_cast<size_t>(j)];
        }
    }
}

// out[rows x n] = x[rows x d] * w[d x n] + b[n]  (+ (x*B)*A when lora)
inline Mat linear(const Mat& x, int rows, int d, const Mat& w, const Mat& b,
                  int n, const Mat* lora_b = nullptr, const Mat* lora_a = nullptr,
                  int rank = 0) {
    Mat out(static_cast<size_t>(rows) * n, 0.0);
    for (int r = 0; r < rows; ++r)
        for (int j = 0; j < n; ++j) {
            double acc = b[static_cast<size_t>(j)];
            for (int p = 0; p < d; ++p)
                acc += x[static_cast<size_t>(r) * d + p] *
                       w[static_cast<size_t>(p) * n + j];
            out[static_cast<size_t>(r) * n + j] = acc;
        }
    if (lora_b) {
        for (int r = 0; r < rows; ++r) {
            std::vector<double> xb(static_cast<size_t>(rank), 0.0);
            for (int q = 0; q < rank; ++q) {
                double acc = 0.0;
                for (int p = 0; p < d; ++p)
                    acc += x[static_cast<size_t>(r) * d + p] *
                           (*lora_b)[static_cast<size_t>(p) * rank + q];
                xb[static_cast<size_t>(q)] = acc;
            }
            for (int j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int q = 0; q < rank; ++q)
                    acc += xb[static_cast<size_t>(q)] *
                           (*lora_a)[static_cast<size_t>(q) * n + j];
                out[static_cast<size_t>(r) * n + j] += acc;
            }
        }
    }
    return out;
}

inline double gelu_d(double v) {
    return 0.5 * v * (1.0 + std::erf(v * 0.7071067811865475244));
}

// Direct convolution on [C x h x w] with zero out-of-bounds taps + ReLU flag.
inline Mat conv2d_d(const Mat& x, int cin, int h, int w, const Mat& weight,
                    const Mat& bias, int cout, int k, int dil, int pad,
                    bool apply_relu) {
    Mat out(static_cast<size_t>(cout) * h * w, 0.0);
    for (int co = 0; co < cout; ++co)
        for (int oy = 0; oy < h; ++oy)
            for (int ox = 0; ox < w; ++ox) {
                double acc = bias[static_cast<size_t>(co)];
                for (int ci = 0; ci < cin; ++ci)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int iy = oy - pad + ky * dil;
                            const int ix = ox - pad + kx * dil;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                            acc += x[(static_cast<size_t>(ci) * h + iy) * w + ix] *
                                   weight[((static_cast<size_t>(co) * cin + ci) * k +
                                           ky) * k + kx];
                        }
                if (apply_relu && acc < 0.0) acc = 0.0;
                out[(static_cast<size_t>(co) * h + oy) * w + ox] = acc;
            }
    return out;
}

// Half-pixel bilinear with edge clamping, [C x h x w] -> [C x oh x ow].
inline Mat bilinear_d(const Mat& x, int c, int h, int w, int oh, int ow) {
    Mat out(static_cast<size_t>(c) * oh * ow, 0.0);
    for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
                double sy = (oy + 0.5) * h / oh - 0.5;
                double sx = (ox + 0.5) * w / ow - 0.5;
                sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
                sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
                const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
                const int y1 = std::min(y0 + 1, h - 1),
                          x1 = std::min(x0 + 1, w - 1);
                const double wy = sy - y0, wx = sx - x0;
                const auto at = [&](int yy, int xx) {
                    return x[(static_cast<size_t>(ch) * h + yy) * w + xx];
                };
                out[(static_cast<size_t>(ch) * oh + oy) * ow + ox] =
                    (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                    wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
            }
    return out;
}

// Full forward + BCE-with-logits loss in double precision.
inline double loss(const loraseg::SegModel& model, const loraseg::Tensor& image,
                   const std::vector<float>& target) {
    const loraseg::ViTConfig& vc = model.vit_config();
    const loraseg::HeadConfig& hc = model.head_config();
    const int P = vc.patch, D = vc.hidden, C = vc.in_channels;
    const int side = vc.image_size, g = vc.grid(), n = vc.tokens();
    const int heads = vc.heads, dh = D / heads;
    const double scale_dim =
        vc.attention_scale == loraseg::AttentionScale::kPerHead
            ? static_cast<double>(dh)
            : static_cast<double>(D);

    const loraseg::Encoder& enc = model.encoder();

    // patches [n x P*P*C], channel-major within a patch
    Mat patches(static_cast<size_t>(n) * P * P * C, 0.0);
    const float* img = image.data();
    for (int t = 0; t < n; ++t) {
        const int pr = (t / g) * P, pc = (t % g) * P;
        for (int c = 0; c < C; ++c)
            for (int py = 0; py < P; ++py)
                for (int px = 0; px < P; ++px)
                    patches[(static_cast<size_t>(t) * C + c) * P * P + py * P + px] =
                        img[(static_cast<size_t>(c) * side + pr + py) * side + pc + px];
    }

    // z0 = patches * E^T + b + pos  (E is [D x P*P*C])
    const Mat e = to_d(enc.patch_w);
    const Mat eb = to_d(enc.patch_b);
    const Mat pos = to_d(enc.pos);
    const int pcc = P * P * C;
    Mat z(static_cast<size_t>(n) * D, 0.0);
    for (int t = 0; t < n; ++t)
        for (int j = 0; j < D; ++j) {
            double acc = eb[static_cast<size_t>(j)];
            for (int p = 0; p < pcc; ++p)
                acc += patches[static_cast<size_t>(t) * pcc + p] *
                       e[static_cast<size_t>(j) * pcc + p];
            z[static_cast<size_t>(t) * D + j] =
                acc + pos[static_cast<size_t>(t) * D + j];
        }

    for (const loraseg::Encoder::Block& blk : enc.blocks()) {
        Mat h = z;
        layer_norm_rows(h, n, D, to_d(blk.ln1_g), to_d(blk.ln1_b));

        const int rank = blk.q_lora_b.defined() ? blk.q_lora_b.dim(1) : 0;
        Mat qb, qa, vb, va;
        if (blk.q_lora_b.defined()) {
            qb = to_d(blk.q_lora_b);
            qa = to_d(blk.q_lora_a);
        }
        if (blk.v_lora_b.defined()) {
            vb = to_d(blk.v_lora_b);
            va = to_d(blk.v_lora_a);
        }
        const Mat q = linear(h, n, D, to_d(blk.wq), to_d(blk.bq), D,
                             qb.empty() ? nullptr : &qb,
                             qb.empty() ? nullptr : &qa, rank);
        const Mat k = linear(h, n, D, to_d(blk.wk), to_d(blk.bk), D);
        const Mat v = linear(h, n, D, to_d(blk.wv), to_d(blk.bv), D,
                             vb.empty() ? nullptr : &vb,
                             vb.empty() ? nullptr : &va,
                             blk.v_lora_b.defined() ? blk.v_lora_b.dim(1) : 0);

        Mat cat(static_cast<size_t>(n) * D, 0.0);
        const double inv_scale = 1.0 / std::sqrt(scale_dim);
        for (int hd = 0; hd < heads; ++hd) {
            const int off = hd * dh;
            for (int i = 0; i < n; ++i) {
                std::vector<double> scores(static_cast<size_t>(n));
                double mx = -1e300;
                for (int j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (int p = 0; p < dh; ++p)
                        s += q[static_cast<size_t>(i) * D + off + p] *
                             k[static_cast<size_t>(j) * D + off + p];
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
                               v[static_cast<size_t>(j) * D + off + p];
                    cat[static_cast<size_t>(i) * D + off + p] = acc;
                }
            }
        }
        const Mat attn = linear(cat, n, D, to_d(blk.wo), to_d(blk.bo), D);
        for (size_t i = 0; i < z.size(); ++i) z[i] = attn[i] + z[i];

        Mat h2 = z;
        layer_norm_rows(h2, n, D, to_d(blk.ln2_g), to_d(blk.ln2_b));
        Mat m1 = linear(h2, n, D, to_d(blk.mlp_w1), to_d(blk.mlp_b1), vc.mlp_dim);
        for (double& x : m1) x = gelu_d(x);
        const Mat m2 =
            linear(m1, n, vc.mlp_dim, to_d(blk.mlp_w2), to_d(blk.mlp_b2), D);
        for (size_t i = 0; i < z.size(); ++i) z[i] = m2[i] + z[i];
    }
    layer_norm_rows(z, n, D, to_d(enc.final_ln_g), to_d(enc.final_ln_b));

    // grid [D x g x g]
    Mat grid(static_cast<size_t>(D) * n, 0.0);
    for (int t = 0; t < n; ++t)
        for (int j = 0; j < D; ++j)
            grid[static_cast<size_t>(j) * n + t] = z[static_cast<size_t>(t) * D + j];

    const loraseg::AsppHead& head = model.head();
    const int w = hc.width;
    const Mat b0 = conv2d_d(grid, D, g, g, to_d(head.b0_w), to_d(head.b0_b), w,
                            1, 1, 0, true);
    const Mat a1 = conv2d_d(grid, D, g, g, to_d(head.a1_w), to_d(head.a1_b), w,
                            3, hc.atrous_rates[0], hc.atrous_rates[0], true);
    const Mat a2 = conv2d_d(grid, D, g, g, to_d(head.a2_w), to_d(head.a2_b), w,
                            3, hc.atrous_rates[1], hc.atrous_rates[1], true);
    const Mat a3 = conv2d_d(grid, D, g, g, to_d(head.a3_w), to_d(head.a3_b), w,
                            3, hc.atrous_rates[2], hc.atrous_rates[2], true);
    // pool branch: mean -> 1x1 conv -> relu -> upsample
    Mat pooled(static_cast<size_t>(D), 0.0);
    for (int c = 0; c < D; ++c) {
        double acc = 0.0;
        for (int i = 0; i < n; ++i) acc += grid[static_cast<size_t>(c) * n + i];
        pooled[static_cast<size_t>(c)] = acc / n;
    }
    const Mat pconv = conv2d_d(pooled, D, 1, 1, to_d(head.pool_w),
                               to_d(head.pool_b), w, 1, 1, 0, true);
    const Mat pup = bilinear_d(pconv, w, 1, 1, g, g);

    Mat catc(static_cast<size_t>(5) * w * n, 0.0);
    const Mat* parts[5] = {&b0, &a1, &a2, &a3, &pup};
    for (int p = 0; p < 5; ++p)
        std::copy(parts[p]->begin(), parts[p]->end(),
                  catc.begin() + static_cast<int64_t>(p) * w * n);

    const Mat fused = conv2d_d(catc, 5 * w, g, g, to_d(head.fuse_w),
                               to_d(head.fuse_b), w, 1, 1, 0, true);
    const Mat refined = conv2d_d(fused, w, g, g, to_d(head.refine_w),
                                 to_d(head.refine_b), w, 3, 1, 1, true);
    const Mat logit_grid = conv2d_d(refined, w, g, g, to_d(head.out_w),
                                    to_d(head.out_b), 1, 1, 1, 0, false);
    const Mat logits = bilinear_d(logit_grid, 1, g, g, side, side);

    double acc = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        const double x = logits[i];
        const double y = target[i];
        acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    return acc / static_cast<double>(logits.size());
}

}  // namespace refmodel
