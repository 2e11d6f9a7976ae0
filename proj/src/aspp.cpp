#include "loraseg/aspp.hpp"

#include <cmath>
#include <stdexcept>

#include "loraseg/ops.hpp"

namespace loraseg {

void HeadConfig::validate() const {
    if (in_dim <= 0 || width <= 0 || out_h <= 0 || out_w <= 0)
        throw std::invalid_argument("head config fields must be positive");
    if (out_classes != 1)
        throw std::invalid_argument("head supports exactly one output class");
    for (int r : atrous_rates)
        if (r <= 0) throw std::invalid_argument("atrous rates must be positive");
    if (atrous_rates[0] == atrous_rates[1] || atrous_rates[1] == atrous_rates[2] ||
        atrous_rates[0] == atrous_rates[2])
        throw std::invalid_argument("atrous rates must be distinct");
}

namespace {

Tensor conv_weight(int cout, int cin, int k, Rng& rng, bool zero_init) {
    Tensor t = Tensor::zeros({cout, cin, k, k}, true);
    if (!zero_init) {
        // He initialization for the ReLU chain.
        const double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
        float* d = t.data();
        for (int64_t i = 0; i < t.numel(); ++i)
            d[i] = static_cast<float>(rng.normal(0.0, stddev));
    }
    return t;
}

}  // namespace

AsppHead::AsppHead(const HeadConfig& cfg, Rng& rng, bool zero_init)
    : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.in_dim, w = cfg_.width;
    b0_w = conv_weight(w, d, 1, rng, zero_init);
    b0_b = Tensor::zeros({w}, true);
    a1_w = conv_weight(w, d, 3, rng, zero_init);
    a1_b = Tensor::zeros({w}, true);
    a2_w = conv_weight(w, d, 3, rng, zero_init);
    a2_b = Tensor::zeros({w}, true);
    a3_w = conv_weight(w, d, 3, rng, zero_init);
    a3_b = Tensor::zeros({w}, true);
    pool_w = conv_weight(w, d, 1, rng, zero_init);
    pool_b = Tensor::zeros({w}, true);
    fuse_w = conv_weight(w, 5 * w, 1, rng, zero_init);
    fuse_b = Tensor::zeros({w}, true);
    refine_w = conv_weight(w, w, 3, rng, zero_init);
    refine_b = Tensor::zeros({w}, true);
    out_w = conv_weight(cfg_.out_classes, w, 1, rng, zero_init);
    out_b = Tensor::zeros({cfg_.out_classes}, true);
}

std::array<Tensor, 5> AsppHead::branches(Tape* tape, const Tensor& grid) const {
    if (grid.ndim() != 3 || grid.dim(0) != cfg_.in_dim)
        throw std::invalid_argument("head expects [D x g x g] with D = " +
                                    std::to_string(cfg_.in_dim) + ", got " +
                                    grid.shape_str());
    const int g = grid.dim(1);
    std::array<Tensor, 5> out;
    out[0] = ops::relu(tape, ops::conv2d(tape, grid, b0_w, b0_b, 1, 1, 0));
    const Tensor* aw[3] = {&a1_w, &a2_w, &a3_w};
    const Tensor* ab[3] = {&a1_b, &a2_b, &a3_b};
    for (int i = 0; i < 3; ++i) {
        const int rate = cfg_.atrous_rates[static_cast<size_t>(i)];
        out[static_cast<size_t>(i) + 1] = ops::relu(
            tape, ops::conv2d(tape, grid, *aw[i], *ab[i], 1, rate, rate));
    }
    Tensor pooled = ops::adaptive_avg_pool(tape, grid);
    pooled = ops::relu(tape, ops::conv2d(tape, pooled, pool_w, pool_b, 1, 1, 0));
    out[4] = ops::bilinear_resize(tape, pooled, g, g);
    return out;
}

Tensor AsppHead::forward(Tape* tape, const Tensor& grid) const {
    std::array<Tensor, 5> br = branches(tape, grid);
    Tensor cat = ops::concat_axis0(
        tape, std::vector<Tensor>(br.begin(), br.end()));
    Tensor f = ops::relu(tape, ops::conv2d(tape, cat, fuse_w, fuse_b, 1, 1, 0));
    f = ops::relu(tape, ops::conv2d(tape, f, refine_w, refine_b, 1, 1, 1));
    Tensor logits = ops::conv2d(tape, f, out_w, out_b, 1, 1, 0);
    return ops::bilinear_resize(tape, logits, cfg_.out_h, cfg_.out_w);
}

void AsppHead::set_trainable(bool trainable) {
    std::vector<std::pair<std::string, Tensor>> params;
    collect_params(params);
    for (auto& [name, t] : params) {
        Tensor tt = t;
        tt.set_requires_grad(trainable);
    }
}

void AsppHead::collect_params(
    std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back("head.branch0.w", b0_w);
    out.emplace_back("head.branch0.b", b0_b);
    out.emplace_back("head.branch1.w", a1_w);
    out.emplace_back("head.branch1.b", a1_b);
    out.emplace_back("head.branch2.w", a2_w);
    out.emplace_back("head.branch2.b", a2_b);
    out.emplace_back("head.branch3.w", a3_w);
    out.emplace_back("head.branch3.b", a3_b);
    out.emplace_back("head.pool.w", pool_w);
    out.emplace_back("head.pool.b", pool_b);
    out.emplace_back("head.fuse.w", fuse_w);
    out.emplace_back("head.fuse.b", fuse_b);
    out.emplace_back("head.refine.w", refine_w);
    out.emplace_back("head.refine.b", refine_b);
    out.emplace_back("head.out.w", out_w);
    out.emplace_back("head.out.b", out_b);
}

std::vector<uint8_t> predict_mask(const Tensor& logits, float threshold) {
    if (threshold <= 0.0f || threshold >= 1.0f)
        throw std::invalid_argument("threshold must lie in (0, 1), got " +
                                    std::to_string(threshold));
    const int64_t n = logits.numel();
    std::vector<uint8_t> mask(static_cast<size_t>(n));
    const float* d = logits.data();
    for (int64_t i = 0; i < n; ++i) {
        const float x = d[i];
        const float p = x >= 0.0f ? 1.0f / (1.0f + std::exp(-x))
                                  : std::exp(x) / (1.0f + std::exp(x));
        mask[static_cast<size_t>(i)] = p >= threshold ? 1 : 0;
    }
    return mask;
}

int64_t head_param_count(int in_dim, int width) {
    const int64_t d = in_dim, w = width;
    int64_t n = 2 * (w * d + w);      // 1x1 branch + pool conv
    n += 3 * (9 * w * d + w);         // dilated 3x3 branches
    n += 5 * w * w + w;               // fuse
    n += 9 * w * w + w;               // refine
    n += w + 1;                       // logit projection
    return n;
}

}  // namespace loraseg
