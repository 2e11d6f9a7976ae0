#include "loraseg/vit.hpp"

#include <cmath>
#include <stdexcept>

#include "loraseg/lora.hpp"
#include "loraseg/ops.hpp"

namespace loraseg {

ViTConfig ViTConfig::preset(std::string_view name) {
    ViTConfig c;
    if (name == "B_16") {
        c.patch = 16; c.layers = 12; c.hidden = 768; c.mlp_dim = 3072; c.heads = 12;
    } else if (name == "B_32") {
        c.patch = 32; c.layers = 12; c.hidden = 768; c.mlp_dim = 3072; c.heads = 12;
    } else if (name == "L_16") {
        c.patch = 16; c.layers = 24; c.hidden = 1024; c.mlp_dim = 4096; c.heads = 16;
    } else if (name == "L_32") {
        c.patch = 32; c.layers = 24; c.hidden = 1024; c.mlp_dim = 4096; c.heads = 16;
    } else if (name == "tiny") {
        c.patch = 16; c.layers = 2; c.hidden = 32; c.mlp_dim = 128; c.heads = 2;
    } else {
        throw std::invalid_argument("unknown backbone preset '" +
                                    std::string(name) + "'");
    }
    return c;
}

void ViTConfig::validate() const {
    if (patch <= 0 || layers <= 0 || hidden <= 0 || mlp_dim <= 0 || heads <= 0 ||
        in_channels <= 0 || image_size <= 0)
        throw std::invalid_argument("ViT config fields must be positive");
    if (hidden % heads != 0)
        throw std::invalid_argument(
            "hidden dim " + std::to_string(hidden) +
            " not divisible by head count " + std::to_string(heads));
    if (image_size % patch != 0)
        throw std::invalid_argument(
            "image size " + std::to_string(image_size) +
            " not divisible by patch size " + std::to_string(patch));
}

namespace {

Tensor init_weight(std::vector<int> shape, Rng& rng, bool zero_init,
                   float stddev = 0.02f) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    if (!zero_init) {
        float* d = t.data();
        const int64_t n = t.numel();
        for (int64_t i = 0; i < n; ++i)
            d[i] = static_cast<float>(rng.normal(0.0, stddev));
    }
    return t;
}

}  // namespace

Encoder::Encoder(const ViTConfig& cfg, Rng& rng, bool zero_init) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.hidden;
    patch_w = init_weight({d, cfg_.patch * cfg_.patch * cfg_.in_channels}, rng,
                          zero_init);
    patch_b = Tensor::zeros({d}, true);
    pos = init_weight({cfg_.tokens(), d}, rng, zero_init);
    blocks_.resize(static_cast<size_t>(cfg_.layers));
    for (Block& b : blocks_) {
        b.wq = init_weight({d, d}, rng, zero_init);
        b.bq = Tensor::zeros({d}, true);
        b.wk = init_weight({d, d}, rng, zero_init);
        b.bk = Tensor::zeros({d}, true);
        b.wv = init_weight({d, d}, rng, zero_init);
        b.bv = Tensor::zeros({d}, true);
        b.wo = init_weight({d, d}, rng, zero_init);
        b.bo = Tensor::zeros({d}, true);
        b.mlp_w1 = init_weight({d, cfg_.mlp_dim}, rng, zero_init);
        b.mlp_b1 = Tensor::zeros({cfg_.mlp_dim}, true);
        b.mlp_w2 = init_weight({cfg_.mlp_dim, d}, rng, zero_init);
        b.mlp_b2 = Tensor::zeros({d}, true);
        b.ln1_g = Tensor::full({d}, 1.0f, true);
        b.ln1_b = Tensor::zeros({d}, true);
        b.ln2_g = Tensor::full({d}, 1.0f, true);
        b.ln2_b = Tensor::zeros({d}, true);
    }
    final_ln_g = Tensor::full({d}, 1.0f, true);
    final_ln_b = Tensor::zeros({d}, true);
}

Tensor Encoder::attention(Tape* tape, const Tensor& h, const Block& blk) const {
    const int d = cfg_.hidden;
    const int heads = cfg_.heads;
    const int dh = cfg_.head_dim();
    if (h.ndim() != 2 || h.dim(1) != d)
        throw std::invalid_argument("attention expects [N x " +
                                    std::to_string(d) + "], got " +
                                    h.shape_str());
    const float inv_scale =
        1.0f / std::sqrt(static_cast<float>(
                  cfg_.attention_scale == AttentionScale::kPerHead ? dh : d));

    Tensor q = lora_forward(tape, h, blk.wq, blk.bq, blk.q_lora_b, blk.q_lora_a);
    Tensor k = ops::add_row_bias(tape, ops::matmul(tape, h, blk.wk), blk.bk);
    Tensor v = lora_forward(tape, h, blk.wv, blk.bv, blk.v_lora_b, blk.v_lora_a);

    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int i = 0; i < heads; ++i) {
        Tensor qi = ops::slice_cols(tape, q, i * dh, dh);
        Tensor ki = ops::slice_cols(tape, k, i * dh, dh);
        Tensor vi = ops::slice_cols(tape, v, i * dh, dh);
        Tensor scores = ops::scale(tape, ops::matmul_nt(tape, qi, ki), inv_scale);
        Tensor attn = ops::softmax(tape, scores, -1);
        head_outs.push_back(ops::matmul(tape, attn, vi));
    }
    Tensor cat = heads == 1 ? head_outs[0] : ops::concat_cols(tape, head_outs);
    return ops::add_row_bias(tape, ops::matmul(tape, cat, blk.wo), blk.bo);
}

Tensor Encoder::block_forward(Tape* tape, const Tensor& z,
                              const Block& blk) const {
    Tensor h = ops::layer_norm(tape, z, blk.ln1_g, blk.ln1_b, kLayerNormEps);
    Tensor attn_out = attention(tape, h, blk);
    Tensor z1 = ops::add(tape, attn_out, z);

    Tensor h2 = ops::layer_norm(tape, z1, blk.ln2_g, blk.ln2_b, kLayerNormEps);
    Tensor m = ops::add_row_bias(tape, ops::matmul(tape, h2, blk.mlp_w1),
                                 blk.mlp_b1);
    m = ops::gelu(tape, m);
    m = ops::add_row_bias(tape, ops::matmul(tape, m, blk.mlp_w2), blk.mlp_b2);
    return ops::add(tape, m, z1);
}

Tensor Encoder::forward(Tape* tape, const Tensor& image) const {
    if (image.ndim() != 3 || image.dim(0) != cfg_.in_channels ||
        image.dim(1) != cfg_.image_size || image.dim(2) != cfg_.image_size)
        throw std::invalid_argument(
            "encoder expects [" + std::to_string(cfg_.in_channels) + " x " +
            std::to_string(cfg_.image_size) + " x " +
            std::to_string(cfg_.image_size) + "], got " + image.shape_str());
    Tensor patches = ops::extract_patches(tape, image, cfg_.patch);
    if (patches.dim(0) != pos.dim(0))
        throw std::invalid_argument(
            "positional embedding rows " + pos.shape_str() +
            " do not match token count " + std::to_string(patches.dim(0)));
    Tensor z = ops::matmul_nt(tape, patches, patch_w);
    z = ops::add_row_bias(tape, z, patch_b);
    z = ops::add(tape, z, pos);
    for (const Block& b : blocks_) z = block_forward(tape, z, b);
    return ops::layer_norm(tape, z, final_ln_g, final_ln_b, kLayerNormEps);
}

void Encoder::set_trainable(bool trainable) {
    std::vector<std::pair<std::string, Tensor>> params;
    collect_params(params);
    for (auto& [name, t] : params) {
        if (name.find("lora") != std::string::npos) continue;
        Tensor tt = t;
        tt.set_requires_grad(trainable);
    }
}

void Encoder::collect_params(
    std::vector<std::pair<std::string, Tensor>>& out) const {
    out.emplace_back("encoder.patch_embed.w", patch_w);
    out.emplace_back("encoder.patch_embed.b", patch_b);
    out.emplace_back("encoder.pos_embed", pos);
    for (size_t i = 0; i < blocks_.size(); ++i) {
        const Block& b = blocks_[i];
        const std::string p = "encoder.block" + std::to_string(i) + ".";
        out.emplace_back(p + "attn.q.w", b.wq);
        out.emplace_back(p + "attn.q.b", b.bq);
        out.emplace_back(p + "attn.k.w", b.wk);
        out.emplace_back(p + "attn.k.b", b.bk);
        out.emplace_back(p + "attn.v.w", b.wv);
        out.emplace_back(p + "attn.v.b", b.bv);
        out.emplace_back(p + "attn.out.w", b.wo);
        out.emplace_back(p + "attn.out.b", b.bo);
        out.emplace_back(p + "mlp.fc1.w", b.mlp_w1);
        out.emplace_back(p + "mlp.fc1.b", b.mlp_b1);
        out.emplace_back(p + "mlp.fc2.w", b.mlp_w2);
        out.emplace_back(p + "mlp.fc2.b", b.mlp_b2);
        out.emplace_back(p + "ln1.g", b.ln1_g);
        out.emplace_back(p + "ln1.b", b.ln1_b);
        out.emplace_back(p + "ln2.g", b.ln2_g);
        out.emplace_back(p + "ln2.b", b.ln2_b);
        if (b.q_lora_b.defined()) {
            out.emplace_back(p + "attn.q.lora_b", b.q_lora_b);
            out.emplace_back(p + "attn.q.lora_a", b.q_lora_a);
        }
        if (b.v_lora_b.defined()) {
            out.emplace_back(p + "attn.v.lora_b", b.v_lora_b);
            out.emplace_back(p + "attn.v.lora_a", b.v_lora_a);
        }
    }
    out.emplace_back("encoder.final_ln.g", final_ln_g);
    out.emplace_back("encoder.final_ln.b", final_ln_b);
}

int64_t encoder_param_count(const ViTConfig& cfg) {
    const int64_t d = cfg.hidden;
    const int64_t patch_embed = d * cfg.patch * cfg.patch * cfg.in_channels + d;
    const int64_t pos = static_cast<int64_t>(cfg.tokens()) * d;
    const int64_t attn = 4 * d * d + 4 * d;
    const int64_t mlp = 2 * d * cfg.mlp_dim + cfg.mlp_dim + d;
    const int64_t norms = 4 * d;
    return patch_embed + pos + cfg.layers * (attn + mlp + norms) + 2 * d;
}

}  // namespace loraseg
