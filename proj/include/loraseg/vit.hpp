#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "loraseg/rng.hpp"
#include "loraseg/tensor.hpp"

namespace loraseg {

enum class AttentionScale { kPerHead, kGlobalD };

struct ViTConfig {
    int patch = 16;
    int layers = 12;
    int hidden = 768;
    int mlp_dim = 3072;
    int heads = 12;
    int in_channels = 3;
    int image_size = 224;
    AttentionScale attention_scale = AttentionScale::kPerHead;

    // B_16, B_32, L_16, L_32 (Table-1 geometry) or tiny.
    static ViTConfig preset(std::string_view name);

    int grid() const { return image_size / patch; }
    int tokens() const { return grid() * grid(); }
    int head_dim() const { return hidden / heads; }
    void validate() const;
};

// ViT backbone over patch tokens; no class token, pre-norm residual blocks,
// final layer norm. Weight tensors are public: the LoRA module and the
// archive loader manipulate them directly.
class Encoder {
  public:
    struct Block {
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
        Tensor ln1_g, ln1_b, ln2_g, ln2_b;
        // Rank-decomposition adapters on Q and V; undefined until injected.
        Tensor q_lora_b, q_lora_a, v_lora_b, v_lora_a;
    };

    Encoder() = default;
    Encoder(const ViTConfig& cfg, Rng& rng, bool zero_init = false);

    // image [C x H x W] -> contextualized tokens [N x D]
    Tensor forward(Tape* tape, const Tensor& image) const;
    // z [N x D] -> [N x D], one pre-norm transformer block
    Tensor block_forward(Tape* tape, const Tensor& z, const Block& blk) const;
    // Multi-headed self-attention on an already-normalized token sequence:
    // per-head scaled dot-product attention, heads concatenated, projected.
    Tensor attention(Tape* tape, const Tensor& h, const Block& blk) const;

    const ViTConfig& config() const { return cfg_; }
    std::vector<Block>& blocks() { return blocks_; }
    const std::vector<Block>& blocks() const { return blocks_; }

    void set_trainable(bool trainable);

    // name -> tensor pairs in a fixed order (adapters included when present)
    void collect_params(std::vector<std::pair<std::string, Tensor>>& out) const;

    Tensor patch_w;  // E, [D x P*P*C]
    Tensor patch_b;  // [D]
    Tensor pos;      // E_pos, [N x D]
    Tensor final_ln_g, final_ln_b;

  private:
    ViTConfig cfg_;
    std::vector<Block> blocks_;
};

// Closed-form encoder parameter count for a config (biases included).
int64_t encoder_param_count(const ViTConfig& cfg);

constexpr float kLayerNormEps = 1e-6f;

}  // namespace loraseg
