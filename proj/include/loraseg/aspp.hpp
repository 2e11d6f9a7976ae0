#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "loraseg/rng.hpp"
#include "loraseg/tensor.hpp"

namespace loraseg {

struct HeadConfig {
    int in_dim = 0;       // encoder hidden dim D
    int width = 224;      // branch channels
    std::array<int, 3> atrous_rates = {12, 24, 36};
    int out_classes = 1;  // binary task
    int out_h = 224, out_w = 224;

    void validate() const;
};

// Five-branch ASPP over the token grid: 1x1 conv, three dilated 3x3 convs
// (padding = dilation, so g x g is preserved), and a global-pool branch
// (adaptive average pool -> 1x1 conv -> bilinear back to g x g). Branches are
// concatenated, fused 1x1 to `width`, refined 3x3, projected 1x1 to one
// channel, and bilinearly upsampled to the image size. Emits logits; the
// sigmoid lives in predict_mask. ReLU follows every conv except the logit
// projection.
class AsppHead {
  public:
    AsppHead() = default;
    AsppHead(const HeadConfig& cfg, Rng& rng, bool zero_init = false);

    // grid [D x g x g] -> logits [1 x out_h x out_w]
    Tensor forward(Tape* tape, const Tensor& grid) const;
    // The five branch outputs before concatenation, each [width x g x g].
    std::array<Tensor, 5> branches(Tape* tape, const Tensor& grid) const;

    const HeadConfig& config() const { return cfg_; }
    void set_trainable(bool trainable);
    void collect_params(std::vector<std::pair<std::string, Tensor>>& out) const;

    Tensor b0_w, b0_b;        // 1x1, D -> width
    Tensor a1_w, a1_b;        // 3x3 dilated, D -> width
    Tensor a2_w, a2_b;
    Tensor a3_w, a3_b;
    Tensor pool_w, pool_b;    // 1x1 on pooled features, D -> width
    Tensor fuse_w, fuse_b;    // 1x1, 5*width -> width
    Tensor refine_w, refine_b;  // 3x3, width -> width
    Tensor out_w, out_b;      // 1x1, width -> out_classes

  private:
    HeadConfig cfg_;
};

// mask[i] = sigmoid(logit[i]) >= threshold, threshold in (0, 1).
std::vector<uint8_t> predict_mask(const Tensor& logits, float threshold = 0.5f);

// Closed-form head parameter count (biases included).
int64_t head_param_count(int in_dim, int width);

}  // namespace loraseg
