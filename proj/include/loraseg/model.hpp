#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "loraseg/aspp.hpp"
#include "loraseg/lora.hpp"
#include "loraseg/tensor.hpp"
#include "loraseg/vit.hpp"

namespace loraseg {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct ParamCounts {
    int64_t total = 0;
    int64_t trainable = 0;
    int64_t frozen = 0;
    std::map<std::string, int64_t> by_module;  // encoder / adapters / head
};

// Encoder + optional LoRA adapters + ASPP head with a partitioned parameter
// registry. Seed streams are derived independently per component, so a
// head-only model and a LoRA model share identical encoder/head
// initialization under the same seed.
class SegModel {
  public:
    SegModel(const ViTConfig& vit, const HeadConfig& head, uint64_t seed,
             bool zero_init = false);

    // image [C x H x W] -> logits [1 x H x W]
    Tensor forward(Tape* tape, const Tensor& image) const;
    Tensor forward_inference(const Tensor& image) const;

    Tape& tape() { return tape_; }

    const ViTConfig& vit_config() const { return vit_cfg_; }
    const HeadConfig& head_config() const { return head_cfg_; }
    Encoder& encoder() { return encoder_; }
    const Encoder& encoder() const { return encoder_; }
    AsppHead& head() { return head_; }
    const AsppHead& head() const { return head_; }

    std::vector<NamedTensor> registry() const;
    std::vector<NamedTensor> trainable_params() const;
    ParamCounts count_params() const;

    void freeze_encoder();
    bool lora_injected() const { return lora_cfg_.has_value(); }
    const LoRAConfig* lora_config() const {
        return lora_cfg_ ? &*lora_cfg_ : nullptr;
    }
    uint64_t config_digest() const;
    uint64_t seed() const { return seed_; }

    // Per-channel normalization statistics the model was trained with;
    // serialized into every checkpoint so predict/eval reuse them.
    void set_norm_stats(const std::array<float, 3>& mean,
                        const std::array<float, 3>& stdev);
    const std::array<float, 3>& norm_mean() const { return norm_mean_; }
    const std::array<float, 3>& norm_std() const { return norm_std_; }

    // Full LVWT checkpoint: every registry tensor + digest + norm stats.
    void save_archive(const std::string& path) const;
    // Populates weights from an archive and freezes them. An archive with a
    // class token row (pos_embed with N+1 rows and/or a cls_token entry)
    // has the extra row dropped with a notice on stderr.
    void load_archive(const std::string& path);

    // Adapter-or-full checkpoint depending on injection state.
    void save_checkpoint(const std::string& path) const;

  private:
    friend void inject_lora(SegModel&, const LoRAConfig&);
    friend void merge_lora(SegModel&);
    friend void import_adapter(SegModel&, const std::string&);

    ViTConfig vit_cfg_;
    HeadConfig head_cfg_;
    std::optional<LoRAConfig> lora_cfg_;
    Encoder encoder_;
    AsppHead head_;
    mutable Tape tape_;
    uint64_t seed_ = 0;
    std::array<float, 3> norm_mean_{0.0f, 0.0f, 0.0f};
    std::array<float, 3> norm_std_{1.0f, 1.0f, 1.0f};
};

// Registry shapes for a configuration without allocating the tensors;
// count-only paths for the large presets use this.
std::vector<std::pair<std::string, std::vector<int>>> registry_spec(
    const ViTConfig& vit, const HeadConfig& head, const LoRAConfig* lora);

ParamCounts count_params_for(const ViTConfig& vit, const HeadConfig& head,
                             const LoRAConfig* lora);

}  // namespace loraseg
