#pragma once

#include <cstdint>
#include <string>

#include "loraseg/tensor.hpp"

namespace loraseg {

class SegModel;
struct ViTConfig;
struct HeadConfig;

// Rank-decomposition adapter settings. A is drawn from N(0, init_std^2) and
// B starts at zero, so an injected model computes exactly what the base
// model computed until the first update.
struct LoRAConfig {
    int rank = 4;
    bool target_query = true;
    bool target_value = true;
    float init_std = 0.02f;

    void validate(int projection_dim) const;
    uint32_t targets_mask() const {
        return (target_query ? 1u : 0u) | (target_value ? 2u : 0u);
    }
};

// Two-path adapted projection: x*W + bias + (x*B)*A. The product B*A is
// never materialized here; that happens only in merge.
Tensor lora_forward(Tape* tape, const Tensor& x, const Tensor& w,
                    const Tensor& bias, const Tensor& lora_b,
                    const Tensor& lora_a);

// Wraps every block's Q/V projection with a trainable adapter pair, freezes
// all encoder base weights, and leaves the head trainable. Errors on double
// injection or a rank above min(C_in, C_out).
void inject_lora(SegModel& model, const LoRAConfig& cfg);

// Folds W + B*A into every adapted projection and removes the adapters;
// the model becomes a plain (still frozen) encoder.
void merge_lora(SegModel& model);

// Adapter checkpoint: LVWT archive holding a lora.meta entry (rank, targets,
// base-config digest, init_std as raw bytes), the A/B pairs, the head
// weights, and the normalization stats.
void export_adapter(const SegModel& model, const std::string& path);
void import_adapter(SegModel& model, const std::string& path);

// FNV-1a 64 over the canonical base-config serialization (ViT + head
// geometry; LoRA settings excluded).
uint64_t base_config_digest(const ViTConfig& vit, const HeadConfig& head);

// Closed-form adapter parameter count: 2 * layers * |targets| * hidden * r.
int64_t adapter_param_count(const ViTConfig& vit, const LoRAConfig& cfg);

}  // namespace loraseg
