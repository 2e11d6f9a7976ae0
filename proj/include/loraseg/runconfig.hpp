#pragma once

#include <array>
#include <string>

#include "loraseg/aspp.hpp"
#include "loraseg/lora.hpp"
#include "loraseg/train.hpp"
#include "loraseg/vit.hpp"

namespace loraseg {

// Line-oriented `key = value` run configuration with dotted keys. Unknown
// keys are rejected. `resolved_text()` echoes every effective key so a run
// directory records the exact configuration it ran with.
struct RunConfig {
    std::string backbone = "tiny";  // tiny|B_16|B_32|L_16|L_32|custom
    ViTConfig vit = ViTConfig::preset("tiny");
    bool lora_enabled = false;
    LoRAConfig lora;
    int head_width = 224;
    std::array<int, 3> head_rates = {12, 24, 36};
    std::string data_dir;
    std::array<int, 3> bands = {0, 1, 2};
    TrainConfig train;
    uint64_t seed = 0;
    std::string out_dir;

    static RunConfig parse_file(const std::string& path);
    static RunConfig parse_text(const std::string& text);
    std::string resolved_text() const;

    HeadConfig head_config() const;
};

}  // namespace loraseg
