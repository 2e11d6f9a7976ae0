#include "loraseg/lora.hpp"

#include <cstring>
#include <sstream>
#include <stdexcept>

#include "loraseg/archive.hpp"
#include "loraseg/kernels.hpp"
#include "loraseg/model.hpp"
#include "loraseg/ops.hpp"

namespace loraseg {

namespace {

constexpr uint64_t kAdapterStream = 3;

uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace

void LoRAConfig::validate(int projection_dim) const {
    if (!target_query && !target_value)
        throw std::invalid_argument("LoRA targets must be non-empty");
    if (rank < 1 || rank > projection_dim)
        throw std::invalid_argument(
            "LoRA rank " + std::to_string(rank) + " outside [1, " +
            std::to_string(projection_dim) + "] for the targeted projections");
    if (init_std <= 0.0f)
        throw std::invalid_argument("LoRA init_std must be positive");
}

Tensor lora_forward(Tape* tape, const Tensor& x, const Tensor& w,
                    const Tensor& bias, const Tensor& lora_b,
                    const Tensor& lora_a) {
    Tensor base = ops::matmul(tape, x, w);
    if (bias.defined()) base = ops::add_row_bias(tape, base, bias);
    if (!lora_b.defined()) return base;
    Tensor delta = ops::matmul(tape, ops::matmul(tape, x, lora_b), lora_a);
    return ops::add(tape, base, delta);
}

uint64_t base_config_digest(const ViTConfig& vit, const HeadConfig& head) {
    std::ostringstream os;
    os << "vit:patch=" << vit.patch << ",layers=" << vit.layers
       << ",hidden=" << vit.hidden << ",mlp=" << vit.mlp_dim
       << ",heads=" << vit.heads << ",in=" << vit.in_channels
       << ",img=" << vit.image_size << ",scale="
       << (vit.attention_scale == AttentionScale::kPerHead ? "per_head"
                                                           : "global_D")
       << "|head:width=" << head.width << ",rates=" << head.atrous_rates[0]
       << "/" << head.atrous_rates[1] << "/" << head.atrous_rates[2]
       << ",classes=" << head.out_classes;
    return fnv1a64(os.str());
}

int64_t adapter_param_count(const ViTConfig& vit, const LoRAConfig& cfg) {
    const int targets = (cfg.target_query ? 1 : 0) + (cfg.target_value ? 1 : 0);
    return 2ll * vit.layers * targets * vit.hidden * cfg.rank;
}

void inject_lora(SegModel& model, const LoRAConfig& cfg) {
    if (model.lora_injected())
        throw std::runtime_error("model already has LoRA adapters injected");
    const int d = model.vit_config().hidden;
    cfg.validate(d);

    Rng rng(Rng::derive(model.seed(), kAdapterStream));
    auto make_pair = [&](Tensor& b, Tensor& a) {
        b = Tensor::zeros({d, cfg.rank}, true);
        a = Tensor::zeros({cfg.rank, d}, true);
        float* ad = a.data();
        for (int64_t i = 0; i < a.numel(); ++i)
            ad[i] = static_cast<float>(rng.normal(0.0, cfg.init_std));
    };
    for (Encoder::Block& blk : model.encoder_.blocks()) {
        if (cfg.target_query) make_pair(blk.q_lora_b, blk.q_lora_a);
        if (cfg.target_value) make_pair(blk.v_lora_b, blk.v_lora_a);
    }
    model.encoder_.set_trainable(false);
    model.head_.set_trainable(true);
    model.lora_cfg_ = cfg;
}

void merge_lora(SegModel& model) {
    if (!model.lora_injected())
        throw std::runtime_error("merge requires an injected model");
    const int d = model.vit_config().hidden;
    const int r = model.lora_cfg_->rank;
    std::vector<float> delta(static_cast<size_t>(d) * d);
    auto fold = [&](Tensor& w, Tensor& b, Tensor& a) {
        if (!b.defined()) return;
        kernels::active().matmul_nn(d, d, r, b.data(), r, a.data(), d,
                                    delta.data(), d, false);
        kernels::active().add(w.data(), w.data(), delta.data(),
                              static_cast<int64_t>(d) * d);
        b = Tensor();
        a = Tensor();
    };
    for (Encoder::Block& blk : model.encoder_.blocks()) {
        fold(blk.wq, blk.q_lora_b, blk.q_lora_a);
        fold(blk.wv, blk.v_lora_b, blk.v_lora_a);
    }
    model.lora_cfg_.reset();
}

namespace {

constexpr const char* kMetaName = "lora.meta";

// lora.meta payload, 5 f32 slots of raw bytes:
//   [0] rank u32, [1] targets mask u32, [2..3] base-config digest u64,
//   [4] init_std f32
ArchiveEntry meta_entry(const LoRAConfig& cfg, uint64_t digest) {
    ArchiveEntry e;
    e.name = kMetaName;
    e.dims = {5};
    e.data.resize(5);
    const uint32_t rank = static_cast<uint32_t>(cfg.rank);
    const uint32_t targets = cfg.targets_mask();
    std::memcpy(&e.data[0], &rank, 4);
    std::memcpy(&e.data[1], &targets, 4);
    std::memcpy(&e.data[2], &digest, 8);
    e.data[4] = cfg.init_std;
    return e;
}

void parse_meta(const ArchiveEntry& e, LoRAConfig& cfg, uint64_t& digest) {
    if (e.data.size() != 5)
        throw std::runtime_error("adapter file has malformed lora.meta entry");
    uint32_t rank = 0, targets = 0;
    std::memcpy(&rank, &e.data[0], 4);
    std::memcpy(&targets, &e.data[1], 4);
    std::memcpy(&digest, &e.data[2], 8);
    cfg.rank = static_cast<int>(rank);
    cfg.target_query = (targets & 1u) != 0;
    cfg.target_value = (targets & 2u) != 0;
    cfg.init_std = e.data[4];
}

bool is_adapter_or_head(const std::string& name) {
    return name.find(".lora_") != std::string::npos ||
           name.rfind("head.", 0) == 0;
}

}  // namespace

void export_adapter(const SegModel& model, const std::string& path) {
    if (!model.lora_injected())
        throw std::runtime_error("export_adapter requires an injected model");
    std::vector<ArchiveEntry> entries;
    entries.push_back(meta_entry(*model.lora_config(), model.config_digest()));
    for (const NamedTensor& nt : model.registry()) {
        if (!is_adapter_or_head(nt.name)) continue;
        ArchiveEntry e;
        e.name = nt.name;
        e.dims = nt.tensor.shape();
        e.data.assign(nt.tensor.data(), nt.tensor.data() + nt.tensor.numel());
        entries.push_back(std::move(e));
    }
    ArchiveEntry mean;
    mean.name = "data.norm_mean";
    mean.dims = {3};
    mean.data.assign(model.norm_mean().begin(), model.norm_mean().end());
    entries.push_back(std::move(mean));
    ArchiveEntry stdev;
    stdev.name = "data.norm_std";
    stdev.dims = {3};
    stdev.data.assign(model.norm_std().begin(), model.norm_std().end());
    entries.push_back(std::move(stdev));
    write_archive(path, entries);
}

void import_adapter(SegModel& model, const std::string& path) {
    const std::vector<ArchiveEntry> entries = read_archive(path);
    const ArchiveEntry* meta = find_entry(entries, kMetaName);
    if (!meta)
        throw std::runtime_error("adapter file '" + path +
                                 "' has no lora.meta entry");
    LoRAConfig cfg;
    uint64_t digest = 0;
    parse_meta(*meta, cfg, digest);
    if (digest != model.config_digest())
        throw std::runtime_error(
            "config digest mismatch: adapter file '" + path +
            "' targets a different base configuration");
    if (model.lora_injected()) {
        const LoRAConfig& cur = *model.lora_config();
        if (cur.rank != cfg.rank || cur.targets_mask() != cfg.targets_mask())
            throw std::runtime_error(
                "adapter file '" + path +
                "' does not match the injected LoRA configuration (rank " +
                std::to_string(cfg.rank) + " vs " + std::to_string(cur.rank) +
                ")");
    } else {
        inject_lora(model, cfg);
    }

    std::vector<NamedTensor> expected;
    for (NamedTensor& nt : model.registry())
        if (is_adapter_or_head(nt.name)) expected.push_back(std::move(nt));

    std::vector<bool> seen(expected.size(), false);
    for (const ArchiveEntry& e : entries) {
        if (e.name == kMetaName) continue;
        if (e.name == "data.norm_mean" || e.name == "data.norm_std") {
            if (e.data.size() != 3)
                throw std::runtime_error("entry '" + e.name +
                                         "' must hold 3 values");
            std::array<float, 3> v{};
            std::copy(e.data.begin(), e.data.end(), v.begin());
            if (e.name == "data.norm_mean")
                model.set_norm_stats(v, model.norm_std());
            else
                model.set_norm_stats(model.norm_mean(), v);
            continue;
        }
        bool matched = false;
        for (size_t i = 0; i < expected.size(); ++i) {
            if (expected[i].name != e.name) continue;
            matched = true;
            seen[i] = true;
            Tensor& t = expected[i].tensor;
            if (e.dims != t.shape())
                throw std::runtime_error(
                    "shape mismatch for '" + e.name + "': adapter file has " +
                    shape_to_string(e.dims) + ", model expects " +
                    t.shape_str());
            std::memcpy(t.data(), e.data.data(),
                        sizeof(float) * static_cast<size_t>(t.numel()));
            break;
        }
        if (!matched)
            throw std::runtime_error("adapter file '" + path +
                                     "' has unexpected tensor '" + e.name + "'");
    }
    for (size_t i = 0; i < expected.size(); ++i)
        if (!seen[i])
            throw std::runtime_error("adapter file '" + path +
                                     "' is missing tensor '" +
                                     expected[i].name + "'");
}

}  // namespace loraseg
