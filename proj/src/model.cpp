#include "loraseg/model.hpp"

#include <cstring>
#include <iostream>
#include <stdexcept>

#include "loraseg/archive.hpp"
#include "loraseg/ops.hpp"

namespace loraseg {

namespace {

constexpr uint64_t kEncoderStream = 1;
constexpr uint64_t kHeadStream = 2;

std::string module_of(const std::string& name) {
    if (name.find(".lora_") != std::string::npos) return "adapters";
    if (name.rfind("head.", 0) == 0) return "head";
    return "encoder";
}

// Raw little-endian u64 stored in the payload of a dims=[2] f32 entry.
ArchiveEntry digest_entry(uint64_t digest) {
    ArchiveEntry e;
    e.name = "meta.config_digest";
    e.dims = {2};
    e.data.resize(2);
    std::memcpy(e.data.data(), &digest, sizeof(digest));
    return e;
}

uint64_t digest_from_entry(const ArchiveEntry& e) {
    if (e.data.size() != 2)
        throw std::runtime_error("meta.config_digest entry has bad size");
    uint64_t d = 0;
    std::memcpy(&d, e.data.data(), sizeof(d));
    return d;
}

}  // namespace

SegModel::SegModel(const ViTConfig& vit, const HeadConfig& head, uint64_t seed,
                   bool zero_init)
    : vit_cfg_(vit), head_cfg_(head), seed_(seed) {
    vit_cfg_.validate();
    head_cfg_.in_dim = vit_cfg_.hidden;
    head_cfg_.out_h = vit_cfg_.image_size;
    head_cfg_.out_w = vit_cfg_.image_size;
    head_cfg_.validate();
    Rng enc_rng(Rng::derive(seed, kEncoderStream));
    encoder_ = Encoder(vit_cfg_, enc_rng, zero_init);
    Rng head_rng(Rng::derive(seed, kHeadStream));
    head_ = AsppHead(head_cfg_, head_rng, zero_init);
}

Tensor SegModel::forward(Tape* tape, const Tensor& image) const {
    Tensor tokens = encoder_.forward(tape, image);
    Tensor grid = ops::tokens_to_grid(tape, tokens);
    return head_.forward(tape, grid);
}

Tensor SegModel::forward_inference(const Tensor& image) const {
    return forward(nullptr, image);
}

std::vector<NamedTensor> SegModel::registry() const {
    std::vector<std::pair<std::string, Tensor>> pairs;
    encoder_.collect_params(pairs);
    head_.collect_params(pairs);
    std::vector<NamedTensor> out;
    out.reserve(pairs.size());
    for (auto& [name, t] : pairs) out.push_back({name, t});
    return out;
}

std::vector<NamedTensor> SegModel::trainable_params() const {
    std::vector<NamedTensor> out;
    for (NamedTensor& nt : registry())
        if (nt.tensor.requires_grad()) out.push_back(std::move(nt));
    return out;
}

ParamCounts SegModel::count_params() const {
    ParamCounts c;
    for (const NamedTensor& nt : registry()) {
        const int64_t n = nt.tensor.numel();
        c.total += n;
        if (nt.tensor.requires_grad())
            c.trainable += n;
        else
            c.frozen += n;
        c.by_module[module_of(nt.name)] += n;
    }
    return c;
}

void SegModel::freeze_encoder() { encoder_.set_trainable(false); }

uint64_t SegModel::config_digest() const {
    return base_config_digest(vit_cfg_, head_cfg_);
}

void SegModel::set_norm_stats(const std::array<float, 3>& mean,
                              const std::array<float, 3>& stdev) {
    norm_mean_ = mean;
    norm_std_ = stdev;
}

void SegModel::save_archive(const std::string& path) const {
    std::vector<ArchiveEntry> entries;
    entries.push_back(digest_entry(config_digest()));
    for (const NamedTensor& nt : registry()) {
        ArchiveEntry e;
        e.name = nt.name;
        e.dims = nt.tensor.shape();
        e.data.assign(nt.tensor.data(), nt.tensor.data() + nt.tensor.numel());
        entries.push_back(std::move(e));
    }
    ArchiveEntry mean;
    mean.name = "data.norm_mean";
    mean.dims = {3};
    mean.data.assign(norm_mean_.begin(), norm_mean_.end());
    entries.push_back(std::move(mean));
    ArchiveEntry stdev;
    stdev.name = "data.norm_std";
    stdev.dims = {3};
    stdev.data.assign(norm_std_.begin(), norm_std_.end());
    entries.push_back(std::move(stdev));
    write_archive(path, entries);
}

void SegModel::load_archive(const std::string& path) {
    const std::vector<ArchiveEntry> entries = read_archive(path);

    if (const ArchiveEntry* d = find_entry(entries, "meta.config_digest")) {
        const uint64_t got = digest_from_entry(*d);
        if (got != config_digest())
            throw std::runtime_error(
                "config digest mismatch: archive '" + path +
                "' was written for a different base configuration");
    }

    std::vector<NamedTensor> reg = registry();
    std::vector<bool> seen(reg.size(), false);
    for (const ArchiveEntry& e : entries) {
        if (e.name == "meta.config_digest") continue;
        if (e.name == "data.norm_mean" || e.name == "data.norm_std") {
            if (e.data.size() != 3)
                throw std::runtime_error("entry '" + e.name + "' must hold 3 values");
            auto& dst = e.name == "data.norm_mean" ? norm_mean_ : norm_std_;
            std::copy(e.data.begin(), e.data.end(), dst.begin());
            continue;
        }
        if (e.name == "encoder.cls_token") {
            std::cerr << "notice: archive '" << path
                      << "' carries a class token; dropped (this model has "
                         "no class token)\n";
            continue;
        }
        bool matched = false;
        for (size_t i = 0; i < reg.size(); ++i) {
            if (reg[i].name != e.name) continue;
            matched = true;
            seen[i] = true;
            Tensor& t = reg[i].tensor;
            if (e.name == "encoder.pos_embed" &&
                static_cast<int64_t>(e.data.size()) ==
                    t.numel() + vit_cfg_.hidden &&
                e.dims.size() == 2 && e.dims[0] == vit_cfg_.tokens() + 1) {
                std::cerr << "notice: archive '" << path << "' has "
                          << e.dims[0]
                          << " positional rows; dropping the class-token row\n";
                std::memcpy(t.data(), e.data.data() + vit_cfg_.hidden,
                            sizeof(float) * static_cast<size_t>(t.numel()));
            } else if (e.dims == t.shape()) {
                std::memcpy(t.data(), e.data.data(),
                            sizeof(float) * static_cast<size_t>(t.numel()));
            } else {
                throw std::runtime_error(
                    "shape mismatch for tensor '" + e.name + "': archive has " +
                    shape_to_string(e.dims) + ", model expects " +
                    t.shape_str());
            }
            break;
        }
        if (!matched)
            throw std::runtime_error("archive '" + path +
                                     "' has unexpected tensor '" + e.name + "'");
    }
    for (size_t i = 0; i < reg.size(); ++i)
        if (!seen[i])
            throw std::runtime_error("archive '" + path +
                                     "' is missing tensor '" + reg[i].name + "'");
    // Loaded weights arrive frozen; training paths re-enable what they own.
    encoder_.set_trainable(false);
}

void SegModel::save_checkpoint(const std::string& path) const {
    if (lora_injected())
        export_adapter(*this, path);
    else
        save_archive(path);
}

std::vector<std::pair<std::string, std::vector<int>>> registry_spec(
    const ViTConfig& vit, const HeadConfig& head, const LoRAConfig* lora) {
    ViTConfig vc = vit;
    vc.validate();
    HeadConfig hc = head;
    hc.in_dim = vc.hidden;
    const int d = vc.hidden;
    std::vector<std::pair<std::string, std::vector<int>>> out;
    out.push_back({"encoder.patch_embed.w",
                   {d, vc.patch * vc.patch * vc.in_channels}});
    out.push_back({"encoder.patch_embed.b", {d}});
    out.push_back({"encoder.pos_embed", {vc.tokens(), d}});
    for (int i = 0; i < vc.layers; ++i) {
        const std::string p = "encoder.block" + std::to_string(i) + ".";
        out.push_back({p + "attn.q.w", {d, d}});
        out.push_back({p + "attn.q.b", {d}});
        out.push_back({p + "attn.k.w", {d, d}});
        out.push_back({p + "attn.k.b", {d}});
        out.push_back({p + "attn.v.w", {d, d}});
        out.push_back({p + "attn.v.b", {d}});
        out.push_back({p + "attn.out.w", {d, d}});
        out.push_back({p + "attn.out.b", {d}});
        out.push_back({p + "mlp.fc1.w", {d, vc.mlp_dim}});
        out.push_back({p + "mlp.fc1.b", {vc.mlp_dim}});
        out.push_back({p + "mlp.fc2.w", {vc.mlp_dim, d}});
        out.push_back({p + "mlp.fc2.b", {d}});
        out.push_back({p + "ln1.g", {d}});
        out.push_back({p + "ln1.b", {d}});
        out.push_back({p + "ln2.g", {d}});
        out.push_back({p + "ln2.b", {d}});
        if (lora) {
            if (lora->target_query) {
                out.push_back({p + "attn.q.lora_b", {d, lora->rank}});
                out.push_back({p + "attn.q.lora_a", {lora->rank, d}});
            }
            if (lora->target_value) {
                out.push_back({p + "attn.v.lora_b", {d, lora->rank}});
                out.push_back({p + "attn.v.lora_a", {lora->rank, d}});
            }
        }
    }
    out.push_back({"encoder.final_ln.g", {d}});
    out.push_back({"encoder.final_ln.b", {d}});

    const int w = hc.width;
    out.push_back({"head.branch0.w", {w, d, 1, 1}});
    out.push_back({"head.branch0.b", {w}});
    for (int i = 1; i <= 3; ++i) {
        out.push_back({"head.branch" + std::to_string(i) + ".w", {w, d, 3, 3}});
        out.push_back({"head.branch" + std::to_string(i) + ".b", {w}});
    }
    out.push_back({"head.pool.w", {w, d, 1, 1}});
    out.push_back({"head.pool.b", {w}});
    out.push_back({"head.fuse.w", {w, 5 * w, 1, 1}});
    out.push_back({"head.fuse.b", {w}});
    out.push_back({"head.refine.w", {w, w, 3, 3}});
    out.push_back({"head.refine.b", {w}});
    out.push_back({"head.out.w", {hc.out_classes, w, 1, 1}});
    out.push_back({"head.out.b", {hc.out_classes}});
    return out;
}

ParamCounts count_params_for(const ViTConfig& vit, const HeadConfig& head,
                             const LoRAConfig* lora) {
    ParamCounts c;
    for (const auto& [name, dims] : registry_spec(vit, head, lora)) {
        const int64_t n = shape_numel(dims);
        c.total += n;
        const std::string mod = module_of(name);
        c.by_module[mod] += n;
        const bool trainable = lora ? mod != "encoder" : true;
        if (trainable)
            c.trainable += n;
        else
            c.frozen += n;
    }
    return c;
}

}  // namespace loraseg
