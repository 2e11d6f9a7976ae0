// loraseg command-line front end: dataset synthesis, training, evaluation,
// prediction, parameter auditing, and adapter merging.
//
// Exit codes: 0 success, 1 usage/config error, 2 runtime/data error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "loraseg/archive.hpp"
#include "loraseg/data.hpp"
#include "loraseg/model.hpp"
#include "loraseg/runconfig.hpp"
#include "loraseg/train.hpp"

namespace {

using namespace loraseg;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string timestamp_dir() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[64];
    std::strftime(buf, sizeof(buf), "runs/%Y%m%d_%H%M%S", std::localtime(&t));
    return buf;
}

struct Dataset {
    std::vector<SamplePatch> patches;
    SplitIndices splits;
    NormStats stats;
};

// Load -> band-select -> patchify -> split -> normalize with train stats.
Dataset build_dataset(const RunConfig& cfg,
                      const NormStats* fixed_stats = nullptr) {
    if (cfg.data_dir.empty())
        throw ConfigError("config has no data.dir");
    if (!std::filesystem::exists(cfg.data_dir))
        throw std::runtime_error("dataset path '" + cfg.data_dir +
                                 "' does not exist");
    Dataset ds;
    const std::vector<SyntheticPair> pairs = load_dataset_dir(cfg.data_dir);
    for (size_t i = 0; i < pairs.size(); ++i) {
        const Raster sel = select_bands(pairs[i].image, cfg.bands);
        std::vector<SamplePatch> ps =
            patchify(sel, pairs[i].mask, cfg.vit.image_size,
                     static_cast<int>(i));
        for (SamplePatch& p : ps) ds.patches.push_back(std::move(p));
    }
    SplitSpec spec;
    spec.seed = cfg.seed;
    ds.splits = split(static_cast<int>(ds.patches.size()), spec);
    ds.stats = fixed_stats ? *fixed_stats
                           : compute_norm_stats(ds.patches, ds.splits.train);
    for (SamplePatch& p : ds.patches) normalize_patch(p, ds.stats);
    return ds;
}

SegModel build_model(const RunConfig& cfg, bool zero_init = false) {
    return SegModel(cfg.vit, cfg.head_config(), cfg.seed, zero_init);
}

void print_report(const MetricReport& rep) {
    std::printf("IoU %.3f ± %.3f\n", rep.iou.mean, rep.iou.stdev);
    std::printf("F1 %.3f ± %.3f\n", rep.f1.mean, rep.f1.stdev);
    std::printf("Precision %.3f ± %.3f\n", rep.precision.mean,
                rep.precision.stdev);
    std::printf("Recall %.3f ± %.3f\n", rep.recall.mean, rep.recall.stdev);
}

int cmd_train(const std::string& config_path, std::optional<uint64_t> seed,
              std::optional<std::string> out) {
    RunConfig cfg = RunConfig::parse_file(config_path);
    if (seed) {
        cfg.seed = *seed;
        cfg.train.seed = *seed;
    }
    if (out) cfg.out_dir = *out;
    if (cfg.out_dir.empty()) cfg.out_dir = timestamp_dir();
    std::filesystem::create_directories(cfg.out_dir);
    {
        std::ofstream f(cfg.out_dir + "/resolved.cfg", std::ios::trunc);
        f << cfg.resolved_text();
    }

    Dataset ds = build_dataset(cfg);
    SegModel model = build_model(cfg);
    model.set_norm_stats(ds.stats.mean, ds.stats.stdev);
    if (cfg.lora_enabled) {
        // The frozen base next to the adapter checkpoints; frozen-weight
        // invariance keeps it valid for the whole run (merge needs it).
        model.save_archive(cfg.out_dir + "/base.lvwt");
        inject_lora(model, cfg.lora);
    }

    const TrainResult result = train(model, ds.patches, ds.splits, cfg.train,
                                     cfg.out_dir);
    std::printf("trained %d epochs; best val IoU %.6f at epoch %d\n",
                cfg.train.epochs, result.best_val_iou, result.best_epoch);
    const std::vector<int>& test_idx =
        ds.splits.test.empty() ? ds.splits.train : ds.splits.test;
    const MetricReport rep =
        evaluate(model, ds.patches, test_idx, cfg.train.threshold);
    print_report(rep);
    return 0;
}

std::vector<int> pick_split(const Dataset& ds, const std::string& name) {
    if (name == "train") return ds.splits.train;
    if (name == "test") return ds.splits.test;
    if (name == "val") return ds.splits.val;
    throw ConfigError("unknown split '" + name + "' (use train|test|val)");
}

NormStats stats_from_checkpoint(const std::string& path) {
    const std::vector<ArchiveEntry> entries = read_archive(path);
    NormStats st;
    if (const ArchiveEntry* m = find_entry(entries, "data.norm_mean"))
        std::copy(m->data.begin(), m->data.end(), st.mean.begin());
    if (const ArchiveEntry* s = find_entry(entries, "data.norm_std"))
        std::copy(s->data.begin(), s->data.end(), st.stdev.begin());
    return st;
}

// A checkpoint is an adapter file when it has a lora.meta entry.
bool is_adapter_file(const std::string& path) {
    const std::vector<ArchiveEntry> entries = read_archive(path);
    return find_entry(entries, "lora.meta") != nullptr;
}

SegModel load_model_for(const RunConfig& cfg, const std::string& checkpoint) {
    SegModel model = build_model(cfg, true);
    if (is_adapter_file(checkpoint)) {
        // Fresh frozen base + adapters. The base weights are the seeded
        // initialization of cfg.seed, matching what cmd_train started from.
        SegModel seeded = build_model(cfg, false);
        model = std::move(seeded);
        model.freeze_encoder();
        import_adapter(model, checkpoint);
    } else {
        model.load_archive(checkpoint);
    }
    const NormStats st = stats_from_checkpoint(checkpoint);
    model.set_norm_stats(st.mean, st.stdev);
    return model;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& split_name, std::optional<float> threshold) {
    const RunConfig cfg = RunConfig::parse_file(config_path);
    SegModel model = load_model_for(cfg, checkpoint);
    NormStats st;
    st.mean = model.norm_mean();
    st.stdev = model.norm_std();
    const Dataset ds = build_dataset(cfg, &st);
    const float th = threshold.value_or(cfg.train.threshold);
    const MetricReport rep =
        evaluate(model, ds.patches, pick_split(ds, split_name), th);
    print_report(rep);
    return 0;
}

int cmd_predict(const std::string& config_path, const std::string& checkpoint,
                const std::string& input, const std::string& out_path,
                std::optional<float> threshold,
                std::optional<std::array<int, 3>> bands) {
    RunConfig cfg = RunConfig::parse_file(config_path);
    if (bands) cfg.bands = *bands;
    SegModel model = load_model_for(cfg, checkpoint);
    const float th = threshold.value_or(cfg.train.threshold);

    const Raster raster = load_raster(input);
    const Raster sel = select_bands(raster, cfg.bands);
    const int side = cfg.vit.image_size;
    if (sel.height < side || sel.width < side)
        throw std::runtime_error("raster " + std::to_string(sel.height) + "x" +
                                 std::to_string(sel.width) +
                                 " smaller than the model input " +
                                 std::to_string(side));

    Raster mask;
    mask.height = sel.height;
    mask.width = sel.width;
    mask.bands = 1;
    mask.data.assign(static_cast<size_t>(sel.pixel_count()), 0.0f);

    NormStats st;
    st.mean = model.norm_mean();
    st.stdev = model.norm_std();
    for (const auto& [oy, ox] : tile_origins(sel.height, sel.width, side)) {
        SamplePatch p;
        p.image = Tensor::zeros({3, side, side});
        float* dst = p.image.data();
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < side; ++y)
                for (int x = 0; x < side; ++x)
                    dst[(static_cast<int64_t>(c) * side + y) * side + x] =
                        sel.at(oy + y, ox + x, c);
        p.mask.assign(static_cast<size_t>(side) * side, 0);
        normalize_patch(p, st);
        const Tensor logits = model.forward_inference(p.image);
        const std::vector<uint8_t> pm = predict_mask(logits, th);
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x)
                mask.at(oy + y, ox + x, 0) =
                    static_cast<float>(pm[static_cast<size_t>(y) * side + x]);
    }
    save_raster(out_path, mask, RasterDType::kU8);
    std::printf("wrote %s (%dx%d)\n", out_path.c_str(), mask.height, mask.width);
    return 0;
}

int cmd_count_params(const std::string& config_path) {
    const RunConfig cfg = RunConfig::parse_file(config_path);
    const HeadConfig head = cfg.head_config();
    const ParamCounts base = count_params_for(cfg.vit, head, nullptr);
    const ParamCounts counts =
        cfg.lora_enabled ? count_params_for(cfg.vit, head, &cfg.lora) : base;

    std::printf("%-10s %15s %15s %15s\n", "module", "total", "trainable",
                "frozen");
    for (const auto& [mod, n] : counts.by_module) {
        const bool trainable = cfg.lora_enabled ? mod != "encoder" : true;
        std::printf("%-10s %15lld %15lld %15lld\n", mod.c_str(),
                    static_cast<long long>(n),
                    static_cast<long long>(trainable ? n : 0),
                    static_cast<long long>(trainable ? 0 : n));
    }
    std::printf("%-10s %15lld %15lld %15lld\n", "TOTAL",
                static_cast<long long>(counts.total),
                static_cast<long long>(counts.trainable),
                static_cast<long long>(counts.frozen));
    std::printf("total %.2f M | trainable %.2f M | frozen %.2f M\n",
                counts.total / 1e6, counts.trainable / 1e6, counts.frozen / 1e6);
    const double reduction =
        100.0 * (1.0 - static_cast<double>(counts.trainable) /
                           static_cast<double>(counts.total));
    std::printf("reduction vs full fine-tune: %.2f%%\n", reduction);
    return 0;
}

int cmd_merge(const std::string& config_path, const std::string& base_path,
              const std::string& adapter_path, const std::string& out_path) {
    const RunConfig cfg = RunConfig::parse_file(config_path);
    SegModel model = build_model(cfg, true);
    model.load_archive(base_path);
    import_adapter(model, adapter_path);
    merge_lora(model);
    model.save_archive(out_path);
    std::printf("wrote merged archive %s\n", out_path.c_str());
    return 0;
}

int cmd_gen_synth(int n, uint64_t seed, const std::string& out_dir, int size) {
    gen_synthetic(n, seed, out_dir, size);
    std::printf("wrote %d raster/mask pairs to %s\n", n, out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LoRA-adapted ViT binary segmentation toolkit"};
    app.require_subcommand(1);

    std::string config_path, checkpoint, input, output, split_name = "test";
    std::string base_path, adapter_path;
    std::optional<uint64_t> seed_flag;
    std::optional<std::string> out_flag;
    std::optional<float> threshold_flag;
    std::string bands_flag;
    int gen_n = 8, gen_size = 224;
    uint64_t gen_seed = 0;

    CLI::App* train_cmd = app.add_subcommand("train", "train a model");
    train_cmd->add_option("--config", config_path, "run config path")
        ->required();
    uint64_t seed_val = 0;
    CLI::Option* seed_opt =
        train_cmd->add_option("--seed", seed_val, "seed override");
    std::string out_val;
    CLI::Option* out_opt =
        train_cmd->add_option("--out", out_val, "output directory override");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--config", config_path, "run config path")->required();
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint path")
        ->required();
    eval_cmd->add_option("--split", split_name, "train|test|val");
    float th_val = 0.5f;
    CLI::Option* th_opt =
        eval_cmd->add_option("--threshold", th_val, "mask threshold");

    CLI::App* predict_cmd = app.add_subcommand("predict", "predict a mask");
    predict_cmd->add_option("--config", config_path, "run config path")
        ->required();
    predict_cmd->add_option("--checkpoint", checkpoint, "checkpoint path")
        ->required();
    predict_cmd->add_option("--input", input, "input LVIM raster")->required();
    predict_cmd->add_option("--out", output, "output LVIM mask")->required();
    CLI::Option* th_opt2 =
        predict_cmd->add_option("--threshold", th_val, "mask threshold");
    predict_cmd->add_option("--bands", bands_flag, "band indices i,j,k");

    CLI::App* count_cmd =
        app.add_subcommand("count-params", "parameter audit for a config");
    count_cmd->add_option("--config", config_path, "run config path")
        ->required();

    CLI::App* merge_cmd =
        app.add_subcommand("merge", "fold an adapter into a base archive");
    merge_cmd->add_option("--config", config_path, "run config path")
        ->required();
    merge_cmd->add_option("--base", base_path, "base LVWT archive")->required();
    merge_cmd->add_option("--adapter", adapter_path, "adapter file")
        ->required();
    merge_cmd->add_option("--out", output, "merged archive path")->required();

    CLI::App* gen_cmd =
        app.add_subcommand("gen-synth", "generate a synthetic dataset");
    gen_cmd->add_option("--n", gen_n, "raster count")->required();
    gen_cmd->add_option("--seed", gen_seed, "generator seed");
    gen_cmd->add_option("--out", output, "output directory")->required();
    gen_cmd->add_option("--size", gen_size, "raster side length");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (*seed_opt) seed_flag = seed_val;
        if (out_opt->count() > 0) out_flag = out_val;
        if (train_cmd->parsed()) return cmd_train(config_path, seed_flag, out_flag);
        if (eval_cmd->parsed()) {
            if (*th_opt) threshold_flag = th_val;
            return cmd_eval(config_path, checkpoint, split_name, threshold_flag);
        }
        if (predict_cmd->parsed()) {
            if (*th_opt2) threshold_flag = th_val;
            std::optional<std::array<int, 3>> bands;
            if (!bands_flag.empty()) {
                std::array<int, 3> b{};
                if (std::sscanf(bands_flag.c_str(), "%d,%d,%d", &b[0], &b[1],
                                &b[2]) != 3)
                    throw ConfigError("--bands expects i,j,k");
                bands = b;
            }
            return cmd_predict(config_path, checkpoint, input, output,
                               threshold_flag, bands);
        }
        if (count_cmd->parsed()) return cmd_count_params(config_path);
        if (merge_cmd->parsed())
            return cmd_merge(config_path, base_path, adapter_path, output);
        if (gen_cmd->parsed())
            return cmd_gen_synth(gen_n, gen_seed, output, gen_size);
        return 1;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
