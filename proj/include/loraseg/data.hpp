#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "loraseg/raster.hpp"
#include "loraseg/tensor.hpp"

namespace loraseg {

struct SamplePatch {
    Tensor image;                // [3 x size x size] channel-first
    std::vector<uint8_t> mask;   // size*size, values {0, 1}
    int raster_id = 0;
    int row = 0;
    int col = 0;
};

// Exactly three indices; duplicates allowed (single-band replication).
Raster select_bands(const Raster& r, const std::array<int, 3>& indices);

// Non-overlapping row-major tiling; trailing remainder is discarded.
std::vector<std::pair<int, int>> tile_origins(int h, int w, int size);
std::vector<SamplePatch> patchify(const Raster& img, const Raster& mask,
                                  int size = 224, int raster_id = 0);

struct SplitSpec {
    double train = 0.72, test = 0.20, val = 0.08;
    uint64_t seed = 0;
};

struct SplitIndices {
    std::vector<int> train, test, val;
};

// Seeded uniform shuffle, then contiguous cuts at floor(0.72 n) and
// floor(0.92 n). Partitions are disjoint and exhaustive.
SplitIndices split(int n, const SplitSpec& spec);

struct NormStats {
    std::array<float, 3> mean{0.0f, 0.0f, 0.0f};
    std::array<float, 3> stdev{1.0f, 1.0f, 1.0f};
    std::array<bool, 3> degenerate{false, false, false};
};

// Per-channel statistics over the training split only.
NormStats compute_norm_stats(const std::vector<SamplePatch>& patches,
                             const std::vector<int>& train_idx);
void normalize_patch(SamplePatch& p, const NormStats& stats);

// Procedural rasters: smooth per-band background plus elliptical blobs that
// brighten the NIR band strongly and the RGB bands weakly; masks are the
// exact blob union. Bands are [red, green, blue, nir]. Writes
// raster_%04d.lvim / mask_%04d.lvim pairs.
void gen_synthetic(int n, uint64_t seed, const std::string& out_dir,
                   int size = 224);

// In-memory variant used by tests and the trainer.
struct SyntheticPair {
    Raster image;  // 4 bands
    Raster mask;   // 1 band, {0, 1}
};
std::vector<SyntheticPair> gen_synthetic_rasters(int n, uint64_t seed, int size);

// Loads raster_%04d.lvim / mask_%04d.lvim pairs from a directory.
std::vector<SyntheticPair> load_dataset_dir(const std::string& dir);

}  // namespace loraseg
