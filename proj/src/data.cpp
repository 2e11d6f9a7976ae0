#include "loraseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <stdexcept>

#include "loraseg/rng.hpp"

namespace loraseg {

Raster select_bands(const Raster& r, const std::array<int, 3>& indices) {
    for (int idx : indices)
        if (idx < 0 || idx >= r.bands)
            throw std::invalid_argument(
                "band index " + std::to_string(idx) +
                " out of range for a raster with " + std::to_string(r.bands) +
                " bands");
    Raster out;
    out.height = r.height;
    out.width = r.width;
    out.bands = 3;
    out.data.resize(static_cast<size_t>(r.pixel_count()) * 3);
    for (int64_t p = 0; p < r.pixel_count(); ++p) {
        const float* src = r.data.data() + p * r.bands;
        float* dst = out.data.data() + p * 3;
        for (int b = 0; b < 3; ++b)
            dst[b] = src[indices[static_cast<size_t>(b)]];
    }
    if (!r.band_labels.empty()) {
        for (int idx : indices)
            out.band_labels.push_back(
                r.band_labels[static_cast<size_t>(idx)]);
    }
    return out;
}

std::vector<std::pair<int, int>> tile_origins(int h, int w, int size) {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y + size <= h; y += size)
        for (int x = 0; x + size <= w; x += size) out.emplace_back(y, x);
    return out;
}

std::vector<SamplePatch> patchify(const Raster& img, const Raster& mask,
                                  int size, int raster_id) {
    if (img.bands != 3)
        throw std::invalid_argument("patchify expects a 3-band raster, got " +
                                    std::to_string(img.bands) + " bands");
    if (mask.height != img.height || mask.width != img.width)
        throw std::invalid_argument(
            "mask dimensions " + std::to_string(mask.height) + "x" +
            std::to_string(mask.width) + " do not match raster " +
            std::to_string(img.height) + "x" + std::to_string(img.width));
    if (mask.bands != 1)
        throw std::invalid_argument("mask must be single-band");
    for (float v : mask.data)
        if (v != 0.0f && v != 1.0f)
            throw std::invalid_argument("mask values must be 0 or 1, got " +
                                        std::to_string(v));
    if (img.height < size || img.width < size)
        throw std::invalid_argument(
            "raster " + std::to_string(img.height) + "x" +
            std::to_string(img.width) + " smaller than one " +
            std::to_string(size) + "-pixel patch");

    std::vector<SamplePatch> out;
    for (const auto& [oy, ox] : tile_origins(img.height, img.width, size)) {
        SamplePatch p;
        p.raster_id = raster_id;
        p.row = oy;
        p.col = ox;
        p.image = Tensor::zeros({3, size, size});
        float* dst = p.image.data();
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    dst[(static_cast<int64_t>(c) * size + y) * size + x] =
                        img.at(oy + y, ox + x, c);
        p.mask.resize(static_cast<size_t>(size) * size);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                p.mask[static_cast<size_t>(y) * size + x] =
                    static_cast<uint8_t>(mask.at(oy + y, ox + x, 0));
        out.push_back(std::move(p));
    }
    return out;
}

SplitIndices split(int n, const SplitSpec& spec) {
    if (n < 3)
        throw std::invalid_argument("split requires at least 3 patches, got " +
                                    std::to_string(n));
    if (std::abs(spec.train + spec.test + spec.val - 1.0) > 1e-9)
        throw std::invalid_argument("split ratios must sum to 1");
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    Rng rng(spec.seed);
    rng.shuffle(idx);
    const int a = static_cast<int>(std::floor(spec.train * n));
    const int b = static_cast<int>(std::floor((spec.train + spec.test) * n));
    SplitIndices s;
    s.train.assign(idx.begin(), idx.begin() + a);
    s.test.assign(idx.begin() + a, idx.begin() + b);
    s.val.assign(idx.begin() + b, idx.end());
    return s;
}

NormStats compute_norm_stats(const std::vector<SamplePatch>& patches,
                             const std::vector<int>& train_idx) {
    if (train_idx.empty())
        throw std::invalid_argument("cannot compute stats from an empty split");
    NormStats st;
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0;
        int64_t count = 0;
        for (int i : train_idx) {
            const SamplePatch& p = patches[static_cast<size_t>(i)];
            const int side = p.image.dim(1);
            const int64_t hw = static_cast<int64_t>(side) * side;
            const float* plane = p.image.data() + c * hw;
            for (int64_t j = 0; j < hw; ++j) sum += plane[j];
            count += hw;
        }
        const double mean = sum / static_cast<double>(count);
        double var = 0.0;
        for (int i : train_idx) {
            const SamplePatch& p = patches[static_cast<size_t>(i)];
            const int side = p.image.dim(1);
            const int64_t hw = static_cast<int64_t>(side) * side;
            const float* plane = p.image.data() + c * hw;
            for (int64_t j = 0; j < hw; ++j) {
                const double d = plane[j] - mean;
                var += d * d;
            }
        }
        var /= static_cast<double>(count);
        st.mean[static_cast<size_t>(c)] = static_cast<float>(mean);
        const double sd = std::sqrt(var);
        if (sd < 1e-12) {
            st.stdev[static_cast<size_t>(c)] = 1.0f;
            st.degenerate[static_cast<size_t>(c)] = true;
            std::cerr << "warning: channel " << c
                      << " has zero variance on the training split; leaving "
                         "it centered only\n";
        } else {
            st.stdev[static_cast<size_t>(c)] = static_cast<float>(sd);
        }
    }
    return st;
}

void normalize_patch(SamplePatch& p, const NormStats& stats) {
    const int side = p.image.dim(1);
    const int64_t hw = static_cast<int64_t>(side) * side;
    float* d = p.image.data();
    for (int c = 0; c < 3; ++c) {
        const float m = stats.mean[static_cast<size_t>(c)];
        const float inv = 1.0f / stats.stdev[static_cast<size_t>(c)];
        float* plane = d + c * hw;
        for (int64_t j = 0; j < hw; ++j) plane[j] = (plane[j] - m) * inv;
    }
}

namespace {

struct Ellipse {
    double cx, cy, ax, ay, cs, sn;
    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double u = (dx * cs + dy * sn) / ax;
        const double v = (-dx * sn + dy * cs) / ay;
        return u * u + v * v <= 1.0;
    }
};

}  // namespace

std::vector<SyntheticPair> gen_synthetic_rasters(int n, uint64_t seed,
                                                 int size) {
    if (n < 1) throw std::invalid_argument("need at least one raster");
    std::vector<SyntheticPair> out;
    out.reserve(static_cast<size_t>(n));
    Rng master(seed);
    for (int i = 0; i < n; ++i) {
        Rng rng(master.next_u64());
        SyntheticPair pair;
        Raster& img = pair.image;
        img.height = size;
        img.width = size;
        img.bands = 4;
        img.band_labels = {"red", "green", "blue", "nir"};
        img.data.resize(static_cast<size_t>(size) * size * 4);
        Raster& msk = pair.mask;
        msk.height = size;
        msk.width = size;
        msk.bands = 1;
        msk.data.assign(static_cast<size_t>(size) * size, 0.0f);

        // Smooth background per band: base level + two sinusoids + noise.
        struct Wave {
            double ax, ay, px, py, amp;
        };
        std::array<double, 4> base{};
        std::array<std::array<Wave, 2>, 4> waves{};
        for (int b = 0; b < 4; ++b) {
            base[static_cast<size_t>(b)] = rng.uniform(0.15, 0.35);
            for (int wv = 0; wv < 2; ++wv) {
                Wave& w = waves[static_cast<size_t>(b)][static_cast<size_t>(wv)];
                w.ax = rng.uniform(1.0, 3.0) * 2.0 * M_PI / size;
                w.ay = rng.uniform(1.0, 3.0) * 2.0 * M_PI / size;
                w.px = rng.uniform(0.0, 2.0 * M_PI);
                w.py = rng.uniform(0.0, 2.0 * M_PI);
                w.amp = rng.uniform(0.02, 0.05);
            }
        }

        const int blob_count = 2 + static_cast<int>(rng.uniform_int(4));
        std::vector<Ellipse> blobs;
        for (int bi = 0; bi < blob_count; ++bi) {
            Ellipse e;
            e.cx = rng.uniform(0.15, 0.85) * size;
            e.cy = rng.uniform(0.15, 0.85) * size;
            e.ax = rng.uniform(size / 14.0, size / 5.0);
            e.ay = rng.uniform(size / 14.0, size / 5.0);
            const double th = rng.uniform(0.0, M_PI);
            e.cs = std::cos(th);
            e.sn = std::sin(th);
            blobs.push_back(e);
        }
        const double rgb_delta = rng.uniform(0.08, 0.14);
        const double nir_delta = rng.uniform(0.55, 0.7);

        for (int y = 0; y < size; ++y) {
            for (int x = 0; x < size; ++x) {
                bool inside = false;
                for (const Ellipse& e : blobs)
                    if (e.contains(x + 0.5, y + 0.5)) {
                        inside = true;
                        break;
                    }
                if (inside) msk.at(y, x, 0) = 1.0f;
                for (int b = 0; b < 4; ++b) {
                    double v = base[static_cast<size_t>(b)];
                    for (const Wave& w : waves[static_cast<size_t>(b)])
                        v += w.amp * std::sin(w.ax * x + w.px) *
                             std::sin(w.ay * y + w.py);
                    v += rng.uniform(-0.02, 0.02);
                    if (inside) v += (b == 3) ? nir_delta : rgb_delta;
                    img.at(y, x, b) = static_cast<float>(v);
                }
            }
        }
        out.push_back(std::move(pair));
    }
    return out;
}

void gen_synthetic(int n, uint64_t seed, const std::string& out_dir, int size) {
    std::filesystem::create_directories(out_dir);
    const std::vector<SyntheticPair> pairs =
        gen_synthetic_rasters(n, seed, size);
    for (int i = 0; i < n; ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "raster_%04d.lvim", i);
        save_raster(out_dir + "/" + name, pairs[static_cast<size_t>(i)].image,
                    RasterDType::kF32);
        std::snprintf(name, sizeof(name), "mask_%04d.lvim", i);
        save_raster(out_dir + "/" + name, pairs[static_cast<size_t>(i)].mask,
                    RasterDType::kU8);
    }
}

std::vector<SyntheticPair> load_dataset_dir(const std::string& dir) {
    std::vector<SyntheticPair> out;
    for (int i = 0;; ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "raster_%04d.lvim", i);
        const std::string rpath = dir + "/" + name;
        if (!std::filesystem::exists(rpath)) break;
        std::snprintf(name, sizeof(name), "mask_%04d.lvim", i);
        const std::string mpath = dir + "/" + name;
        if (!std::filesystem::exists(mpath))
            throw std::runtime_error("raster '" + rpath +
                                     "' has no matching mask '" + mpath + "'");
        SyntheticPair p;
        p.image = load_raster(rpath);
        p.mask = load_raster(mpath);
        out.push_back(std::move(p));
    }
    if (out.empty())
        throw std::runtime_error("no raster_XXXX.lvim files found in '" + dir +
                                 "'");
    return out;
}

}  // namespace loraseg
