#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "loraseg/data.hpp"
#include "loraseg/raster.hpp"
#include "loraseg/rng.hpp"

using namespace loraseg;

namespace {

std::string tmp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

Raster random_raster(Rng& rng, int h, int w, int bands) {
    Raster r;
    r.height = h;
    r.width = w;
    r.bands = bands;
    r.data.resize(static_cast<size_t>(h) * w * bands);
    for (auto& v : r.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
    return r;
}

Raster zero_mask(int h, int w) {
    Raster m;
    m.height = h;
    m.width = w;
    m.bands = 1;
    m.data.assign(static_cast<size_t>(h) * w, 0.0f);
    return m;
}

}  // namespace

TEST_SUITE_BEGIN("data");

TEST_CASE("raster write-read round trip is bitwise identical") {
    Rng rng(3);
    const Raster r = random_raster(rng, 17, 23, 4);
    const std::string path = tmp_path("raster_rt.lvim");
    save_raster(path, r, RasterDType::kF32);
    const Raster back = load_raster(path);
    CHECK(back.height == 17);
    CHECK(back.width == 23);
    CHECK(back.bands == 4);
    CHECK(back.data == r.data);
}

TEST_CASE("u8 rasters round trip through the byte payload") {
    Raster m = zero_mask(5, 4);
    m.data[7] = 1.0f;
    const std::string path = tmp_path("mask_rt.lvim");
    save_raster(path, m, RasterDType::kU8);
    const Raster back = load_raster(path);
    CHECK(back.data == m.data);
    // payload is 1 byte per value
    CHECK(std::filesystem::file_size(path) == 21 + 20);
}

TEST_CASE("corrupted magic and truncation are load errors") {
    const std::string path = tmp_path("raster_bad.lvim");
    {
        std::ofstream f(path, std::ios::binary);
        f << "XXXX" << std::string(40, '\0');
    }
    CHECK_THROWS_WITH_AS(load_raster(path), doctest::Contains("bad magic"),
                         std::runtime_error);

    Rng rng(5);
    const Raster r = random_raster(rng, 6, 6, 2);
    const std::string good = tmp_path("raster_good.lvim");
    save_raster(good, r);
    std::ifstream in(good, std::ios::binary);
    std::string raw((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    const std::string trunc = tmp_path("raster_trunc.lvim");
    {
        std::ofstream f(trunc, std::ios::binary);
        f.write(raw.data(), static_cast<std::streamsize>(raw.size() - 9));
    }
    CHECK_THROWS_AS(load_raster(trunc), std::runtime_error);
}

TEST_CASE("a 837x848x8 raster loads with bands = 8") {
    Rng rng(7);
    const Raster r = random_raster(rng, 837, 848, 8);
    const std::string path = tmp_path("raster_dstl.lvim");
    save_raster(path, r);
    const Raster back = load_raster(path);
    CHECK(back.height == 837);
    CHECK(back.width == 848);
    CHECK(back.bands == 8);
}

TEST_CASE("select_bands identity, replication, and range errors") {
    Rng rng(9);
    const Raster r3 = random_raster(rng, 4, 5, 3);
    const Raster same = select_bands(r3, {0, 1, 2});
    CHECK(same.data == r3.data);

    const Raster r8 = random_raster(rng, 4, 5, 8);
    const Raster rep = select_bands(r8, {5, 5, 5});
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 5; ++x) {
            CHECK(rep.at(y, x, 0) == r8.at(y, x, 5));
            CHECK(rep.at(y, x, 1) == r8.at(y, x, 5));
            CHECK(rep.at(y, x, 2) == r8.at(y, x, 5));
        }

    CHECK_THROWS_AS(select_bands(r8, {6, 7, 8}), std::invalid_argument);
}

TEST_CASE("patchify tiling counts and remainder discard") {
    Rng rng(11);
    const Raster r448 = random_raster(rng, 448, 448, 3);
    CHECK(patchify(r448, zero_mask(448, 448), 224).size() == 4);

    const Raster r500 = random_raster(rng, 500, 500, 3);
    CHECK(patchify(r500, zero_mask(500, 500), 224).size() == 4);

    // Tiling arithmetic at the full aerial-image scale.
    CHECK(tile_origins(9393, 5642, 224).size() == 41u * 25u);

    const Raster small = random_raster(rng, 100, 300, 3);
    CHECK_THROWS_WITH_AS(patchify(small, zero_mask(100, 300), 224),
                         doctest::Contains("smaller"), std::invalid_argument);
}

TEST_CASE("patchify validates masks and copies exact windows") {
    Rng rng(13);
    const Raster r = random_raster(rng, 448, 224, 3);
    Raster m = zero_mask(448, 224);
    m.data[5] = 0.5f;
    CHECK_THROWS_AS(patchify(r, m, 224), std::invalid_argument);
    m.data[5] = 1.0f;

    Raster wrong = zero_mask(447, 224);
    CHECK_THROWS_AS(patchify(r, wrong, 224), std::invalid_argument);

    const auto patches = patchify(r, m, 224);
    REQUIRE(patches.size() == 2);
    CHECK(patches[0].row == 0);
    CHECK(patches[1].row == 224);
    CHECK(patches[0].mask[5] == 1);
    CHECK(patches[1].mask[5] == 0);
    // channel-first copy against channel-last source
    CHECK(patches[1].image.data()[0] == r.at(224, 0, 0));
    CHECK(patches[1].image.data()[224 * 224] == r.at(224, 0, 1));
    // disjoint windows cover the raster exactly
    CHECK(patches[0].image.shape() == std::vector<int>{3, 224, 224});
}

TEST_CASE("split ratios, determinism, and partition laws") {
    SplitSpec spec;
    spec.seed = 77;
    const SplitIndices s100 = split(100, spec);
    CHECK(s100.train.size() == 72);
    CHECK(s100.test.size() == 20);
    CHECK(s100.val.size() == 8);

    const SplitIndices s25 = split(25, spec);
    CHECK(s25.train.size() == 18);
    CHECK(s25.test.size() == 5);
    CHECK(s25.val.size() == 2);

    const SplitIndices again = split(100, spec);
    CHECK(again.train == s100.train);
    CHECK(again.test == s100.test);
    CHECK(again.val == s100.val);

    std::set<int> all;
    for (int i : s100.train) all.insert(i);
    for (int i : s100.test) all.insert(i);
    for (int i : s100.val) all.insert(i);
    CHECK(all.size() == 100);  // disjoint and exhaustive
    CHECK(*all.begin() == 0);
    CHECK(*all.rbegin() == 99);

    CHECK_THROWS_AS(split(2, spec), std::invalid_argument);
}

TEST_CASE("normalization uses training-split statistics only") {
    Rng rng(17);
    std::vector<SamplePatch> patches;
    for (int i = 0; i < 4; ++i) {
        SamplePatch p;
        p.image = Tensor::zeros({3, 8, 8});
        float* d = p.image.data();
        for (int64_t j = 0; j < p.image.numel(); ++j)
            d[j] = static_cast<float>(rng.normal(i + 1.0, 2.0));
        p.mask.assign(64, 0);
        patches.push_back(std::move(p));
    }
    const std::vector<int> train_idx = {0, 1};
    const NormStats st = compute_norm_stats(patches, train_idx);

    // Recompute directly over the train patches.
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0;
        int64_t n = 0;
        for (int i : train_idx) {
            const float* plane = patches[static_cast<size_t>(i)].image.data() + c * 64;
            for (int j = 0; j < 64; ++j) sum += plane[j];
            n += 64;
        }
        CHECK(st.mean[static_cast<size_t>(c)] ==
              doctest::Approx(sum / n).epsilon(1e-5));
    }

    // Normalized train channels: mean 0 +- 1e-5, std 1 +- 1e-3.
    std::vector<SamplePatch> normed;
    for (const SamplePatch& p : patches) {
        SamplePatch q;
        q.image = Tensor::from_data(
            p.image.shape(),
            std::vector<float>(p.image.data(), p.image.data() + p.image.numel()));
        q.mask = p.mask;
        normed.push_back(std::move(q));
    }
    for (SamplePatch& p : normed) normalize_patch(p, st);
    for (int c = 0; c < 3; ++c) {
        double sum = 0.0, sq = 0.0;
        int64_t n = 0;
        for (int i : train_idx) {
            const float* plane = normed[static_cast<size_t>(i)].image.data() + c * 64;
            for (int j = 0; j < 64; ++j) {
                sum += plane[j];
                sq += static_cast<double>(plane[j]) * plane[j];
            }
            n += 64;
        }
        const double mean = sum / n;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(std::sqrt(sq / n - mean * mean) == doctest::Approx(1.0).epsilon(1e-3));
    }

    // A val patch is normalized with train stats, not its own.
    const float before = patches[3].image.data()[0];
    SamplePatch val;
    val.image = Tensor::from_data(
        patches[3].image.shape(),
        std::vector<float>(patches[3].image.data(),
                           patches[3].image.data() + patches[3].image.numel()));
    val.mask = patches[3].mask;
    normalize_patch(val, st);
    CHECK(val.image.data()[0] ==
          doctest::Approx((before - st.mean[0]) / st.stdev[0]));
}

TEST_CASE("constant channel normalizes to zeros with a warning path") {
    std::vector<SamplePatch> patches(1);
    patches[0].image = Tensor::full({3, 4, 4}, 2.5f);
    patches[0].mask.assign(16, 0);
    const NormStats st = compute_norm_stats(patches, {0});
    CHECK(st.degenerate[0]);
    CHECK(st.stdev[0] == 1.0f);
    normalize_patch(patches[0], st);
    for (int64_t i = 0; i < patches[0].image.numel(); ++i)
        CHECK(patches[0].image.data()[i] == 0.0f);
}

TEST_CASE("synthetic generation is deterministic and separable") {
    const auto a = gen_synthetic_rasters(3, 123, 64);
    const auto b = gen_synthetic_rasters(3, 123, 64);
    REQUIRE(a.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(a[i].image.data == b[i].image.data);
        CHECK(a[i].mask.data == b[i].mask.data);
    }
    const auto c = gen_synthetic_rasters(3, 124, 64);
    CHECK(a[0].image.data != c[0].image.data);

    // Masks are non-trivial and every mask pixel has NIR above the
    // background NIR mean.
    for (const auto& pair : a) {
        int64_t on = 0;
        double bg_sum = 0.0;
        int64_t bg_n = 0;
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                if (pair.mask.at(y, x, 0) == 1.0f) {
                    ++on;
                } else {
                    bg_sum += pair.image.at(y, x, 3);
                    ++bg_n;
                }
            }
        CHECK(on > 0);
        CHECK(on < 64 * 64);
        const double bg_mean = bg_sum / static_cast<double>(bg_n);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                if (pair.mask.at(y, x, 0) == 1.0f)
                    CHECK(pair.image.at(y, x, 3) > bg_mean);
    }
}

TEST_CASE("gen_synthetic writes n raster/mask pairs") {
    const std::string dir = tmp_path("synth_dir");
    std::filesystem::remove_all(dir);
    gen_synthetic(8, 42, dir, 32);
    size_t files = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        (void)e;
        ++files;
    }
    CHECK(files == 16);
    const auto pairs = load_dataset_dir(dir);
    CHECK(pairs.size() == 8);
    CHECK(pairs[0].image.bands == 4);
    CHECK(pairs[0].mask.bands == 1);
}

TEST_SUITE_END();
