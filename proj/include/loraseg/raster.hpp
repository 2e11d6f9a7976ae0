#pragma once

#include <cstdint>
#include <string>
#include <vector>

// LVIM raster format, bit-exact layout:
//   magic "LVIM" | version u32=1 | height u32 | width u32 | bands u32 |
//   dtype u8 (1 = f32, 2 = u8) | payload row-major channel-last LE
// Masks are stored as dtype u8 with values {0, 1}.

namespace loraseg {

struct Raster {
    int height = 0;
    int width = 0;
    int bands = 0;
    std::vector<float> data;  // channel-last row-major
    std::vector<std::string> band_labels;  // in-memory only, optional

    float at(int y, int x, int b) const {
        return data[(static_cast<size_t>(y) * width + x) * bands + b];
    }
    float& at(int y, int x, int b) {
        return data[(static_cast<size_t>(y) * width + x) * bands + b];
    }
    int64_t pixel_count() const {
        return static_cast<int64_t>(height) * width;
    }
};

enum class RasterDType : uint8_t { kF32 = 1, kU8 = 2 };

void save_raster(const std::string& path, const Raster& r,
                 RasterDType dtype = RasterDType::kF32);
Raster load_raster(const std::string& path);

}  // namespace loraseg
