#include "loraseg/raster.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace loraseg {

namespace {

constexpr char kMagic[4] = {'L', 'V', 'I', 'M'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace

void save_raster(const std::string& path, const Raster& r, RasterDType dtype) {
    const int64_t n = static_cast<int64_t>(r.height) * r.width * r.bands;
    if (r.height <= 0 || r.width <= 0 || r.bands <= 0)
        throw std::runtime_error("raster dimensions must be positive");
    if (n != static_cast<int64_t>(r.data.size()))
        throw std::runtime_error("raster data length does not match dimensions");

    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, kVersion);
    put_u32(buf, static_cast<uint32_t>(r.height));
    put_u32(buf, static_cast<uint32_t>(r.width));
    put_u32(buf, static_cast<uint32_t>(r.bands));
    buf.push_back(static_cast<char>(dtype));
    if (dtype == RasterDType::kF32) {
        const size_t off = buf.size();
        buf.resize(off + static_cast<size_t>(n) * sizeof(float));
        std::memcpy(buf.data() + off, r.data.data(),
                    static_cast<size_t>(n) * sizeof(float));
    } else {
        for (int64_t i = 0; i < n; ++i) {
            const float v = r.data[static_cast<size_t>(i)];
            buf.push_back(static_cast<char>(
                static_cast<uint8_t>(std::lround(std::fmin(std::fmax(v, 0.0f), 255.0f)))));
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

Raster load_raster(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open raster '" + path + "'");
    std::string raw((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
    const unsigned char* p = reinterpret_cast<const unsigned char*>(raw.data());
    if (raw.size() < 21)
        throw std::runtime_error("truncated raster '" + path + "'");
    if (std::memcmp(raw.data(), kMagic, 4) != 0)
        throw std::runtime_error("bad magic in raster '" + path +
                                 "' (expected LVIM)");
    const uint32_t version = get_u32(p + 4);
    if (version != kVersion)
        throw std::runtime_error("unsupported raster version " +
                                 std::to_string(version) + " in '" + path + "'");
    Raster r;
    r.height = static_cast<int>(get_u32(p + 8));
    r.width = static_cast<int>(get_u32(p + 12));
    r.bands = static_cast<int>(get_u32(p + 16));
    if (r.height == 0 || r.width == 0 || r.bands == 0)
        throw std::runtime_error("raster '" + path + "' has a zero dimension");
    const uint8_t dtype = p[20];
    const int64_t n = static_cast<int64_t>(r.height) * r.width * r.bands;
    const size_t header = 21;
    if (dtype == static_cast<uint8_t>(RasterDType::kF32)) {
        if (raw.size() != header + static_cast<size_t>(n) * sizeof(float))
            throw std::runtime_error("truncated raster payload in '" + path + "'");
        r.data.resize(static_cast<size_t>(n));
        std::memcpy(r.data.data(), raw.data() + header,
                    static_cast<size_t>(n) * sizeof(float));
    } else if (dtype == static_cast<uint8_t>(RasterDType::kU8)) {
        if (raw.size() != header + static_cast<size_t>(n))
            throw std::runtime_error("truncated raster payload in '" + path + "'");
        r.data.resize(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i)
            r.data[static_cast<size_t>(i)] =
                static_cast<float>(p[header + static_cast<size_t>(i)]);
    } else {
        throw std::runtime_error("raster '" + path + "' has unsupported dtype " +
                                 std::to_string(dtype));
    }
    for (float v : r.data)
        if (!std::isfinite(v))
            throw std::runtime_error("raster '" + path +
                                     "' contains non-finite values");
    return r;
}

}  // namespace loraseg
