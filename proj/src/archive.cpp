#include "loraseg/archive.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "loraseg/tensor.hpp"

namespace loraseg {

namespace {

constexpr char kMagic[4] = {'L', 'V', 'W', 'T'};
constexpr uint32_t kVersion = 1;

// x86/ARM little-endian is assumed; serialization goes through fixed-width
// helpers so the layout stays explicit.
void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
    const unsigned char* p;
    size_t len;
    size_t pos = 0;
    const std::string& path;

    void need(size_t n, const char* what) const {
        if (pos + n > len)
            throw std::runtime_error("truncated archive '" + path +
                                     "' while reading " + what);
    }
    uint8_t u8(const char* what) {
        need(1, what);
        return p[pos++];
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = static_cast<uint16_t>(p[pos]) |
                     static_cast<uint16_t>(p[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
};

}  // namespace

void write_archive(const std::string& path,
                   const std::vector<ArchiveEntry>& entries) {
    std::string buf;
    buf.append(kMagic, 4);
    put_u32(buf, kVersion);
    put_u32(buf, static_cast<uint32_t>(entries.size()));
    for (const ArchiveEntry& e : entries) {
        if (e.name.size() > 0xffff)
            throw std::runtime_error("archive entry name too long: " + e.name);
        if (shape_numel(e.dims) != static_cast<int64_t>(e.data.size()))
            throw std::runtime_error("archive entry '" + e.name +
                                     "' dims do not match payload size");
        put_u16(buf, static_cast<uint16_t>(e.name.size()));
        buf.append(e.name);
        buf.push_back(1);  // dtype f32
        buf.push_back(static_cast<char>(e.dims.size()));
        for (int d : e.dims) put_u32(buf, static_cast<uint32_t>(d));
        const size_t bytes = e.data.size() * sizeof(float);
        const size_t off = buf.size();
        buf.resize(off + bytes);
        std::memcpy(buf.data() + off, e.data.data(), bytes);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

std::vector<ArchiveEntry> read_archive(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open archive '" + path + "'");
    std::string raw((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
    Reader r{reinterpret_cast<const unsigned char*>(raw.data()), raw.size(), 0,
             path};

    r.need(4, "magic");
    if (std::memcmp(raw.data(), kMagic, 4) != 0)
        throw std::runtime_error("bad magic in archive '" + path +
                                 "' (expected LVWT)");
    r.pos = 4;
    const uint32_t version = r.u32("version");
    if (version != kVersion)
        throw std::runtime_error("unsupported archive version " +
                                 std::to_string(version) + " in '" + path + "'");
    const uint32_t count = r.u32("entry count");

    std::vector<ArchiveEntry> entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        ArchiveEntry e;
        const uint16_t nlen = r.u16("name length");
        r.need(nlen, "entry name");
        e.name.assign(raw.data() + r.pos, nlen);
        r.pos += nlen;
        const uint8_t dtype = r.u8("dtype");
        if (dtype != 1)
            throw std::runtime_error("entry '" + e.name + "' in '" + path +
                                     "' has unsupported dtype " +
                                     std::to_string(dtype));
        const uint8_t rank = r.u8("rank");
        int64_t numel = 1;
        for (uint8_t d = 0; d < rank; ++d) {
            const uint32_t dim = r.u32("dims");
            if (dim == 0)
                throw std::runtime_error("entry '" + e.name +
                                         "' has a zero dimension");
            e.dims.push_back(static_cast<int>(dim));
            numel *= dim;
        }
        const size_t bytes = static_cast<size_t>(numel) * sizeof(float);
        r.need(bytes, ("payload of '" + e.name + "'").c_str());
        e.data.resize(static_cast<size_t>(numel));
        std::memcpy(e.data.data(), raw.data() + r.pos, bytes);
        r.pos += bytes;
        entries.push_back(std::move(e));
    }
    if (r.pos != raw.size())
        throw std::runtime_error("archive '" + path + "' has " +
                                 std::to_string(raw.size() - r.pos) +
                                 " trailing bytes");
    return entries;
}

const ArchiveEntry* find_entry(const std::vector<ArchiveEntry>& entries,
                               const std::string& name) {
    for (const ArchiveEntry& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

}  // namespace loraseg
