#pragma once

#include <string>
#include <vector>

// LVWT weight archive, bit-exact layout:
//   magic "LVWT" | version u32=1 | entry_count u32 |
//   per entry: name_len u16 | UTF-8 name | dtype u8 (1 = f32) | rank u8 |
//              dims u32 x rank | payload row-major little-endian f32
//
// Reading parses and validates the whole file before returning, so a
// truncated or corrupt archive never yields a partial result.

namespace loraseg {

struct ArchiveEntry {
    std::string name;
    std::vector<int> dims;
    std::vector<float> data;
};

void write_archive(const std::string& path,
                   const std::vector<ArchiveEntry>& entries);
std::vector<ArchiveEntry> read_archive(const std::string& path);

const ArchiveEntry* find_entry(const std::vector<ArchiveEntry>& entries,
                               const std::string& name);

}  // namespace loraseg
