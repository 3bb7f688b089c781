#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace isod {

struct ZipEntry {
    std::string name;
    std::vector<std::uint8_t> data;
    friend bool operator==(const ZipEntry&, const ZipEntry&) = default;
};

// Uncompressed (stored) zip archive with CRC-32 checks. Timestamps are fixed
// so identical entries give identical bytes.
std::vector<std::uint8_t> zip_store(const std::vector<ZipEntry>& entries);

// Reads archives written by zip_store or any tool that uses the stored or
// deflate methods. Throws LoadError on structural damage or CRC mismatch.
std::vector<ZipEntry> zip_read(std::span<const std::uint8_t> bytes);

} // namespace isod
