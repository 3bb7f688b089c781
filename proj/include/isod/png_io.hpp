#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "isod/image.hpp"

namespace isod {

// 8-bit grayscale PNG encode/decode. Decoding accepts any PNG colour type;
// colour images are reduced with the to_grayscale luminance weights.
std::vector<std::uint8_t> encode_png(const Raster<std::uint8_t>& gray);
Raster<std::uint8_t> decode_png(std::span<const std::uint8_t> bytes);

void write_png(const std::filesystem::path& path, const Raster<std::uint8_t>& gray);
Raster<std::uint8_t> read_png(const std::filesystem::path& path);

} // namespace isod
