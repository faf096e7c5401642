#pragma once

#include "packscope/common.hpp"
#include "packscope/md5.hpp"

#include <optional>

namespace packscope::viz {

// One byte per pixel, row-major. Conversion from a binary drops the trailing
// len mod width bytes, so binary -> image -> binary is lossy at the tail.
struct GreyscaleImage {
    uint32_t width = 0;
    uint32_t height = 0;
    Bytes pixels;  // width * height bytes

    uint8_t at(uint32_t row, uint32_t col) const { return pixels[row * width + col]; }
    bool operator==(const GreyscaleImage&) const = default;
};

// width for a file size, following the classic visualization schedule;
// override with an explicit width where needed
uint32_t width_for_size(size_t file_size);

GreyscaleImage binary_to_image(ByteView data, std::optional<uint32_t> width = std::nullopt);
Bytes image_to_binary(const GreyscaleImage& img);

// box-average downscale/upscale to side x side; a constant image stays
// constant under any side
GreyscaleImage resize_area(const GreyscaleImage& img, uint32_t side);

void write_png(const GreyscaleImage& img, const std::string& path);
GreyscaleImage read_png(const std::string& path);

// Searches suffixes of length 0..max_suffix (shortest first) such that
// MD5(truncated || suffix) == target. The shared prefix is hashed once and
// candidate tails run off cloned digest states, fanned out across jobs.
std::optional<Bytes> reconstruct_suffix(ByteView truncated, const Md5Digest& target,
                                        unsigned max_suffix = 3, unsigned jobs = 0);

}  // namespace packscope::viz
