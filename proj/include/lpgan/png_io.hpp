#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lpgan::png {

// 8-bit RGB, row-major, 3 bytes per pixel. Covers exactly what frame export
// needs; no palettes, alpha, or interlacing.
struct Image {
  int width = 0, height = 0;
  std::vector<uint8_t> rgb;
};

void write_rgb8(const std::string& path, const Image& img);

// Reads images this module wrote, plus any 8-bit truecolor non-interlaced
// file using the five standard scanline filters. Malformed input raises
// DataError; chunk CRC mismatches raise IntegrityError.
Image read_rgb8(const std::string& path);

}  // namespace lpgan::png
