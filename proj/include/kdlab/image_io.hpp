#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace kdlab {

// 8-bit interleaved RGB, row-major from the top-left pixel.
struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;
};

// PNG, JPEG or uncompressed BMP (8/24/32-bit), chosen by file extension.
RgbImage read_image(const std::filesystem::path& path);

void write_png(const std::filesystem::path& path, const RgbImage& image);
void write_bmp(const std::filesystem::path& path, const RgbImage& image);

bool is_supported_image(const std::filesystem::path& path);

}  // namespace kdlab
