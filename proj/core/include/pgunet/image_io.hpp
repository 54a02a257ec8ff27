#pragma once

// 8-bit image files. RGB and grayscale go through OpenCV (any format it can
// decode); paletted PNG is written and read with libpng so the palette is
// under our control.

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace pgu {

using Rgb = std::array<std::uint8_t, 3>;

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, interleaved R,G,B
};

struct PalettedImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> indices;  // row-major palette indices
  std::vector<Rgb> palette;
};

/// Throws DataError if the file is missing or cannot be decoded.
RgbImage read_rgb(const std::filesystem::path& path);
void write_rgb(const std::filesystem::path& path, const RgbImage& image);
void write_gray(const std::filesystem::path& path, std::size_t width, std::size_t height,
                const std::vector<std::uint8_t>& values);
std::vector<std::uint8_t> read_gray(const std::filesystem::path& path, std::size_t* width = nullptr,
                                    std::size_t* height = nullptr);

/// 8-bit indexed PNG.
void write_paletted_png(const std::filesystem::path& path, const PalettedImage& image);
PalettedImage read_paletted_png(const std::filesystem::path& path);

/// Bilinear resize (OpenCV INTER_LINEAR).
RgbImage resize_bilinear(const RgbImage& image, std::size_t width, std::size_t height);

/// Nearest-neighbour resize of a single-channel label grid.
std::vector<std::uint8_t> resize_nearest(const std::vector<std::uint8_t>& labels, std::size_t width,
                                         std::size_t height, std::size_t out_width, std::size_t out_height);

}  // namespace pgu
