#include "pgunet/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pgunet/errors.hpp"

namespace pgu {

namespace {

cv::Mat to_bgr_mat(const RgbImage& image) {
  if (image.pixels.size() != image.width * image.height * 3) throw ShapeError("RgbImage: pixel buffer size mismatch");
  cv::Mat rgb(static_cast<int>(image.height), static_cast<int>(image.width), CV_8UC3,
              const_cast<std::uint8_t*>(image.pixels.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

RgbImage from_bgr_mat(const cv::Mat& bgr) {
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  RgbImage out;
  out.width = static_cast<std::size_t>(rgb.cols);
  out.height = static_cast<std::size_t>(rgb.rows);
  out.pixels.assign(rgb.data, rgb.data + rgb.total() * 3);
  return out;
}

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open_file(const std::filesystem::path& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  if (!f) throw DataError("cannot open " + path.string());
  return f;
}

[[noreturn]] void png_fail(png_structp png, png_const_charp message) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  *what = message;
  png_longjmp(png, 1);
}

}  // namespace

RgbImage read_rgb(const std::filesystem::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot read image " + path.string());
  return from_bgr_mat(bgr);
}

void write_rgb(const std::filesystem::path& path, const RgbImage& image) {
  if (!cv::imwrite(path.string(), to_bgr_mat(image))) throw DataError("cannot write image " + path.string());
}

void write_gray(const std::filesystem::path& path, std::size_t width, std::size_t height,
                const std::vector<std::uint8_t>& values) {
  if (values.size() != width * height) throw ShapeError("write_gray: buffer size mismatch");
  cv::Mat m(static_cast<int>(height), static_cast<int>(width), CV_8UC1, const_cast<std::uint8_t*>(values.data()));
  if (!cv::imwrite(path.string(), m)) throw DataError("cannot write image " + path.string());
}

std::vector<std::uint8_t> read_gray(const std::filesystem::path& path, std::size_t* width, std::size_t* height) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw DataError("cannot read image " + path.string());
  if (width) *width = static_cast<std::size_t>(m.cols);
  if (height) *height = static_cast<std::size_t>(m.rows);
  return {m.data, m.data + m.total()};
}

void write_paletted_png(const std::filesystem::path& path, const PalettedImage& image) {
  if (image.indices.size() != image.width * image.height) throw ShapeError("write_paletted_png: size mismatch");
  if (image.palette.empty() || image.palette.size() > 256) throw ShapeError("write_paletted_png: bad palette size");
  for (auto i : image.indices) {
    if (i >= image.palette.size()) throw ShapeError("write_paletted_png: index outside the palette");
  }
  File f = open_file(path, "wb");
  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("libpng initialization failed");
  }
  std::vector<png_color> palette;
  for (const auto& c : image.palette) palette.push_back({c[0], c[1], c[2]});
  std::vector<png_bytep> rows(image.height);
  for (std::size_t y = 0; y < image.height; ++y) {
    rows[y] = const_cast<png_bytep>(image.indices.data() + y * image.width);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("cannot write " + path.string() + ": " + error);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_PLTE(png, info, palette.data(), static_cast<int>(palette.size()));
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

PalettedImage read_paletted_png(const std::filesystem::path& path) {
  File f = open_file(path, "rb");
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("libpng initialization failed");
  }
  PalettedImage out;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("cannot read " + path.string() + ": " + error);
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_PALETTE || png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(path.string() + " is not an 8-bit paletted PNG");
  }
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  png_colorp palette = nullptr;
  int count = 0;
  png_get_PLTE(png, info, &palette, &count);
  for (int i = 0; i < count; ++i) out.palette.push_back({palette[i].red, palette[i].green, palette[i].blue});
  out.indices.resize(out.width * out.height);
  rows.resize(out.height);
  for (std::size_t y = 0; y < out.height; ++y) rows[y] = out.indices.data() + y * out.width;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

RgbImage resize_bilinear(const RgbImage& image, std::size_t width, std::size_t height) {
  if (image.width == width && image.height == height) return image;
  cv::Mat src(static_cast<int>(image.height), static_cast<int>(image.width), CV_8UC3,
              const_cast<std::uint8_t*>(image.pixels.data()));
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(static_cast<int>(width), static_cast<int>(height)), 0, 0, cv::INTER_LINEAR);
  RgbImage out;
  out.width = width;
  out.height = height;
  out.pixels.assign(dst.data, dst.data + dst.total() * 3);
  return out;
}

std::vector<std::uint8_t> resize_nearest(const std::vector<std::uint8_t>& labels, std::size_t width,
                                         std::size_t height, std::size_t out_width, std::size_t out_height) {
  if (labels.size() != width * height) throw ShapeError("resize_nearest: buffer size mismatch");
  if (width == out_width && height == out_height) return labels;
  cv::Mat src(static_cast<int>(height), static_cast<int>(width), CV_8UC1, const_cast<std::uint8_t*>(labels.data()));
  cv::Mat dst;
  cv::resize(src, dst, cv::Size(static_cast<int>(out_width), static_cast<int>(out_height)), 0, 0, cv::INTER_NEAREST);
  return {dst.data, dst.data + dst.total()};
}

}  // namespace pgu
