#include "pgunet/herlev.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <set>

namespace pgu {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kImageExtensions{".bmp", ".png", ".jpg", ".jpeg", ".tif", ".tiff"};

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

bool is_image(const fs::path& p) { return fs::is_regular_file(p) && kImageExtensions.count(lower(p.extension().string())); }

bool is_companion_name(const std::string& stem) { return stem.size() > 2 && stem.compare(stem.size() - 2, 2, "-d") == 0; }

std::optional<fs::path> find_with_stem(const fs::path& dir, const std::string& stem) {
  if (!fs::is_directory(dir)) return std::nullopt;
  std::vector<fs::path> hits;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (is_image(entry.path()) && entry.path().stem().string() == stem) hits.push_back(entry.path());
  }
  if (hits.empty()) return std::nullopt;
  std::sort(hits.begin(), hits.end());
  return hits.front();
}

std::vector<float> to_chw(const RgbImage& image) {
  const std::size_t plane = image.width * image.height;
  std::vector<float> out(3 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out[c * plane + i] = image.pixels[i * 3 + c] / 255.0f;
  }
  return out;
}

}  // namespace

Region parse_region(const std::string& name) {
  const std::string n = lower(name);
  if (n == "background") return Region::kBackground;
  if (n == "cytoplasm") return Region::kCytoplasm;
  if (n == "nucleus") return Region::kNucleus;
  if (n == "unknown") return Region::kUnknown;
  throw ConfigError("unknown region '" + name + "' (expected background, cytoplasm, nucleus or unknown)");
}

ColorTable ColorTable::defaults() {
  ColorTable t;
  t.colors[kClassPalette[0]] = Region::kBackground;
  t.colors[kClassPalette[1]] = Region::kCytoplasm;
  t.colors[kClassPalette[2]] = Region::kNucleus;
  t.colors[kClassPalette[3]] = Region::kNucleus;
  t.colors[Rgb{128, 128, 128}] = Region::kUnknown;
  return t;
}

std::vector<std::uint8_t> decode_mask(const RgbImage& mask, const ColorTable& table, const std::string& what) {
  std::vector<std::uint8_t> out(mask.width * mask.height);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Rgb c{mask.pixels[i * 3], mask.pixels[i * 3 + 1], mask.pixels[i * 3 + 2]};
    const auto it = table.colors.find(c);
    if (it == table.colors.end()) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "(%d,%d,%d)", c[0], c[1], c[2]);
      throw DataError(what + ": mask color " + buf + " is not in the color table");
    }
    switch (it->second) {
      case Region::kCytoplasm: out[i] = 1; break;
      case Region::kNucleus: out[i] = 2; break;
      case Region::kBackground:
      case Region::kUnknown: out[i] = 0; break;
    }
  }
  return out;
}

HerlevLoad load_herlev(const fs::path& root, const HerlevOptions& options) {
  if (!fs::is_directory(root)) throw DataError("data directory " + root.string() + " does not exist");
  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (is_image(entry.path()) && !is_companion_name(entry.path().stem().string())) images.push_back(entry.path());
  }
  std::sort(images.begin(), images.end());

  HerlevLoad result;
  result.dataset.resolution = kFinestResolution;
  std::set<std::string> seen;
  for (const auto& path : images) {
    const std::string id = path.stem().string();
    if (!seen.insert(id).second) throw DataError("two images share the id " + id);
    auto companion = find_with_stem(root, id + "-d");
    if (!companion) companion = find_with_stem(root / "masks", id);
    if (!companion) throw DataError("no mask companion for " + path.string());

    const RgbImage image = resize_bilinear(read_rgb(path), kFinestResolution, kFinestResolution);
    const RgbImage mask_rgb = read_rgb(*companion);
    auto mask = decode_mask(mask_rgb, options.colors, companion->string());
    mask = resize_nearest(mask, mask_rgb.width, mask_rgb.height, kFinestResolution, kFinestResolution);
    try {
      result.dataset.samples.push_back(
          make_sample(to_chw(image), std::move(mask), kFinestResolution, id, options.size_threshold));
    } catch (const DataError& e) {
      result.rejected.push_back(id + ": " + e.what());
    }
  }
  return result;
}

Tensor prepare_image(const RgbImage& image, std::size_t resolution) {
  auto chw = to_chw(resize_bilinear(image, kFinestResolution, kFinestResolution));
  normalize_channels(chw, 3);
  if (resolution != kFinestResolution) {
    chw = area_downsample(chw, 3, kFinestResolution, resolution);
    normalize_channels(chw, 3);
  }
  return Tensor::from_data({1, 3, resolution, resolution}, std::move(chw));
}

void write_sample_pair(const fs::path& dir, const std::string& id, const std::vector<float>& rgb,
                       const std::vector<std::uint8_t>& mask, std::size_t resolution) {
  const std::size_t plane = resolution * resolution;
  if (rgb.size() != 3 * plane || mask.size() != plane) throw ShapeError("write_sample_pair: size mismatch");
  RgbImage image{resolution, resolution, std::vector<std::uint8_t>(3 * plane)};
  RgbImage colors{resolution, resolution, std::vector<std::uint8_t>(3 * plane)};
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      image.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(rgb[c * plane + i], 0.0f, 1.0f) * 255));
      colors.pixels[i * 3 + c] = kClassPalette.at(mask[i])[c];
    }
  }
  fs::create_directories(dir);
  write_rgb(dir / (id + ".png"), image);
  write_rgb(dir / (id + "-d.png"), colors);
}

}  // namespace pgu
