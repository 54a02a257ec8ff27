#pragma once

// Directory ingestion for Herlev-style data: every image file has a
// color-coded mask companion, either `<stem>-d.<ext>` next to it or
// `masks/<stem>.<ext>`. Mask colors map to regions through a ColorTable.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pgunet/data.hpp"
#include "pgunet/image_io.hpp"

namespace pgu {

enum class Region { kBackground, kCytoplasm, kNucleus, kUnknown };

/// Region name as used in config files: background, cytoplasm, nucleus, unknown.
Region parse_region(const std::string& name);

struct ColorTable {
  std::map<Rgb, Region> colors;

  /// black background, red cytoplasm, blue and cyan nucleus, gray unknown.
  static ColorTable defaults();
};

/// Output colors for the four mask classes, indexed by class id.
inline constexpr std::array<Rgb, 4> kClassPalette{Rgb{0, 0, 0}, Rgb{255, 0, 0}, Rgb{0, 0, 255}, Rgb{0, 255, 255}};

struct HerlevOptions {
  ColorTable colors = ColorTable::defaults();
  double size_threshold = kDefaultSizeThreshold;
};

struct HerlevLoad {
  Dataset dataset;                   // at 256x256, sorted by source_id
  std::vector<std::string> rejected;  // one diagnostic per skipped sample
};

/// Reads every image under `root` (not recursive). Unknown regions become
/// background; images are resized bilinearly and masks by nearest neighbour
/// to 256x256. Samples without nucleus pixels are skipped with a diagnostic.
/// Throws DataError for an unreadable file, a missing companion or a mask
/// color absent from the table.
HerlevLoad load_herlev(const std::filesystem::path& root, const HerlevOptions& options = {});

/// Class-id mask (0..3 with unknown folded into background) from a color mask.
std::vector<std::uint8_t> decode_mask(const RgbImage& mask, const ColorTable& table, const std::string& what);

/// The ingestion path for a single image: bilinear to 256, standardize,
/// area-average to `resolution`, standardize again. Returns [1,3,R,R].
Tensor prepare_image(const RgbImage& image, std::size_t resolution);

/// Writes `<dir>/<id>.png` and `<dir>/<id>-d.png` in kClassPalette colors,
/// from a [3,R,R] image in [0,1] and a class-id mask.
void write_sample_pair(const std::filesystem::path& dir, const std::string& id, const std::vector<float>& rgb,
                       const std::vector<std::uint8_t>& mask, std::size_t resolution);

}  // namespace pgu
