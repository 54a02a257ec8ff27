#pragma once

// Samples, datasets and the preprocessing shared by every data source:
// per-channel normalization, the nucleus size split, resolution pyramids and
// seeded splits. The synthetic generator lives here too; directory ingestion
// is in herlev.hpp.

#include <cstdint>
#include <string>
#include <vector>

#include "pgunet/tensor.hpp"

namespace pgu {

enum class MaskClass : std::uint8_t { kBackground = 0, kCytoplasm = 1, kSmallNucleus = 2, kLargeNucleus = 3 };

enum class NucleusSize { kSmall, kLarge };

enum class SplitTag { kAll, kTrain, kVal, kTest };

const char* to_string(NucleusSize size);
const char* to_string(SplitTag tag);

/// Large/small nucleus boundary in pixels at 256x256.
inline constexpr double kDefaultSizeThreshold = 2000.0;
inline constexpr std::size_t kFinestResolution = 256;

struct Sample {
  Tensor image;                    // [3,R,R], per-channel zero mean / unit variance
  std::vector<std::uint8_t> mask;  // [R,R] row-major MaskClass ids
  std::string source_id;
  NucleusSize nucleus_size = NucleusSize::kSmall;

  std::size_t resolution() const { return image.dim(2); }
};

struct Dataset {
  std::vector<Sample> samples;
  SplitTag split = SplitTag::kAll;
  std::size_t resolution = 0;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  /// Throws DataError unless all samples share `resolution` and ids are unique.
  void validate() const;
};

/// In-place per-channel standardization of a [C,H,W] buffer (population
/// std). A constant channel becomes all zeros.
void normalize_channels(std::vector<float>& chw, std::size_t channels);

/// Mean over disjoint f x f blocks of a [C,R,R] buffer, f = R / target.
std::vector<float> area_downsample(const std::vector<float>& chw, std::size_t channels, std::size_t resolution,
                                   std::size_t target);

/// large iff the nucleus pixel count exceeds threshold * (R/256)^2.
/// Throws DataError for a mask without nucleus pixels.
NucleusSize classify_nucleus_size(const std::vector<std::uint8_t>& mask, std::size_t resolution,
                                  double threshold = kDefaultSizeThreshold);

/// Rewrites every nucleus pixel (class 2 or 3) to the class for `size`.
void relabel_nuclei(std::vector<std::uint8_t>& mask, NucleusSize size);

/// Area-average images and center-sample masks down to `target`, which must
/// be a power of two >= 32 dividing the dataset resolution. Images are
/// re-normalized afterwards.
Dataset resample(const Dataset& dataset, std::size_t target);

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct DatasetSplits {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Sorts by source_id, shuffles with `seed` and cuts round(n*train),
/// round(n*val) and the remainder.
DatasetSplits split(const Dataset& dataset, const SplitRatios& ratios, std::uint64_t seed);

struct SynthOptions {
  double size_threshold = kDefaultSizeThreshold;
  double noise_stddev = 0.04;
};

/// Raw rendering before normalization: RGB in [0,1] as [3,R,R] and the mask.
struct SynthImage {
  std::vector<float> rgb;
  std::vector<std::uint8_t> mask;
  std::size_t resolution = 0;
};

/// Sample `index` of the synthetic stream for `seed`: textured background,
/// one elliptical cytoplasm, one interior elliptical nucleus (area drawn
/// log-uniformly across the size threshold) and pixel noise.
SynthImage synth_render(std::size_t index, std::size_t resolution, std::uint64_t seed,
                        const SynthOptions& options = {});

/// n normalized samples with ids "synth-000000", ...
Dataset synth_generate(std::size_t n, std::size_t resolution, std::uint64_t seed, const SynthOptions& options = {});

/// Builds a Sample from a raw [3,R,R] buffer and a 3-class mask (nuclei as
/// class 2 or 3): normalizes, classifies and relabels nuclei.
Sample make_sample(std::vector<float> rgb, std::vector<std::uint8_t> mask, std::size_t resolution,
                   std::string source_id, double size_threshold = kDefaultSizeThreshold);

/// Stacks samples[indices] into a [B,3,R,R] batch and the matching labels.
struct Batch {
  Tensor images;
  std::vector<std::uint8_t> labels;
};
Batch make_batch(const Dataset& dataset, const std::vector<std::size_t>& indices);

}  // namespace pgu
