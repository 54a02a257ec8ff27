#pragma once

// Run configuration: an INI file with sections [run], [data], [colors] and
// [stage1] .. [stageN]. Unknown sections and keys are errors.
//
//   [run]    seed (required), output, num_stages (default 4), batch_size,
//            widths (comma list, finest first), rms_decay, rms_epsilon
//   [data]   synthetic (bool), path, count, size_threshold, split (a,b,c)
//   [colors] "R,G,B = background|cytoplasm|nucleus|unknown"; replaces the
//            default table when present
//   [stageN] epochs, lr_new, lr_transferred, residual

#include <filesystem>
#include <istream>
#include <string>

#include "pgunet/data.hpp"
#include "pgunet/herlev.hpp"
#include "pgunet/trainer.hpp"

namespace pgu::cli {

struct DataConfig {
  bool synthetic = false;
  std::filesystem::path path;
  std::size_t count = 240;
  SplitRatios ratios;
  HerlevOptions herlev;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output = "pgunet-out";
  std::vector<std::size_t> widths{kDefaultWidths.begin(), kDefaultWidths.end()};
  TrainSchedule schedule;
  DataConfig data;

  std::size_t finest_resolution() const { return schedule.stages.back().resolution(); }
};

/// Relative paths are resolved against `base_dir`. Throws ConfigError.
RunConfig parse_run_config(std::istream& in, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

/// The configured data at the finest scheduled resolution, split by seed.
/// Ingestion diagnostics are appended to `rejected`.
DatasetSplits build_splits(const RunConfig& config, std::vector<std::string>* rejected = nullptr);

}  // namespace pgu::cli
