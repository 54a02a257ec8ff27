#pragma once

// Checkpoint file, format "pgu1": a text manifest terminated by a line
// "end", then the payload. The manifest records the stage config, the run
// seed, the epoch, and for every tensor its name, shape, byte offset and
// length; the payload is the tensors as little-endian float32, in manifest
// order, covered by a CRC-32.

#include <filesystem>

#include "pgunet/model.hpp"
#include "pgunet/trainer.hpp"

namespace pgu {

inline constexpr const char* kCheckpointVersion = "pgu1";

void save_checkpoint(const Model<float>& model, const RmspropState& state, std::size_t epoch,
                     const std::filesystem::path& path);

struct LoadedCheckpoint {
  Model<float> model;
  RmspropState state;
  std::size_t epoch = 0;
};

/// Throws CheckpointError for an unknown version, a checksum mismatch or a
/// manifest that disagrees with the payload or the model layout.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace pgu
