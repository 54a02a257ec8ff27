#pragma once

#include <filesystem>
#include <vector>

#include "pgunet/trainer.hpp"

namespace pgu::cli {

/// Line chart of training loss (scaled to its maximum) and validation ZSI
/// over all epochs, with a dashed marker at every stage boundary.
void render_curves(const std::filesystem::path& path, const std::vector<StageReport>& stages);

}  // namespace pgu::cli
