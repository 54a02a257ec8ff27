#pragma once

#include <ostream>

namespace pgu::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,     // bad flags or config file
  kExitData = 3,       // unreadable or inconsistent data, resolution mismatch
  kExitNumerical = 4,  // NaN/Inf during training, checkpoint checksum failure
  kExitGradCheck = 5,  // an op exceeded the gradient-check tolerance
};

/// Entry point of the pgunet tool: train, eval, predict, gradcheck, synth.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pgu::cli
