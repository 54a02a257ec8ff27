#pragma once

// U-net+ with residual decoder merges, built for progressive growing.
//
// Topology at stage s (input resolution R = 32 * 2^(s-1), depth s):
//
//   level l = 0..s-1 works at resolution R >> l with widths[l] channels; the
//   bottleneck always sits at 16x16 with widths[s] channels.
//
//   encoder  enc.r<res>.conv1   3x3, image pyramid input (avgpool of the batch)
//            enc.r<res>.link    3x3, maxpool of the next finer encoder level
//                               (absent on the finest level)
//            enc.r<res>.conv2   3x3
//   bottom   bottleneck.conv1 / bottleneck.conv2
//   decoder  dec.r<res>.conv1 / conv2 on concat(skip, up(coarse))   -> F
//            dec.r<res>.proj    1x1, zero-initialized, only when the coarse
//                               and fine widths differ                  -> G
//            y = F(fine path) + G(up(coarse))
//   heads    head.r<res>        1x1 to num_classes; the class logits of
//                               consecutive scales are merged the same way,
//                               logits_r = head_r(y_r) + up(logits_{r/2}).
//
// Names carry the absolute resolution of the level, so a layer keeps its name
// (and its shape) when the network is grown around it.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pgunet/nn_ops.hpp"
#include "pgunet/tensor.hpp"

namespace pgu {

inline constexpr int kNumStages = 4;
inline constexpr std::size_t kBaseResolution = 32;
inline constexpr std::size_t kBottleneckResolution = 16;
inline constexpr std::size_t kNumClasses = 4;
inline constexpr std::size_t kInputChannels = 3;

/// Default channel widths indexed by absolute scale, finest (256 px) first.
inline constexpr std::array<std::size_t, 5> kDefaultWidths{32, 64, 128, 256, 512};

struct StageConfig {
  int stage = 1;
  // Finest level first, bottleneck last; length stage + 1, non-decreasing.
  std::vector<std::size_t> widths;
  std::size_t num_classes = kNumClasses;
  std::size_t epochs = 40;
  double lr_new = 1e-4;
  double lr_transferred = 1e-6;
  // Enables the additive coarse-to-fine merges. Off gives a plain U-net with
  // the same parameter set (merge-only parameters stay idle).
  bool residual = true;

  std::size_t resolution() const { return kBaseResolution << (stage - 1); }
  std::size_t depth() const { return static_cast<std::size_t>(stage); }
  void validate() const;
};

/// Stage config whose widths are the last stage+1 entries of `all_widths`.
StageConfig make_stage_config(int stage, const std::vector<std::size_t>& all_widths =
                                             {kDefaultWidths.begin(), kDefaultWidths.end()});

template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> tensor;
  int stage_of_origin = 1;
};

struct LayerSpec {
  std::string prefix;  // parameters are <prefix>.weight and <prefix>.bias
  std::size_t in_channels;
  std::size_t out_channels;
  std::size_t kernel;
  bool zero_init;
};

/// Every convolution the stage-`config` network owns, in construction order.
std::vector<LayerSpec> layer_specs(const StageConfig& config);

/// Coarse-to-fine decoder block: F is two conv+relu on the concatenated skip
/// and upsampled coarse features, G is the (optionally projected) upsampled
/// coarse map.
template <typename T>
struct ResidualDecoderBlock {
  Conv2dParams<T> conv1;
  Conv2dParams<T> conv2;
  std::optional<Conv2dParams<T>> projection;

  BasicTensor<T> fine_branch(const BasicTensor<T>& coarse, const BasicTensor<T>& skip) const;
  BasicTensor<T> coarse_branch(const BasicTensor<T>& coarse) const;
  BasicTensor<T> forward(const BasicTensor<T>& coarse, const BasicTensor<T>& skip) const;
};

/// fine + G(coarse) with G = projection (if given) followed by nearest 2x
/// upsampling. `fine` must be exactly twice the spatial extent of `coarse`;
/// without a projection the channel counts must agree.
template <typename T>
BasicTensor<T> residual_merge(const BasicTensor<T>& coarse, const BasicTensor<T>& fine,
                              const Conv2dParams<T>* projection = nullptr);

struct ForwardOptions {
  // Replaces every coarse-branch term G with zero (ablation probe).
  bool zero_coarse_branch = false;
};

template <typename T>
class Model {
 public:
  using ParameterMap = std::map<std::string, Parameter<T>>;

  Model(StageConfig config, std::uint64_t seed, ParameterMap parameters);

  const StageConfig& config() const { return config_; }
  int stage() const { return config_.stage; }
  std::uint64_t seed() const { return seed_; }

  const ParameterMap& parameters() const { return parameters_; }
  ParameterMap& parameters() { return parameters_; }
  const Parameter<T>& parameter(const std::string& name) const;

  /// [N,3,R,R] -> [N,num_classes,R,R] logits.
  BasicTensor<T> forward(const BasicTensor<T>& batch, const ForwardOptions& options = {}) const;

  ResidualDecoderBlock<T> decoder_block(std::size_t resolution) const;

  void zero_grad();

  template <typename U>
  Model<U> cast() const;

 private:
  Conv2dParams<T> conv(const std::string& prefix) const;

  StageConfig config_;
  std::uint64_t seed_;
  ParameterMap parameters_;
};

/// Fresh network for `config`, He-initialized (fan-in) from `seed`. Every
/// parameter gets stage_of_origin = config.stage.
template <typename T = float>
Model<T> build_stage(const StageConfig& config, std::uint64_t seed);

struct TransferReport {
  int from_stage = 0;
  int to_stage = 0;
  std::vector<std::string> transferred;
  std::vector<std::string> added;
  std::size_t transferred_elements = 0;
  std::size_t added_elements = 0;
};

template <typename T>
struct GrowResult {
  Model<T> model;
  TransferReport report;
};

/// Wraps `model` with one new outer encoder/decoder level at twice the
/// resolution. Existing parameters are copied bit for bit under their names
/// and keep their stage of origin; new ones are tagged next.stage.
template <typename T>
GrowResult<T> grow(const Model<T>& model, const StageConfig& next);

template <typename T>
std::size_t param_count(const Model<T>& model);

/// Deterministic per-parameter seed derived from the model seed and name.
std::uint64_t parameter_seed(std::uint64_t model_seed, const std::string& name);

}  // namespace pgu
