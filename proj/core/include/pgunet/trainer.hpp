#pragma once

// RMSprop with two learning-rate groups keyed on a parameter's stage of
// origin, the stage-by-stage training loop and the progressive schedule.

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "pgunet/data.hpp"
#include "pgunet/metrics.hpp"
#include "pgunet/model.hpp"

namespace pgu {

using ParameterMap = Model<float>::ParameterMap;

struct RmspropState {
  double decay = 0.99;
  double epsilon = 1e-8;
  std::map<std::string, std::vector<float>> mean_square;  // created on first step
};

using LearningRateFn = std::function<double(int stage_of_origin)>;

/// Called once per parameter per step with the learning rate it received.
using StepObserver = std::function<void(const std::string& name, int stage_of_origin, double lr)>;

/// v <- decay*v + (1-decay)*g^2;  p <- p - lr(origin)*g/(sqrt(v)+eps).
/// Every parameter must carry a gradient. Nothing is modified if any
/// gradient is non-finite (NumericalError) or missing (GraphError).
void rmsprop_step(ParameterMap& params, RmspropState& state, const LearningRateFn& lr_for,
                  const StepObserver& observer = {});

/// lr_transferred for parameters older than config.stage, lr_new otherwise.
LearningRateFn stage_learning_rates(const StageConfig& config);

struct TrainSchedule {
  std::vector<StageConfig> stages;  // stage numbers 1, 2, ... in order
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double rms_decay = 0.99;
  double rms_epsilon = 1e-8;

  void validate() const;
  RmspropState fresh_state() const { return {rms_decay, rms_epsilon, {}}; }
};

/// Stages 1..num_stages over `widths` (see make_stage_config), each with
/// `epochs` epochs.
TrainSchedule make_schedule(int num_stages, const std::vector<std::size_t>& widths, std::size_t epochs,
                            std::uint64_t seed);

struct StageReport {
  int stage = 0;
  std::size_t resolution = 0;
  std::vector<double> epoch_loss;  // mean training loss per epoch
  std::vector<double> val_zsi;     // mean validation ZSI per epoch (empty without validation data)
  std::size_t steps = 0;
  double seconds = 0.0;
};

struct TrainHooks {
  StepObserver on_update;
  std::function<void(const StageReport& so_far)> on_epoch;
  std::function<void(const Model<float>& model, const RmspropState& state, const StageReport& report)> on_stage_end;
  std::function<void(const Model<float>& grown, const TransferReport& report)> on_grow;
};

/// Runs model.config().epochs epochs over `train` (shuffled per epoch from
/// the schedule seed, last partial batch kept) and scores `val` after each
/// epoch when given.
StageReport train_stage(Model<float>& model, RmspropState& state, const Dataset& train, const Dataset* val,
                        const TrainSchedule& schedule, const TrainHooks& hooks = {});

/// Metrics of `model` over `data`, evaluated in batches without recording
/// gradients.
MetricsReport evaluate(const Model<float>& model, const Dataset& data, std::size_t batch_size = 8,
                       const ForwardOptions& options = {});

struct TrainRun {
  Model<float> model;
  std::vector<StageReport> stages;
  std::vector<TransferReport> transfers;
  std::vector<std::filesystem::path> checkpoints;
};

/// Builds stage 1, then alternates train_stage and grow through the last
/// scheduled stage. Data is given at the last stage's resolution and
/// resampled down per stage. With a checkpoint directory, writes
/// stage<s>.pgu after every stage. Optimizer state starts fresh per stage.
TrainRun run_progressive(const TrainSchedule& schedule, const Dataset& train, const Dataset* val,
                         const TrainHooks& hooks = {}, const std::filesystem::path& checkpoint_dir = {});

/// Trains the last scheduled stage from scratch (the non-progressive
/// baselines) for `epochs` epochs.
TrainRun run_direct(const TrainSchedule& schedule, std::size_t epochs, const Dataset& train, const Dataset* val,
                    const TrainHooks& hooks = {}, const std::filesystem::path& checkpoint_dir = {});

}  // namespace pgu
