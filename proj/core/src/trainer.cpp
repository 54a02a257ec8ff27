#include "pgunet/trainer.hpp"

#include <chrono>
#include <cmath>
#include <optional>
#include <random>

#include "pgunet/checkpoint.hpp"
#include "pgunet/seed.hpp"

namespace pgu {

namespace {

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int stage, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(derive_seed(seed, (static_cast<std::uint64_t>(stage) << 32) | epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

Dataset at_resolution(const Dataset& data, std::size_t resolution) {
  return data.resolution == resolution ? data : resample(data, resolution);
}

void check_finest(const Dataset& data, std::size_t resolution, const char* what) {
  if (data.resolution != resolution) {
    throw DataError(std::string(what) + " data is at " + std::to_string(data.resolution) +
                    " px, the schedule ends at " + std::to_string(resolution) + " px");
  }
}

}  // namespace

void rmsprop_step(ParameterMap& params, RmspropState& state, const LearningRateFn& lr_for,
                  const StepObserver& observer) {
  for (const auto& [name, p] : params) {
    if (!p.tensor.has_grad()) throw GraphError("rmsprop_step: no gradient for " + name);
    detail::check_finite<float>(p.tensor.impl()->grad, "rmsprop_step gradient");
  }
  const double decay = state.decay, eps = state.epsilon;
  for (auto& [name, p] : params) {
    const double lr = lr_for(p.stage_of_origin);
    if (!(lr > 0.0)) throw ConfigError("rmsprop_step: learning rate must be positive");
    auto& v = state.mean_square[name];
    if (v.size() != p.tensor.numel()) v.assign(p.tensor.numel(), 0.0f);
    const auto& g = p.tensor.impl()->grad;
    auto w = p.tensor.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double vi = decay * v[i] + (1.0 - decay) * gi * gi;
      v[i] = static_cast<float>(vi);
      w[i] = static_cast<float>(w[i] - lr * gi / (std::sqrt(vi) + eps));
    }
    if (observer) observer(name, p.stage_of_origin, lr);
  }
}

LearningRateFn stage_learning_rates(const StageConfig& config) {
  return [stage = config.stage, lr_new = config.lr_new, lr_old = config.lr_transferred](int origin) {
    return origin < stage ? lr_old : lr_new;
  };
}

void TrainSchedule::validate() const {
  if (stages.empty()) throw ConfigError("schedule has no stages");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].stage != static_cast<int>(i) + 1) {
      throw ConfigError("schedule stages must be numbered 1.." + std::to_string(stages.size()));
    }
    stages[i].validate();
  }
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(rms_decay > 0.0 && rms_decay < 1.0)) throw ConfigError("rms_decay must lie in (0, 1)");
  if (!(rms_epsilon > 0.0)) throw ConfigError("rms_epsilon must be positive");
}

TrainSchedule make_schedule(int num_stages, const std::vector<std::size_t>& widths, std::size_t epochs,
                            std::uint64_t seed) {
  TrainSchedule schedule;
  schedule.seed = seed;
  for (int s = 1; s <= num_stages; ++s) {
    auto c = make_stage_config(s, widths);
    c.epochs = epochs;
    schedule.stages.push_back(c);
  }
  schedule.validate();
  return schedule;
}

MetricsReport evaluate(const Model<float>& model, const Dataset& data, std::size_t batch_size,
                       const ForwardOptions& options) {
  if (data.resolution != model.config().resolution()) {
    throw DataError("evaluate: data is at " + std::to_string(data.resolution) + " px, the model expects " +
                    std::to_string(model.config().resolution()));
  }
  NoGradGuard no_grad;
  MetricsReport report;
  const std::size_t plane = data.resolution * data.resolution;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch batch = make_batch(data, idx);
    const auto pred = binarize(model.forward(batch.images, options));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::vector<std::uint8_t> gt(batch.labels.begin() + b * plane, batch.labels.begin() + (b + 1) * plane);
      report.add(data.samples[idx[b]].source_id, pred[b], nucleus_mask(gt));
    }
  }
  return report;
}

StageReport train_stage(Model<float>& model, RmspropState& state, const Dataset& train, const Dataset* val,
                        const TrainSchedule& schedule, const TrainHooks& hooks) {
  const StageConfig& config = model.config();
  if (train.empty()) throw DataError("train_stage: empty training set");
  if (train.resolution != config.resolution()) {
    throw DataError("train_stage: stage " + std::to_string(config.stage) + " trains at " +
                    std::to_string(config.resolution()) + " px, data is at " + std::to_string(train.resolution));
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto lr_for = stage_learning_rates(config);
  StageReport report;
  report.stage = config.stage;
  report.resolution = config.resolution();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = epoch_order(train.size(), schedule.seed, config.stage, epoch);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
      const std::vector<std::size_t> idx(order.begin() + start,
                                         order.begin() + std::min(order.size(), start + schedule.batch_size));
      const Batch batch = make_batch(train, idx);
      model.zero_grad();
      const Tensor loss = softmax_ce_loss(model.forward(batch.images), batch.labels);
      backward(loss);
      rmsprop_step(model.parameters(), state, lr_for, hooks.on_update);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
      ++report.steps;
    }
    report.epoch_loss.push_back(loss_sum / static_cast<double>(train.size()));
    if (val && !val->empty()) report.val_zsi.push_back(evaluate(model, *val, schedule.batch_size).zsi_summary().mean);
    if (hooks.on_epoch) hooks.on_epoch(report);
  }
  model.zero_grad();
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

TrainRun run_progressive(const TrainSchedule& schedule, const Dataset& train, const Dataset* val,
                         const TrainHooks& hooks, const std::filesystem::path& checkpoint_dir) {
  schedule.validate();
  const std::size_t finest = schedule.stages.back().resolution();
  check_finest(train, finest, "training");
  if (val) check_finest(*val, finest, "validation");

  std::optional<Model<float>> model;
  std::vector<StageReport> reports;
  std::vector<TransferReport> transfers;
  std::vector<std::filesystem::path> checkpoints;
  for (const StageConfig& config : schedule.stages) {
    if (!model) {
      model.emplace(build_stage<float>(config, schedule.seed));
    } else {
      auto grown = grow(*model, config);
      transfers.push_back(grown.report);
      model.emplace(std::move(grown.model));
      if (hooks.on_grow) hooks.on_grow(*model, transfers.back());
    }
    const Dataset stage_train = at_resolution(train, config.resolution());
    const std::optional<Dataset> stage_val = val ? std::optional(at_resolution(*val, config.resolution())) : std::nullopt;
    RmspropState state = schedule.fresh_state();
    reports.push_back(train_stage(*model, state, stage_train, stage_val ? &*stage_val : nullptr, schedule, hooks));
    if (!checkpoint_dir.empty()) {
      std::filesystem::create_directories(checkpoint_dir);
      checkpoints.push_back(checkpoint_dir / ("stage" + std::to_string(config.stage) + ".pgu"));
      save_checkpoint(*model, state, config.epochs, checkpoints.back());
    }
    if (hooks.on_stage_end) hooks.on_stage_end(*model, state, reports.back());
  }
  return {std::move(*model), std::move(reports), std::move(transfers), std::move(checkpoints)};
}

TrainRun run_direct(const TrainSchedule& schedule, std::size_t epochs, const Dataset& train, const Dataset* val,
                    const TrainHooks& hooks, const std::filesystem::path& checkpoint_dir) {
  schedule.validate();
  StageConfig config = schedule.stages.back();
  config.epochs = epochs;
  check_finest(train, config.resolution(), "training");
  if (val) check_finest(*val, config.resolution(), "validation");

  Model<float> model = build_stage<float>(config, schedule.seed);
  RmspropState state = schedule.fresh_state();
  TrainRun run{model, {}, {}, {}};
  run.stages.push_back(train_stage(run.model, state, train, val, schedule, hooks));
  if (!checkpoint_dir.empty()) {
    std::filesystem::create_directories(checkpoint_dir);
    run.checkpoints.push_back(checkpoint_dir / ("stage" + std::to_string(config.stage) + ".pgu"));
    save_checkpoint(run.model, state, epochs, run.checkpoints.back());
  }
  if (hooks.on_stage_end) hooks.on_stage_end(run.model, state, run.stages.back());
  return run;
}

}  // namespace pgu
