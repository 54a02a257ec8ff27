#include "pgunet/model.hpp"

#include <cmath>

#include "pgunet/tensor_ops.hpp"

namespace pgu {

namespace {

std::string level_name(const char* kind, std::size_t resolution) {
  return std::string(kind) + ".r" + std::to_string(resolution);
}

template <typename T>
BasicTensor<T> init_weight(const LayerSpec& spec, std::uint64_t model_seed) {
  const Shape shape{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel};
  if (spec.zero_init) return BasicTensor<T>::zeros(shape);
  const double fan_in = static_cast<double>(spec.in_channels * spec.kernel * spec.kernel);
  return BasicTensor<T>::randn(shape, parameter_seed(model_seed, spec.prefix + ".weight"), std::sqrt(2.0 / fan_in));
}

template <typename T>
void add_layer(typename Model<T>::ParameterMap& params, const LayerSpec& spec, std::uint64_t seed, int origin) {
  auto weight = init_weight<T>(spec, seed);
  auto bias = BasicTensor<T>::zeros({spec.out_channels});
  weight.set_requires_grad();
  bias.set_requires_grad();
  for (auto& [suffix, tensor] : {std::pair{".weight", weight}, std::pair{".bias", bias}}) {
    const std::string name = spec.prefix + suffix;
    if (!params.emplace(name, Parameter<T>{name, tensor, origin}).second) {
      throw ShapeError("duplicate parameter name " + name);
    }
  }
}

}  // namespace

void StageConfig::validate() const {
  if (stage < 1 || stage > kNumStages) {
    throw ConfigError("stage must be in 1.." + std::to_string(kNumStages) + ", got " + std::to_string(stage));
  }
  if (widths.size() != depth() + 1) {
    throw ConfigError("stage " + std::to_string(stage) + " needs " + std::to_string(depth() + 1) +
                      " channel widths, got " + std::to_string(widths.size()));
  }
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] == 0) throw ConfigError("channel widths must be positive");
    if (i > 0 && widths[i] < widths[i - 1]) throw ConfigError("channel widths must be non-decreasing");
  }
  if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
  if (!(lr_new > 0.0) || !(lr_transferred > 0.0)) throw ConfigError("learning rates must be positive");
}

StageConfig make_stage_config(int stage, const std::vector<std::size_t>& all_widths) {
  if (stage < 1 || static_cast<std::size_t>(stage) + 1 > all_widths.size()) {
    throw ConfigError("not enough widths for stage " + std::to_string(stage));
  }
  StageConfig config;
  config.stage = stage;
  config.widths.assign(all_widths.end() - (stage + 1), all_widths.end());
  return config;
}

std::vector<LayerSpec> layer_specs(const StageConfig& config) {
  config.validate();
  const auto& w = config.widths;
  const std::size_t depth = config.depth();
  std::vector<LayerSpec> specs;
  for (std::size_t l = 0; l < depth; ++l) {
    const auto prefix = level_name("enc", config.resolution() >> l);
    specs.push_back({prefix + ".conv1", kInputChannels, w[l], 3, false});
    if (l > 0) specs.push_back({prefix + ".link", w[l - 1], w[l], 3, false});
    specs.push_back({prefix + ".conv2", w[l], w[l], 3, false});
  }
  specs.push_back({"bottleneck.conv1", w[depth - 1], w[depth], 3, false});
  specs.push_back({"bottleneck.conv2", w[depth], w[depth], 3, false});
  for (std::size_t l = 0; l < depth; ++l) {
    const std::size_t res = config.resolution() >> l;
    const auto prefix = level_name("dec", res);
    specs.push_back({prefix + ".conv1", w[l] + w[l + 1], w[l], 3, false});
    specs.push_back({prefix + ".conv2", w[l], w[l], 3, false});
    if (w[l + 1] != w[l]) specs.push_back({prefix + ".proj", w[l + 1], w[l], 1, true});
    specs.push_back({level_name("head", res), w[l], config.num_classes, 1, false});
  }
  return specs;
}

std::uint64_t parameter_seed(std::uint64_t model_seed, const std::string& name) {
  // FNV-1a over the name, mixed with the model seed (splitmix64 finalizer).
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::uint64_t z = h ^ (model_seed + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
BasicTensor<T> ResidualDecoderBlock<T>::fine_branch(const BasicTensor<T>& coarse, const BasicTensor<T>& skip) const {
  auto x = concat_channels(skip, upsample2_nearest(coarse));
  return relu(conv2d(relu(conv2d(x, conv1)), conv2));
}

template <typename T>
BasicTensor<T> ResidualDecoderBlock<T>::coarse_branch(const BasicTensor<T>& coarse) const {
  // A 1x1 convolution commutes with nearest upsampling, so project first.
  return upsample2_nearest(projection ? conv2d(coarse, *projection) : coarse);
}

template <typename T>
BasicTensor<T> ResidualDecoderBlock<T>::forward(const BasicTensor<T>& coarse, const BasicTensor<T>& skip) const {
  return residual_merge(coarse, fine_branch(coarse, skip), projection ? &*projection : nullptr);
}

template <typename T>
BasicTensor<T> residual_merge(const BasicTensor<T>& coarse, const BasicTensor<T>& fine,
                              const Conv2dParams<T>* projection) {
  if (coarse.rank() != 4 || fine.rank() != 4) throw ShapeError("residual_merge: expected [N,C,H,W] operands");
  if (fine.dim(0) != coarse.dim(0) || fine.dim(2) != 2 * coarse.dim(2) || fine.dim(3) != 2 * coarse.dim(3)) {
    throw ShapeError("residual_merge: fine extent " + shape_str(fine.shape()) + " is not twice coarse extent " +
                     shape_str(coarse.shape()));
  }
  auto projected = projection ? conv2d(coarse, *projection) : coarse;
  if (projected.dim(1) != fine.dim(1)) {
    throw ShapeError("residual_merge: coarse branch has " + std::to_string(projected.dim(1)) +
                     " channels, fine branch " + std::to_string(fine.dim(1)));
  }
  return add(fine, upsample2_nearest(projected));
}

template <typename T>
Model<T>::Model(StageConfig config, std::uint64_t seed, ParameterMap parameters)
    : config_(std::move(config)), seed_(seed), parameters_(std::move(parameters)) {
  config_.validate();
  for (const auto& spec : layer_specs(config_)) {
    for (const char* suffix : {".weight", ".bias"}) {
      auto it = parameters_.find(spec.prefix + suffix);
      if (it == parameters_.end()) throw ShapeError("model is missing parameter " + spec.prefix + suffix);
      const Shape expected = suffix[1] == 'w' ? Shape{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel}
                                              : Shape{spec.out_channels};
      if (it->second.tensor.shape() != expected) {
        throw ShapeError("parameter " + it->first + " has shape " + shape_str(it->second.tensor.shape()) +
                         ", expected " + shape_str(expected));
      }
      if (it->second.stage_of_origin < 1 || it->second.stage_of_origin > config_.stage) {
        throw ShapeError("parameter " + it->first + " has invalid stage of origin");
      }
      it->second.tensor.set_requires_grad(true);
    }
  }
  if (parameters_.size() != 2 * layer_specs(config_).size()) throw ShapeError("model has unexpected parameters");
}

template <typename T>
const Parameter<T>& Model<T>::parameter(const std::string& name) const {
  auto it = parameters_.find(name);
  if (it == parameters_.end()) throw ShapeError("no parameter named " + name);
  return it->second;
}

template <typename T>
Conv2dParams<T> Model<T>::conv(const std::string& prefix) const {
  const auto& weight = parameter(prefix + ".weight").tensor;
  const std::size_t k = weight.dim(2);
  return Conv2dParams<T>{weight, parameter(prefix + ".bias").tensor, 1, k == 3 ? 1u : 0u};
}

template <typename T>
ResidualDecoderBlock<T> Model<T>::decoder_block(std::size_t resolution) const {
  const auto prefix = level_name("dec", resolution);
  ResidualDecoderBlock<T> block{conv(prefix + ".conv1"), conv(prefix + ".conv2"), std::nullopt};
  if (parameters_.count(prefix + ".proj.weight")) block.projection = conv(prefix + ".proj");
  return block;
}

template <typename T>
BasicTensor<T> Model<T>::forward(const BasicTensor<T>& batch, const ForwardOptions& options) const {
  const std::size_t res = config_.resolution();
  if (batch.rank() != 4 || batch.dim(1) != kInputChannels || batch.dim(2) != res || batch.dim(3) != res) {
    throw ShapeError("model at stage " + std::to_string(config_.stage) + " expects [N,3," + std::to_string(res) +
                     "," + std::to_string(res) + "], got " + shape_str(batch.shape()));
  }
  const std::size_t depth = config_.depth();
  std::vector<BasicTensor<T>> skips;
  skips.reserve(depth);
  BasicTensor<T> image = batch;
  for (std::size_t l = 0; l < depth; ++l) {
    const auto prefix = level_name("enc", res >> l);
    if (l > 0) image = avgpool2(image);
    auto pre = conv2d(image, conv(prefix + ".conv1"));
    if (l > 0) pre = add(pre, conv2d(maxpool2(skips.back()), conv(prefix + ".link")));
    skips.push_back(relu(conv2d(relu(pre), conv(prefix + ".conv2"))));
  }
  auto y = relu(conv2d(relu(conv2d(maxpool2(skips.back()), conv("bottleneck.conv1"))), conv("bottleneck.conv2")));

  const bool merge = config_.residual && !options.zero_coarse_branch;
  BasicTensor<T> logits;
  for (std::size_t l = depth; l-- > 0;) {
    const std::size_t level_res = res >> l;
    const auto block = decoder_block(level_res);
    auto fine = block.fine_branch(y, skips[l]);
    y = merge ? residual_merge(y, fine, block.projection ? &*block.projection : nullptr) : fine;
    if (!merge && l > 0) continue;  // without merges only the finest head is read
    auto head = conv2d(y, conv(level_name("head", level_res)));
    logits = (merge && logits.defined()) ? residual_merge(logits, head) : head;
  }
  return logits;
}

template <typename T>
void Model<T>::zero_grad() {
  for (auto& [name, p] : parameters_) p.tensor.zero_grad();
}

template <typename T>
template <typename U>
Model<U> Model<T>::cast() const {
  typename Model<U>::ParameterMap converted;
  for (const auto& [name, p] : parameters_) {
    converted.emplace(name, Parameter<U>{name, p.tensor.template cast<U>(), p.stage_of_origin});
  }
  return Model<U>(config_, seed_, std::move(converted));
}

template <typename T>
Model<T> build_stage(const StageConfig& config, std::uint64_t seed) {
  typename Model<T>::ParameterMap params;
  for (const auto& spec : layer_specs(config)) add_layer<T>(params, spec, seed, config.stage);
  return Model<T>(config, seed, std::move(params));
}

template <typename T>
GrowResult<T> grow(const Model<T>& model, const StageConfig& next) {
  if (next.stage != model.stage() + 1) {
    throw ConfigError("grow: stage " + std::to_string(model.stage()) + " can only grow to stage " +
                      std::to_string(model.stage() + 1) + ", got " + std::to_string(next.stage));
  }
  next.validate();
  const auto& old_widths = model.config().widths;
  if (!std::equal(old_widths.begin(), old_widths.end(), next.widths.begin() + 1) ||
      next.num_classes != model.config().num_classes) {
    throw ConfigError("grow: next stage must keep the transferred levels' widths and class count");
  }

  TransferReport report;
  report.from_stage = model.stage();
  report.to_stage = next.stage;
  typename Model<T>::ParameterMap params;
  for (const auto& [name, p] : model.parameters()) {
    auto copy = p.tensor.detach();
    copy.set_requires_grad();
    params.emplace(name, Parameter<T>{name, copy, p.stage_of_origin});
    report.transferred.push_back(name);
    report.transferred_elements += p.tensor.numel();
  }
  for (const auto& spec : layer_specs(next)) {
    const bool has_weight = params.count(spec.prefix + ".weight") > 0;
    if (has_weight) {
      const Shape expected{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel};
      if (params.at(spec.prefix + ".weight").tensor.shape() != expected) {
        throw ShapeError("grow: name collision on " + spec.prefix + " with a different shape");
      }
      continue;
    }
    add_layer<T>(params, spec, model.seed(), next.stage);
    for (const char* suffix : {".weight", ".bias"}) {
      report.added.push_back(spec.prefix + suffix);
      report.added_elements += params.at(spec.prefix + suffix).tensor.numel();
    }
  }
  StageConfig config = next;
  config.residual = model.config().residual;
  return GrowResult<T>{Model<T>(std::move(config), model.seed(), std::move(params)), std::move(report)};
}

template <typename T>
std::size_t param_count(const Model<T>& model) {
  std::size_t total = 0;
  for (const auto& [name, p] : model.parameters()) total += p.tensor.numel();
  return total;
}

#define PGU_INSTANTIATE(T)                                                                                 \
  template struct ResidualDecoderBlock<T>;                                                                 \
  template BasicTensor<T> residual_merge<T>(const BasicTensor<T>&, const BasicTensor<T>&,                  \
                                            const Conv2dParams<T>*);                                       \
  template class Model<T>;                                                                                 \
  template Model<T> build_stage<T>(const StageConfig&, std::uint64_t);                                     \
  template GrowResult<T> grow<T>(const Model<T>&, const StageConfig&);                                     \
  template std::size_t param_count<T>(const Model<T>&);

PGU_INSTANTIATE(float)
PGU_INSTANTIATE(double)

#undef PGU_INSTANTIATE

template Model<double> Model<float>::cast<double>() const;
template Model<float> Model<double>::cast<float>() const;
template Model<float> Model<float>::cast<float>() const;

}  // namespace pgu
