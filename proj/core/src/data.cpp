#include "pgunet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <set>

#include "pgunet/seed.hpp"

namespace pgu {

namespace {

bool is_nucleus(std::uint8_t v) { return v == 2 || v == 3; }

bool valid_resolution(std::size_t r) { return r >= 32 && (r & (r - 1)) == 0; }

struct Ellipse {
  double cx, cy, a, b, theta;

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (dx * c + dy * s) / a;
    const double v = (-dx * s + dy * c) / b;
    return u * u + v * v <= 1.0;
  }
};

}  // namespace

const char* to_string(NucleusSize size) { return size == NucleusSize::kLarge ? "large" : "small"; }

const char* to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::kTrain: return "train";
    case SplitTag::kVal: return "val";
    case SplitTag::kTest: return "test";
    case SplitTag::kAll: break;
  }
  return "all";
}

void Dataset::validate() const {
  std::set<std::string> ids;
  for (const auto& s : samples) {
    if (s.resolution() != resolution || s.image.dim(1) != resolution || s.image.dim(0) != 3) {
      throw DataError("sample " + s.source_id + " has shape " + shape_str(s.image.shape()) +
                      ", dataset resolution is " + std::to_string(resolution));
    }
    if (s.mask.size() != resolution * resolution) throw DataError("sample " + s.source_id + ": mask size mismatch");
    if (!ids.insert(s.source_id).second) throw DataError("duplicate source_id " + s.source_id);
  }
}

void normalize_channels(std::vector<float>& chw, std::size_t channels) {
  if (channels == 0 || chw.size() % channels != 0) throw ShapeError("normalize_channels: bad buffer size");
  const std::size_t plane = chw.size() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    float* p = chw.data() + c * plane;
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += p[i];
    mean /= static_cast<double>(plane);
    double var = 0.0;
    for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mean) * (p[i] - mean);
    const double stddev = std::sqrt(var / static_cast<double>(plane));
    if (stddev < 1e-12) {
      std::fill(p, p + plane, 0.0f);
      continue;
    }
    for (std::size_t i = 0; i < plane; ++i) p[i] = static_cast<float>((p[i] - mean) / stddev);
  }
}

NucleusSize classify_nucleus_size(const std::vector<std::uint8_t>& mask, std::size_t resolution, double threshold) {
  if (mask.size() != resolution * resolution) throw ShapeError("classify_nucleus_size: mask size mismatch");
  const auto count = std::count_if(mask.begin(), mask.end(), is_nucleus);
  if (count == 0) throw DataError("mask has no nucleus pixels");
  const double scale = static_cast<double>(resolution) / kFinestResolution;
  return static_cast<double>(count) > threshold * scale * scale ? NucleusSize::kLarge : NucleusSize::kSmall;
}

void relabel_nuclei(std::vector<std::uint8_t>& mask, NucleusSize size) {
  const auto label = static_cast<std::uint8_t>(size == NucleusSize::kLarge ? MaskClass::kLargeNucleus
                                                                            : MaskClass::kSmallNucleus);
  for (auto& v : mask) {
    if (is_nucleus(v)) v = label;
  }
}

Sample make_sample(std::vector<float> rgb, std::vector<std::uint8_t> mask, std::size_t resolution,
                   std::string source_id, double size_threshold) {
  if (rgb.size() != 3 * resolution * resolution || mask.size() != resolution * resolution) {
    throw ShapeError("make_sample: buffers do not match resolution " + std::to_string(resolution));
  }
  for (auto v : mask) {
    if (v > 3) throw DataError(source_id + ": mask value " + std::to_string(v) + " outside {0,1,2,3}");
  }
  Sample sample;
  sample.nucleus_size = classify_nucleus_size(mask, resolution, size_threshold);
  relabel_nuclei(mask, sample.nucleus_size);
  normalize_channels(rgb, 3);
  sample.image = Tensor::from_data({3, resolution, resolution}, std::move(rgb));
  sample.mask = std::move(mask);
  sample.source_id = std::move(source_id);
  return sample;
}

std::vector<float> area_downsample(const std::vector<float>& chw, std::size_t channels, std::size_t resolution,
                                   std::size_t target) {
  const std::size_t r = resolution;
  if (target == 0 || r % target != 0 || chw.size() != channels * r * r) {
    throw ShapeError("area_downsample: cannot reduce " + std::to_string(r) + " px to " + std::to_string(target));
  }
  const std::size_t f = r / target;
  std::vector<float> out(channels * target * target);
  const double inv = 1.0 / static_cast<double>(f * f);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < target; ++i) {
      for (std::size_t j = 0; j < target; ++j) {
        double acc = 0.0;
        for (std::size_t di = 0; di < f; ++di) {
          const float* row = chw.data() + (c * r + i * f + di) * r + j * f;
          for (std::size_t dj = 0; dj < f; ++dj) acc += row[dj];
        }
        out[(c * target + i) * target + j] = static_cast<float>(acc * inv);
      }
    }
  }
  return out;
}

Dataset resample(const Dataset& dataset, std::size_t target) {
  const std::size_t r = dataset.resolution;
  if (!valid_resolution(target) || target > r || r % target != 0) {
    throw DataError("cannot resample " + std::to_string(r) + " px data to " + std::to_string(target) + " px");
  }
  const std::size_t f = r / target;
  Dataset out;
  out.split = dataset.split;
  out.resolution = target;
  out.samples.reserve(dataset.size());
  for (const auto& s : dataset.samples) {
    if (f == 1) {
      out.samples.push_back(s);
      continue;
    }
    std::vector<float> src(s.image.data().begin(), s.image.data().end());
    auto rgb = area_downsample(src, 3, r, target);
    normalize_channels(rgb, 3);
    std::vector<std::uint8_t> mask(target * target);
    for (std::size_t i = 0; i < target; ++i) {
      for (std::size_t j = 0; j < target; ++j) mask[i * target + j] = s.mask[(i * f + f / 2) * r + j * f + f / 2];
    }
    Sample t;
    t.image = Tensor::from_data({3, target, target}, std::move(rgb));
    t.mask = std::move(mask);
    t.source_id = s.source_id;
    t.nucleus_size = s.nucleus_size;
    out.samples.push_back(std::move(t));
  }
  return out;
}

DatasetSplits split(const Dataset& dataset, const SplitRatios& ratios, std::uint64_t seed) {
  if (dataset.empty()) throw DataError("split: empty dataset");
  if (!(ratios.train > 0) || !(ratios.val > 0) || !(ratios.test > 0) ||
      std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be positive and sum to 1");
  }
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dataset.samples[a].source_id < dataset.samples[b].source_id;
  });
  std::mt19937_64 rng(derive_seed(seed, 0x73706c6974ULL));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

  const auto n = static_cast<double>(order.size());
  const auto n_train = std::min(order.size(), static_cast<std::size_t>(std::lround(n * ratios.train)));
  const auto n_val = std::min(order.size() - n_train, static_cast<std::size_t>(std::lround(n * ratios.val)));

  DatasetSplits out;
  Dataset* parts[] = {&out.train, &out.val, &out.test};
  const SplitTag tags[] = {SplitTag::kTrain, SplitTag::kVal, SplitTag::kTest};
  for (int k = 0; k < 3; ++k) {
    parts[k]->split = tags[k];
    parts[k]->resolution = dataset.resolution;
  }
  for (std::size_t i = 0; i < order.size(); ++i) {
    Dataset& part = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
    part.samples.push_back(dataset.samples[order[i]]);
  }
  return out;
}

SynthImage synth_render(std::size_t index, std::size_t resolution, std::uint64_t seed, const SynthOptions& options) {
  if (resolution == 0) throw ShapeError("synth_render: resolution must be positive");
  std::mt19937_64 rng(derive_seed(seed, index));
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  constexpr double kPi = std::numbers::pi;

  // Geometry in 256-px coordinates.
  Ellipse cyto{128 + uniform(-20, 20), 128 + uniform(-20, 20), uniform(75, 110), uniform(75, 110), uniform(0, kPi)};
  const double area = std::exp(uniform(std::log(800.0), std::log(6000.0)));
  const double ratio = uniform(0.65, 1.0);
  const double a_n = std::sqrt(area / (kPi * ratio));
  // The nucleus sits inside a disk that keeps a 14 px rim of cytoplasm
  // around it, enough for one pixel of separation down to 32x32.
  const double reach = std::max(0.0, std::min(cyto.a, cyto.b) - a_n - 14.0);
  const double rho = reach * uniform(0, 1), phi = uniform(0, 2 * kPi);
  Ellipse nucleus{cyto.cx + rho * std::cos(phi), cyto.cy + rho * std::sin(phi), a_n, a_n * ratio, uniform(0, kPi)};

  const double bg[3] = {0.88 + uniform(-0.05, 0.05), 0.82 + uniform(-0.05, 0.05), 0.86 + uniform(-0.05, 0.05)};
  const double cy[3] = {0.55 + uniform(-0.08, 0.08), 0.65 + uniform(-0.08, 0.08), 0.82 + uniform(-0.08, 0.08)};
  const double nu[3] = {0.32 + uniform(-0.06, 0.06), 0.22 + uniform(-0.06, 0.06), 0.48 + uniform(-0.06, 0.06)};
  const double fx = uniform(0.02, 0.08), fy = uniform(0.02, 0.08), px = uniform(0, 2 * kPi), py = uniform(0, 2 * kPi);
  const double gx = uniform(0.1, 0.25), gy = uniform(0.1, 0.25);

  const std::size_t r = resolution;
  const double scale = static_cast<double>(kFinestResolution) / static_cast<double>(r);
  SynthImage out;
  out.resolution = r;
  out.rgb.assign(3 * r * r, 0.0f);
  out.mask.assign(r * r, 0);
  std::normal_distribution<double> noise(0.0, options.noise_stddev);
  bool any_nucleus = false;
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < r; ++j) {
      const double x = (static_cast<double>(j) + 0.5) * scale, y = (static_cast<double>(i) + 0.5) * scale;
      std::uint8_t label = 0;
      if (nucleus.contains(x, y)) {
        label = 2;
        any_nucleus = true;
      } else if (cyto.contains(x, y)) {
        label = 1;
      }
      out.mask[i * r + j] = label;
    }
  }
  if (!any_nucleus) {
    const auto i = std::min(r - 1, static_cast<std::size_t>(nucleus.cy / scale));
    const auto j = std::min(r - 1, static_cast<std::size_t>(nucleus.cx / scale));
    out.mask[i * r + j] = 2;
  }
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < r; ++j) {
      const double x = (static_cast<double>(j) + 0.5) * scale, y = (static_cast<double>(i) + 0.5) * scale;
      const std::uint8_t label = out.mask[i * r + j];
      const double* base = label == 2 ? nu : (label == 1 ? cy : bg);
      const double texture = label == 0   ? 0.04 * std::sin(fx * x + px) * std::sin(fy * y + py)
                              : label == 1 ? 0.03 * std::sin(gx * x + px) * std::sin(gy * y)
                                           : 0.02 * std::sin(gx * (x + y));
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = base[c] + texture + noise(rng);
        out.rgb[(c * r + i) * r + j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return out;
}

Dataset synth_generate(std::size_t n, std::size_t resolution, std::uint64_t seed, const SynthOptions& options) {
  if (n == 0) throw DataError("synth_generate: n must be at least 1");
  Dataset out;
  out.resolution = resolution;
  out.samples.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    auto img = synth_render(k, resolution, seed, options);
    char id[32];
    std::snprintf(id, sizeof id, "synth-%06zu", k);
    out.samples.push_back(make_sample(std::move(img.rgb), std::move(img.mask), resolution, id, options.size_threshold));
  }
  return out;
}

Batch make_batch(const Dataset& dataset, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw DataError("make_batch: no samples requested");
  const std::size_t r = dataset.resolution;
  const std::size_t plane = 3 * r * r;
  std::vector<float> images(indices.size() * plane);
  Batch batch;
  batch.labels.resize(indices.size() * r * r);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Sample& s = dataset.samples.at(indices[b]);
    if (s.resolution() != r) throw DataError("make_batch: sample " + s.source_id + " has the wrong resolution");
    std::copy(s.image.data().begin(), s.image.data().end(), images.begin() + b * plane);
    std::copy(s.mask.begin(), s.mask.end(), batch.labels.begin() + b * r * r);
  }
  batch.images = Tensor::from_data({indices.size(), 3, r, r}, std::move(images));
  return batch;
}

}  // namespace pgu
