#include "pgunet_cli/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace pgu::cli {

namespace pt = boost::property_tree;

namespace {

const std::set<std::string> kRunKeys{"seed", "output", "num_stages", "batch_size", "widths", "rms_decay",
                                     "rms_epsilon"};
const std::set<std::string> kDataKeys{"synthetic", "path", "count", "size_threshold", "split"};
const std::set<std::string> kStageKeys{"epochs", "lr_new", "lr_transferred", "residual"};

template <typename T>
T value(const pt::ptree& section, const std::string& where, const std::string& key, T fallback) {
  const auto child = section.get_child_optional(key);
  if (!child) return fallback;
  const auto parsed = child->get_value_optional<T>();
  if (!parsed) throw ConfigError("[" + where + "] " + key + ": cannot parse '" + child->data() + "'");
  return *parsed;
}

bool flag(const pt::ptree& section, const std::string& where, const std::string& key, bool fallback) {
  const auto child = section.get_child_optional(key);
  if (!child) return fallback;
  const std::string v = child->data();
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("[" + where + "] " + key + ": expected a boolean, got '" + v + "'");
}

template <typename T>
std::vector<T> list(const std::string& text, const std::string& what) {
  std::vector<T> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::istringstream one(item);
    T v{};
    if (!(one >> v) || !(one >> std::ws).eof()) throw ConfigError(what + ": cannot parse '" + text + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(what + ": empty list");
  return out;
}

void check_keys(const pt::ptree& section, const std::string& name, const std::set<std::string>& allowed) {
  for (const auto& [key, child] : section) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in [" + name + "]");
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace

RunConfig parse_run_config(std::istream& in, const std::filesystem::path& base_dir) {
  // read_ini drops sections without keys, so headers are collected here.
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::set<std::string> headers;
  {
    std::istringstream lines(text);
    for (std::string line; std::getline(lines, line);) {
      const auto first = line.find_first_not_of(" \t");
      const auto last = line.find_last_not_of(" \t\r");
      if (first != std::string::npos && line[first] == '[' && line[last] == ']') {
        headers.insert(line.substr(first + 1, last - first - 1));
      }
    }
  }
  pt::ptree tree;
  try {
    std::istringstream ini(text);
    pt::read_ini(ini, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  const pt::ptree empty;
  const auto section = [&](const std::string& name) -> const pt::ptree& {
    const auto child = tree.get_child_optional(name);
    return child ? *child : empty;
  };

  if (!headers.count("run")) throw ConfigError("missing section [run]");
  const pt::ptree& run_section = section("run");
  const pt::ptree* run = &run_section;
  check_keys(*run, "run", kRunKeys);
  const int num_stages = value<int>(*run, "run", "num_stages", kNumStages);
  if (num_stages < 1 || num_stages > kNumStages) {
    throw ConfigError("[run] num_stages must be in 1.." + std::to_string(kNumStages));
  }
  for (const auto& [name, child] : tree) {
    if (!child.data().empty()) throw ConfigError("key '" + name + "' outside any section");
  }
  for (const auto& name : headers) {
    const bool is_stage = name.rfind("stage", 0) == 0 && name.size() == 6 && name[5] >= '1' &&
                          name[5] < '1' + num_stages;
    if (name != "run" && name != "data" && name != "colors" && !is_stage) {
      throw ConfigError("unknown section [" + name + "]");
    }
  }

  RunConfig config;
  if (!run->get_child_optional("seed")) throw ConfigError("[run] seed is required");
  config.seed = value<std::uint64_t>(*run, "run", "seed", 0);
  if (const auto out = run->get_optional<std::string>("output")) config.output = resolve(base_dir, *out);
  if (const auto w = run->get_optional<std::string>("widths")) config.widths = list<std::size_t>(*w, "[run] widths");

  TrainSchedule& schedule = config.schedule;
  schedule.seed = config.seed;
  schedule.batch_size = value<std::size_t>(*run, "run", "batch_size", 8);
  schedule.rms_decay = value<double>(*run, "run", "rms_decay", 0.99);
  schedule.rms_epsilon = value<double>(*run, "run", "rms_epsilon", 1e-8);
  for (int s = 1; s <= num_stages; ++s) {
    const std::string name = "stage" + std::to_string(s);
    if (!headers.count(name)) throw ConfigError("missing section [" + name + "]");
    const pt::ptree* stage = &section(name);
    check_keys(*stage, name, kStageKeys);
    StageConfig c = make_stage_config(s, config.widths);
    c.epochs = value<std::size_t>(*stage, name, "epochs", c.epochs);
    c.lr_new = value<double>(*stage, name, "lr_new", c.lr_new);
    c.lr_transferred = value<double>(*stage, name, "lr_transferred", c.lr_transferred);
    c.residual = flag(*stage, name, "residual", c.residual);
    schedule.stages.push_back(c);
  }
  schedule.validate();

  const pt::ptree& data = section("data");
  check_keys(data, "data", kDataKeys);
  config.data.synthetic = flag(data, "data", "synthetic", false);
  if (const auto p = data.get_optional<std::string>("path")) config.data.path = resolve(base_dir, *p);
  config.data.count = value<std::size_t>(data, "data", "count", config.data.count);
  config.data.herlev.size_threshold = value<double>(data, "data", "size_threshold", kDefaultSizeThreshold);
  if (const auto r = data.get_optional<std::string>("split")) {
    const auto ratios = list<double>(*r, "[data] split");
    if (ratios.size() != 3) throw ConfigError("[data] split needs three ratios");
    config.data.ratios = {ratios[0], ratios[1], ratios[2]};
  }
  if (!config.data.synthetic && config.data.path.empty()) {
    throw ConfigError("[data] needs either synthetic = true or a path");
  }
  if (config.data.synthetic && config.data.count < 3) throw ConfigError("[data] count must be at least 3");

  const pt::ptree& colors = section("colors");
  if (!colors.empty()) {
    config.data.herlev.colors.colors.clear();
    for (const auto& [key, child] : colors) {
      const auto rgb = list<int>(key, "[colors] " + key);
      if (rgb.size() != 3 || *std::min_element(rgb.begin(), rgb.end()) < 0 ||
          *std::max_element(rgb.begin(), rgb.end()) > 255) {
        throw ConfigError("[colors] key '" + key + "' must be R,G,B with components in 0..255");
      }
      config.data.herlev.colors.colors[Rgb{static_cast<std::uint8_t>(rgb[0]), static_cast<std::uint8_t>(rgb[1]),
                                           static_cast<std::uint8_t>(rgb[2])}] = parse_region(child.data());
    }
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_run_config(in, path.parent_path());
}

DatasetSplits build_splits(const RunConfig& config, std::vector<std::string>* rejected) {
  const std::size_t finest = config.finest_resolution();
  Dataset data;
  if (config.data.synthetic) {
    SynthOptions options;
    options.size_threshold = config.data.herlev.size_threshold;
    data = synth_generate(config.data.count, finest, config.seed, options);
  } else {
    auto load = load_herlev(config.data.path, config.data.herlev);
    if (rejected) rejected->insert(rejected->end(), load.rejected.begin(), load.rejected.end());
    if (load.dataset.size() < 3) {
      throw DataError("need at least 3 usable samples in " + config.data.path.string() + ", found " +
                      std::to_string(load.dataset.size()));
    }
    data = resample(load.dataset, finest);
  }
  return split(data, config.data.ratios, config.seed);
}

}  // namespace pgu::cli
