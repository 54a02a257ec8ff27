#include "pgunet_cli/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <optional>

#include "pgunet/checkpoint.hpp"
#include "pgunet/herlev.hpp"
#include "pgunet/image_io.hpp"
#include "pgunet/nn_ops.hpp"
#include "pgunet_cli/config.hpp"
#include "pgunet_cli/gradcheck_suite.hpp"
#include "pgunet_cli/plot.hpp"

namespace pgu::cli {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config, checkpoint, data, out, split = "test";
  std::optional<std::uint64_t> seed;
  int stage = 0;
  std::size_t count = 20;
  std::size_t resolution = kFinestResolution;
  bool corrupt_conv = false;
};

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  return f;
}

const char* variant_name(const StageConfig& c, bool progressive) {
  if (progressive) return c.residual ? "PGU-net+" : "PGU-net";
  return c.residual ? "U-net+" : "U-net";
}

fs::path resolve_checkpoint(const fs::path& p, int stage) {
  if (!fs::is_directory(p)) return p;
  if (stage > 0) return p / ("stage" + std::to_string(stage) + ".pgu");
  for (int s = kNumStages; s >= 1; --s) {
    const auto candidate = p / ("stage" + std::to_string(s) + ".pgu");
    if (fs::exists(candidate)) return candidate;
  }
  throw CheckpointError("no stage<N>.pgu checkpoint in " + p.string());
}

LoadedCheckpoint load_for(const Options& o) {
  auto loaded = load_checkpoint(resolve_checkpoint(o.checkpoint, o.stage));
  if (o.stage > 0 && loaded.model.stage() != o.stage) {
    throw ConfigError("checkpoint holds stage " + std::to_string(loaded.model.stage()) + ", --stage asked for " +
                      std::to_string(o.stage));
  }
  return loaded;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig config = load_run_config(o.config);
  if (o.seed) {
    config.seed = *o.seed;
    config.schedule.seed = *o.seed;
  }
  const fs::path dir = o.out.empty() ? config.output : fs::path(o.out);
  std::vector<std::string> rejected;
  const DatasetSplits data = build_splits(config, &rejected);
  for (const auto& r : rejected) err << "skipped " << r << '\n';
  out << "data: " << data.train.size() << " train / " << data.val.size() << " val / " << data.test.size()
      << " test at " << config.finest_resolution() << " px\n";

  fs::create_directories(dir);
  TrainHooks hooks;
  hooks.on_epoch = [&](const StageReport& r) {
    out << "stage " << r.stage << " epoch " << r.epoch_loss.size() << " loss " << std::setprecision(5)
        << r.epoch_loss.back();
    if (!r.val_zsi.empty()) out << " val_zsi " << r.val_zsi.back();
    out << std::setprecision(6) << std::endl;
  };
  hooks.on_grow = [&](const Model<float>& m, const TransferReport& t) {
    out << "grow " << t.from_stage << " -> " << t.to_stage << ": " << t.transferred.size() << " tensors transferred, "
        << t.added.size() << " added, " << param_count(m) << " parameters\n";
  };
  const Dataset* val = data.val.empty() ? nullptr : &data.val;
  const TrainRun run = run_progressive(config.schedule, data.train, val, hooks, dir / "checkpoints");

  auto curves = open_out(dir / "curves.tsv");
  curves << "stage\tepoch\tresolution\tloss\tval_zsi\n";
  for (const auto& s : run.stages) {
    for (std::size_t e = 0; e < s.epoch_loss.size(); ++e) {
      curves << s.stage << '\t' << e + 1 << '\t' << s.resolution << '\t' << g17(s.epoch_loss[e]) << '\t'
             << (e < s.val_zsi.size() ? g17(s.val_zsi[e]) : "-") << '\n';
    }
  }
  curves.close();
  render_curves(dir / "curves.png", run.stages);

  auto transfers = open_out(dir / "transfers.txt");
  for (const auto& t : run.transfers) {
    transfers << "stage " << t.from_stage << " -> " << t.to_stage << ": transferred " << t.transferred.size()
              << " tensors (" << t.transferred_elements << " values), added " << t.added.size() << " tensors ("
              << t.added_elements << " values)\n";
    for (const auto& n : t.transferred) transfers << "  = " << n << '\n';
    for (const auto& n : t.added) transfers << "  + " << n << '\n';
  }

  auto summary = open_out(dir / "train.kv");
  summary << "seed=" << config.seed << "\nstages=" << run.stages.size() << '\n';
  for (std::size_t i = 0; i < run.stages.size(); ++i) {
    const auto& s = run.stages[i];
    const std::string key = "stage" + std::to_string(s.stage);
    summary << key << ".resolution=" << s.resolution << '\n' << key << ".epochs=" << s.epoch_loss.size() << '\n';
    if (!s.epoch_loss.empty()) summary << key << ".final_loss=" << g17(s.epoch_loss.back()) << '\n';
    if (!s.val_zsi.empty()) summary << key << ".final_val_zsi=" << g17(s.val_zsi.back()) << '\n';
    summary << key << ".checkpoint=" << run.checkpoints[i].filename().string() << '\n';
  }
  summary << "param_count=" << param_count(run.model) << '\n';

  if (data.test.empty()) {
    out << "test split is empty; no report written\n";
    return kExitOk;
  }
  const MetricsReport report = evaluate(run.model, data.test, config.schedule.batch_size);
  const char* name = variant_name(run.model.config(), true);
  auto table = open_out(dir / "report.txt");
  write_table(table, {name}, {&report});
  auto kv = open_out(dir / "report.kv");
  write_key_values(kv, report);
  write_table(out, {name}, {&report});
  out << "outputs in " << dir.string() << '\n';
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream&) {
  if (o.data.empty() == o.config.empty()) throw ConfigError("eval needs exactly one of --data or --config");
  const LoadedCheckpoint ck = load_for(o);
  const std::size_t r = ck.model.config().resolution();
  Dataset data;
  std::size_t batch = 8;
  if (!o.config.empty()) {
    const RunConfig config = load_run_config(o.config);
    batch = config.schedule.batch_size;
    const DatasetSplits splits = build_splits(config);
    if (o.split == "train") data = splits.train;
    else if (o.split == "val") data = splits.val;
    else if (o.split == "test") data = splits.test;
    else throw ConfigError("--split must be train, val or test");
  } else {
    data = load_herlev(o.data).dataset;
  }
  if (data.empty()) throw DataError("no samples to evaluate");
  if (data.resolution < r) {
    throw DataError("data is at " + std::to_string(data.resolution) + " px but the checkpoint is a " +
                    std::to_string(r) + " px model");
  }
  data = resample(data, r);
  const MetricsReport report = evaluate(ck.model, data, batch);
  const char* name = variant_name(ck.model.config(), ck.model.stage() > 1);
  write_table(out, {name}, {&report});
  if (!o.out.empty()) {
    const fs::path dir(o.out);
    fs::create_directories(dir);
    auto table = open_out(dir / "eval_report.txt");
    write_table(table, {name}, {&report});
    auto kv = open_out(dir / "eval_report.kv");
    write_key_values(kv, report);
  }
  std::ostringstream kv;
  write_key_values(kv, report);
  const std::string text = kv.str();
  out << text.substr(0, text.find("sample."));
  return kExitOk;
}

int cmd_predict(const Options& o, std::ostream& out, std::ostream&) {
  if (o.data.empty()) throw ConfigError("predict needs --data IMAGE");
  if (o.out.empty()) throw ConfigError("predict needs --out PATH");
  const LoadedCheckpoint ck = load_for(o);
  const std::size_t r = ck.model.config().resolution();
  const Tensor input = prepare_image(read_rgb(o.data), r);
  Tensor logits;
  {
    NoGradGuard no_grad;
    logits = ck.model.forward(input);
  }
  const auto classes = argmax_classes(logits)[0];
  fs::path mask_path(o.out);
  if (mask_path.extension() != ".png") mask_path += ".png";
  if (mask_path.has_parent_path()) fs::create_directories(mask_path.parent_path());
  write_paletted_png(mask_path, {r, r, classes, {kClassPalette.begin(), kClassPalette.end()}});
  auto nucleus = nucleus_mask(classes);
  for (auto& v : nucleus) v = v ? 255 : 0;
  fs::path nucleus_path = mask_path;
  nucleus_path.replace_filename(mask_path.stem().string() + "-nucleus.png");
  write_gray(nucleus_path, r, r, nucleus);
  out << "mask " << mask_path.string() << "\nnucleus " << nucleus_path.string() << '\n';
  return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out, std::ostream& err) {
  testing::set_conv2d_backward_fault(o.corrupt_conv);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<GradCheckRow> rows;
  try {
    rows = run_gradcheck_suite();
  } catch (...) {
    testing::set_conv2d_backward_fault(false);
    throw;
  }
  testing::set_conv2d_backward_fault(false);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out << std::left << std::setw(20) << "op" << std::setw(16) << "max_rel_error" << std::setw(13) << "coordinates"
      << std::setw(10) << "excluded" << "status\n";
  std::string failed;
  for (const auto& row : rows) {
    char e[32];
    std::snprintf(e, sizeof e, "%.3e", row.max_relative_error);
    out << std::setw(20) << row.op << std::setw(16) << e << std::setw(13) << row.coordinates << std::setw(10)
        << row.kink_excluded << (row.passed() ? "ok" : "FAIL") << '\n';
    if (!row.passed()) failed += (failed.empty() ? "" : ", ") + row.op;
  }
  out << std::right << "tolerance " << kGradCheckTolerance << ", step 1e-4, float64, " << std::fixed
      << std::setprecision(1) << seconds << " s\n"
      << std::defaultfloat << std::setprecision(6);
  if (!failed.empty()) {
    err << "gradcheck failed: " << failed << '\n';
    return kExitGradCheck;
  }
  return kExitOk;
}

int cmd_synth(const Options& o, std::ostream& out, std::ostream&) {
  if (o.out.empty()) throw ConfigError("synth needs --out DIR");
  if (o.count == 0) throw ConfigError("--count must be positive");
  const std::uint64_t seed = o.seed.value_or(0);
  for (std::size_t k = 0; k < o.count; ++k) {
    const auto img = synth_render(k, o.resolution, seed);
    char id[32];
    std::snprintf(id, sizeof id, "synth-%06zu", k);
    write_sample_pair(o.out, id, img.rgb, img.mask, o.resolution);
  }
  out << "wrote " << o.count << " image/mask pairs to " << o.out << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Progressively grown residual U-net for nucleus segmentation", "pgunet"};
  app.require_subcommand(1);
  Options o;

  auto* train = app.add_subcommand("train", "Progressive training run from a config file");
  train->add_option("--config", o.config, "INI run configuration")->required();
  train->add_option("--out", o.out, "Output directory (overrides [run] output)");
  train->add_option("--seed", o.seed, "Overrides [run] seed");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint");
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint file or checkpoint directory")->required();
  eval->add_option("--data", o.data, "Image directory with mask companions");
  eval->add_option("--config", o.config, "Rebuild the data split of a run configuration");
  eval->add_option("--split", o.split, "train, val or test (with --config)");
  eval->add_option("--stage", o.stage, "Stage to load from a checkpoint directory");
  eval->add_option("--out", o.out, "Directory for eval_report.txt / eval_report.kv");

  auto* predict = app.add_subcommand("predict", "Segment one image");
  predict->add_option("--checkpoint", o.checkpoint, "Checkpoint file or checkpoint directory")->required();
  predict->add_option("--data,--image", o.data, "Input image")->required();
  predict->add_option("--out", o.out, "Paletted mask PNG; the nucleus mask goes next to it")->required();
  predict->add_option("--stage", o.stage, "Stage to load from a checkpoint directory");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_flag("--corrupt-conv-backward", o.corrupt_conv, "Test fixture: break the conv2d weight gradient")
      ->group("");

  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset in the image/mask directory format");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--count", o.count, "Number of samples");
  synth->add_option("--seed", o.seed, "Generator seed");
  synth->add_option("--resolution", o.resolution, "Image size in pixels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(o, out, err);
    if (eval->parsed()) return cmd_eval(o, out, err);
    if (predict->parsed()) return cmd_predict(o, out, err);
    if (gradcheck->parsed()) return cmd_gradcheck(o, out, err);
    if (synth->parsed()) return cmd_synth(o, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace pgu::cli
