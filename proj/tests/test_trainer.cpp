#include <doctest.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "pgunet/checkpoint.hpp"
#include "pgunet/tensor_ops.hpp"
#include "pgunet/trainer.hpp"
#include "temp_dir.hpp"

using namespace pgu;

namespace {

const std::vector<std::size_t> kTinyWidths{2, 3, 4, 5, 6};

ParameterMap scalar_params(std::initializer_list<std::pair<const char*, int>> specs, float value = 1.0f) {
  ParameterMap params;
  for (auto [name, origin] : specs) {
    auto t = Tensor::full({1}, value);
    t.set_requires_grad();
    params.emplace(name, Parameter<float>{name, t, origin});
  }
  return params;
}

void set_grad(ParameterMap& params, const std::string& name, float g) {
  auto grad = params.at(name).tensor.mutable_grad();
  std::fill(grad.begin(), grad.end(), g);
}

bool same_parameters(const Model<float>& a, const Model<float>& b) {
  if (a.parameters().size() != b.parameters().size()) return false;
  for (const auto& [name, p] : a.parameters()) {
    const auto& q = b.parameter(name).tensor;
    if (p.tensor.shape() != q.shape()) return false;
    if (std::memcmp(p.tensor.data().data(), q.data().data(), q.numel() * sizeof(float)) != 0) return false;
    if (p.stage_of_origin != b.parameter(name).stage_of_origin) return false;
  }
  return true;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << s;
}

}  // namespace

TEST_CASE("rmsprop_step arithmetic") {
  RmspropState state;
  const auto lr = [](int) { return 1e-4; };

  SUBCASE("zero gradient leaves parameters unchanged") {
    auto params = scalar_params({{"a", 1}, {"b", 1}});
    for (auto& [n, p] : params) p.tensor.zero_grad();
    rmsprop_step(params, state, lr);
    CHECK(params.at("a").tensor.item() == 1.0f);
    CHECK(params.at("b").tensor.item() == 1.0f);
  }
  SUBCASE("single scalar step") {
    auto params = scalar_params({{"p", 1}});
    set_grad(params, "p", 1.0f);
    rmsprop_step(params, state, lr);
    CHECK(state.mean_square.at("p")[0] == doctest::Approx(0.01).epsilon(1e-6));
    const double expected = 1.0 - 1e-4 * 1.0 / (0.1 + 1e-8);
    CHECK(params.at("p").tensor.item() == doctest::Approx(expected).epsilon(1e-7));
    CHECK(params.at("p").tensor.item() == doctest::Approx(0.999).epsilon(1e-6));
  }
  SUBCASE("learning-rate groups by stage of origin") {
    auto params = scalar_params({{"old", 1}, {"new", 2}}, 0.0f);
    set_grad(params, "old", 0.3f);
    set_grad(params, "new", 0.3f);
    std::map<std::string, double> seen;
    rmsprop_step(params, state, [](int origin) { return origin == 1 ? 1e-6 : 1e-4; },
                 [&](const std::string& name, int, double lr) { seen[name] = lr; });
    const double d_old = -params.at("old").tensor.item();
    const double d_new = -params.at("new").tensor.item();
    CHECK(d_new / d_old == doctest::Approx(100.0).epsilon(1e-3));
    CHECK(seen.at("old") == 1e-6);
    CHECK(seen.at("new") == 1e-4);
  }
  SUBCASE("missing gradient") {
    auto params = scalar_params({{"a", 1}});
    CHECK_THROWS_AS(rmsprop_step(params, state, lr), GraphError);
  }
  SUBCASE("non-finite gradient aborts the whole step") {
    auto params = scalar_params({{"a", 1}, {"b", 1}});
    set_grad(params, "a", 1.0f);
    set_grad(params, "b", std::numeric_limits<float>::quiet_NaN());
    CHECK_THROWS_AS(rmsprop_step(params, state, lr), NumericalError);
    CHECK(params.at("a").tensor.item() == 1.0f);
    CHECK(state.mean_square.empty());
  }
  SUBCASE("non-positive learning rate") {
    auto params = scalar_params({{"a", 1}});
    set_grad(params, "a", 1.0f);
    CHECK_THROWS_AS(rmsprop_step(params, state, [](int) { return 0.0; }), ConfigError);
  }
}

TEST_CASE("rmsprop state stays non-negative") {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> d(0.0f, 10.0f);
  auto params = scalar_params({{"a", 1}, {"b", 2}, {"c", 2}});
  RmspropState state;
  for (int step = 0; step < 500; ++step) {
    for (const char* n : {"a", "b", "c"}) set_grad(params, n, d(rng));
    rmsprop_step(params, state, [](int o) { return o == 1 ? 1e-6 : 1e-4; });
    for (const auto& [n, v] : state.mean_square)
      for (float x : v) REQUIRE(x >= 0.0f);
  }
}

TEST_CASE("rmsprop descends on p^2") {
  auto params = scalar_params({{"p", 1}});
  RmspropState state;
  double objective = 1.0;
  for (int step = 0; step < 50; ++step) {
    auto& p = params.at("p");
    p.tensor.zero_grad();
    backward(sum(mul(p.tensor, p.tensor)));
    rmsprop_step(params, state, [](int) { return 1e-4; });
    const double next = double(p.tensor.item()) * p.tensor.item();
    CHECK(next < objective);
    objective = next;
  }
}

TEST_CASE("stage_learning_rates") {
  auto c = make_stage_config(3, kTinyWidths);
  auto lr = stage_learning_rates(c);
  CHECK(lr(1) == 1e-6);
  CHECK(lr(2) == 1e-6);
  CHECK(lr(3) == 1e-4);
}

TEST_CASE("schedule validation") {
  auto s = make_schedule(4, kTinyWidths, 3, 1);
  CHECK(s.stages.size() == 4);
  CHECK(s.stages[3].resolution() == 256);
  s.stages.erase(s.stages.begin() + 1);
  CHECK_THROWS_AS(s.validate(), ConfigError);
  auto t = make_schedule(2, kTinyWidths, 1, 1);
  t.batch_size = 0;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  t.batch_size = 2;
  t.stages[0].lr_new = -1;
  CHECK_THROWS_AS(t.validate(), ConfigError);
  CHECK_THROWS_AS(make_schedule(5, kTinyWidths, 1, 1), ConfigError);
}

TEST_CASE("train_stage") {
  auto schedule = make_schedule(1, kTinyWidths, 1, 3);
  auto data = synth_generate(5, 32, 2);

  SUBCASE("zero epochs leave the model bitwise unchanged") {
    auto config = schedule.stages[0];
    config.epochs = 0;
    auto model = build_stage<float>(config, 3);
    const auto before = model.cast<float>();  // deep copy
    auto state = schedule.fresh_state();
    auto report = train_stage(model, state, data, nullptr, schedule);
    CHECK(report.epoch_loss.empty());
    CHECK(report.steps == 0);
    CHECK(same_parameters(model, before));
    // whereas one epoch does move them
    auto state2 = schedule.fresh_state();
    auto model2 = build_stage<float>(schedule.stages[0], 3);
    const auto snapshot = model2.parameter("enc.r32.conv1.weight").tensor.detach();
    train_stage(model2, state2, data, nullptr, schedule);
    CHECK_FALSE(same_bits(snapshot, model2.parameter("enc.r32.conv1.weight").tensor));
  }
  SUBCASE("one epoch on one sample lowers its loss") {
    Dataset one{{data.samples[0]}, SplitTag::kTrain, 32};
    auto model = build_stage<float>(schedule.stages[0], 3);
    auto batch = make_batch(one, {0});
    const auto loss_of = [&] {
      NoGradGuard g;
      return softmax_ce_loss(model.forward(batch.images), batch.labels).item();
    };
    const float before = loss_of();
    auto state = schedule.fresh_state();
    train_stage(model, state, one, nullptr, schedule);
    CHECK(loss_of() < before);
  }
  SUBCASE("seeded runs repeat exactly") {
    schedule.stages[0].epochs = 3;
    schedule.batch_size = 2;
    std::vector<double> curves[2];
    for (auto& curve : curves) {
      auto model = build_stage<float>(schedule.stages[0], schedule.seed);
      auto state = schedule.fresh_state();
      auto report = train_stage(model, state, data, &data, schedule);
      CHECK(report.steps == 9);  // 3 epochs x ceil(5 / 2)
      CHECK(report.val_zsi.size() == 3);
      curve = report.epoch_loss;
    }
    REQUIRE(curves[0].size() == 3);
    CHECK(std::memcmp(curves[0].data(), curves[1].data(), 3 * sizeof(double)) == 0);
  }
  SUBCASE("errors") {
    auto model = build_stage<float>(schedule.stages[0], 3);
    auto state = schedule.fresh_state();
    CHECK_THROWS_AS(train_stage(model, state, synth_generate(2, 64, 1), nullptr, schedule), DataError);
    CHECK_THROWS_AS(train_stage(model, state, Dataset{{}, SplitTag::kTrain, 32}, nullptr, schedule), DataError);
    CHECK_THROWS_AS(evaluate(model, synth_generate(2, 64, 1)), DataError);
  }
}

TEST_CASE("transferred parameters train at the reduced rate") {
  auto schedule = make_schedule(2, kTinyWidths, 1, 4);
  auto m1 = build_stage<float>(schedule.stages[0], 4);
  auto grown = grow(m1, schedule.stages[1]);
  auto data = synth_generate(3, 64, 5);
  std::map<std::string, std::set<double>> rates;
  TrainHooks hooks;
  hooks.on_update = [&](const std::string& name, int, double lr) { rates[name].insert(lr); };
  auto state = schedule.fresh_state();
  schedule.batch_size = 2;
  train_stage(grown.model, state, data, nullptr, schedule, hooks);
  REQUIRE(rates.size() == grown.model.parameters().size());
  for (const auto& [name, p] : grown.model.parameters()) {
    const double expected = p.stage_of_origin < 2 ? 1e-6 : 1e-4;
    CHECK(rates[name] == std::set<double>{expected});
  }
}

TEST_CASE("checkpoint round trip") {
  TempDir dir;
  auto schedule = make_schedule(2, kTinyWidths, 1, 6);
  for (auto& c : schedule.stages) c.residual = false;
  auto model = grow(build_stage<float>(schedule.stages[0], 6), schedule.stages[1]).model;
  auto state = schedule.fresh_state();
  auto data = synth_generate(2, 64, 1);
  train_stage(model, state, data, nullptr, schedule);
  save_checkpoint(model, state, 1, dir / "m.pgu");

  auto loaded = load_checkpoint(dir / "m.pgu");
  CHECK(same_parameters(model, loaded.model));
  CHECK(loaded.epoch == 1);
  CHECK(loaded.model.seed() == model.seed());
  CHECK(loaded.model.config().widths == model.config().widths);
  CHECK_FALSE(loaded.model.config().residual);
  CHECK(loaded.state.decay == state.decay);
  CHECK(loaded.state.mean_square == state.mean_square);
  const auto probe = Tensor::randn({2, 3, 64, 64}, 77);
  CHECK(same_bits(model.forward(probe), loaded.model.forward(probe)));

  const std::string bytes = slurp(dir / "m.pgu");
  CHECK(bytes.rfind("pgu1\n", 0) == 0);
  CHECK(bytes.find("param bottleneck.conv1.weight 1 6,5,3,3 ") != std::string::npos);
  CHECK(bytes.find("param enc.r64.conv1.weight 2 ") != std::string::npos);

  SUBCASE("truncated payload") {
    spit(dir / "t.pgu", bytes.substr(0, bytes.size() - 10));
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "t.pgu"), doctest::Contains("checksum"), CheckpointError);
  }
  SUBCASE("flipped payload bit") {
    std::string bad = bytes;
    bad[bad.size() - 3] ^= 0x10;
    spit(dir / "f.pgu", bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "f.pgu"), doctest::Contains("checksum"), CheckpointError);
  }
  SUBCASE("unknown version") {
    std::string bad = bytes;
    bad[3] = '9';
    spit(dir / "v.pgu", bad);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "v.pgu"), doctest::Contains("format"), CheckpointError);
  }
  SUBCASE("manifest shape disagrees with the byte span") {
    std::string bad = bytes;
    const std::string entry = "param enc.r64.conv1.weight 2 4,3,3,3";
    const auto at = bad.find(entry);
    REQUIRE(at != std::string::npos);
    bad.replace(at, entry.size(), "param enc.r64.conv1.weight 2 4,3,3,2");
    spit(dir / "s.pgu", bad);
    CHECK_THROWS_AS(load_checkpoint(dir / "s.pgu"), CheckpointError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_checkpoint(dir / "none.pgu"), CheckpointError); }
}

TEST_CASE("run_progressive through four stages") {
  TempDir dir;
  auto schedule = make_schedule(4, kTinyWidths, 1, 12);
  schedule.batch_size = 2;
  auto data = synth_generate(3, 256, 8);
  std::vector<std::size_t> resolutions;
  std::size_t grows = 0;
  TrainHooks hooks;
  hooks.on_stage_end = [&](const Model<float>& m, const RmspropState&, const StageReport& r) {
    resolutions.push_back(r.resolution);
    CHECK(m.config().resolution() == r.resolution);
  };
  hooks.on_grow = [&](const Model<float>& grown, const TransferReport& report) {
    ++grows;
    // every transferred parameter equals the previous stage's checkpoint
    auto previous = load_checkpoint(dir / ("stage" + std::to_string(report.from_stage) + ".pgu"));
    CHECK(report.transferred.size() == previous.model.parameters().size());
    for (const auto& name : report.transferred) {
      CHECK(same_bits(grown.parameter(name).tensor, previous.model.parameter(name).tensor));
    }
  };
  auto run = run_progressive(schedule, data, &data, hooks, dir.path());
  CHECK(resolutions == std::vector<std::size_t>{32, 64, 128, 256});
  CHECK(grows == 3);
  CHECK(run.transfers.size() == 3);
  REQUIRE(run.checkpoints.size() == 4);
  for (const auto& p : run.checkpoints) CHECK(std::filesystem::exists(p));
  CHECK(run.model.stage() == 4);
  for (const auto& r : run.stages) {
    CHECK(r.epoch_loss.size() == 1);
    CHECK(r.val_zsi.size() == 1);
  }
  CHECK(same_parameters(run.model, load_checkpoint(run.checkpoints.back()).model));

  CHECK_THROWS_AS(run_progressive(schedule, synth_generate(2, 64, 1), nullptr), DataError);
}

TEST_CASE("run_direct trains only the final stage") {
  auto schedule = make_schedule(2, kTinyWidths, 5, 2);
  auto data = synth_generate(2, 64, 3);
  auto run = run_direct(schedule, 2, data, nullptr);
  CHECK(run.stages.size() == 1);
  CHECK(run.stages[0].epoch_loss.size() == 2);
  CHECK(run.transfers.empty());
  for (const auto& [name, p] : run.model.parameters()) CHECK(p.stage_of_origin == 2);
}
