#include <benchmark/benchmark.h>

#include "pgunet/nn_ops.hpp"
#include "pgunet/tensor_ops.hpp"
#include "pgunet/trainer.hpp"

using namespace pgu;

namespace {

// args: batch, channels in/out, spatial size
Conv2dParams<float> make_conv(std::size_t c_in, std::size_t c_out) {
  Conv2dParams<float> p{Tensor::randn({c_out, c_in, 3, 3}, 1, 0.1), Tensor::zeros({c_out})};
  p.weight.set_requires_grad();
  p.bias.set_requires_grad();
  return p;
}

void BM_Conv2dForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), c = static_cast<std::size_t>(state.range(1)),
             r = static_cast<std::size_t>(state.range(2));
  const auto x = Tensor::randn({n, c, r, r}, 2);
  const auto conv = make_conv(c, c);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, conv).data().data());
  state.counters["FLOPS"] = benchmark::Counter(2.0 * n * c * c * 9 * r * r, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv2dForward)->Args({8, 16, 64})->Args({8, 32, 32})->Args({8, 64, 16})->Unit(benchmark::kMillisecond);

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0)), c = static_cast<std::size_t>(state.range(1)),
             r = static_cast<std::size_t>(state.range(2));
  auto x = Tensor::randn({n, c, r, r}, 2);
  x.set_requires_grad();
  const auto conv = make_conv(c, c);
  for (auto _ : state) {
    backward(sum(conv2d(x, conv)));
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Args({8, 16, 64})->Args({8, 32, 32})->Unit(benchmark::kMillisecond);

// One optimizer step of the desk-benchmark network at 64 px, batch 8.
void BM_TrainStep(benchmark::State& state) {
  auto config = make_stage_config(2, {16, 32, 64});
  config.epochs = 1;
  auto model = build_stage(config, 1);
  const auto data = synth_generate(8, 64, 1);
  TrainSchedule schedule;
  schedule.stages = {config};
  schedule.batch_size = 8;
  auto rms = schedule.fresh_state();
  for (auto _ : state) train_stage(model, rms, data, nullptr, schedule);
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
