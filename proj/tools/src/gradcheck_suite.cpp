#include "pgunet_cli/gradcheck_suite.hpp"

#include <cmath>
#include <functional>
#include <random>

#include "pgunet/grad_check.hpp"
#include "pgunet/model.hpp"
#include "pgunet/nn_ops.hpp"
#include "pgunet/tensor_ops.hpp"

namespace pgu::cli {

namespace {

// Values at least 0.05 away from zero, so relu and maxpool inputs are not
// sitting on a kink at the base point.
Tensor64 probe(const Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> mag(0.05, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng() & 1 ? 1.0 : -1.0) * mag(rng);
  return Tensor64::from_data(shape, std::move(v));
}

// A fixed random projection makes every output coordinate matter.
Tensor64 weighted_sum(const Tensor64& y, std::uint64_t seed) { return sum(mul(y, probe(y.shape(), seed))); }

std::vector<std::uint8_t> labels(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint8_t> out(n);
  for (auto& l : out) l = static_cast<std::uint8_t>(rng() % kNumClasses);
  return out;
}

GradCheckRow check(const std::string& op, const std::function<Tensor64()>& loss, std::vector<Tensor64> params) {
  const auto report = grad_check_params(loss, std::move(params));
  return {op, report.max_relative_error, report.coordinates, report.kink_excluded};
}

}  // namespace

std::vector<GradCheckRow> run_gradcheck_suite() {
  std::vector<GradCheckRow> rows;
  auto a = probe({2, 3, 4, 4}, 1), b = probe({2, 3, 4, 4}, 2);
  rows.push_back(check("add", [&] { return weighted_sum(add(a, b), 10); }, {a, b}));
  rows.push_back(check("sub", [&] { return weighted_sum(sub(a, b), 11); }, {a, b}));
  rows.push_back(check("mul", [&] { return weighted_sum(mul(a, b), 12); }, {a, b}));
  rows.push_back(check("scale", [&] { return weighted_sum(scale(a, 2.5), 13); }, {a}));
  auto m1 = probe({3, 5}, 3), m2 = probe({5, 4}, 4);
  rows.push_back(check("matmul", [&] { return weighted_sum(matmul(m1, m2), 14); }, {m1, m2}));
  rows.push_back(check("sum", [&] { return sum(a); }, {a}));

  auto x = probe({2, 3, 6, 6}, 5);
  Conv2dParams<double> c3{probe({4, 3, 3, 3}, 6), probe({4}, 7), 1, 1};
  rows.push_back(check("conv2d", [&] { return weighted_sum(conv2d(x, c3), 15); }, {x, c3.weight, c3.bias}));
  Conv2dParams<double> c1{probe({2, 3, 1, 1}, 8), probe({2}, 9), 1, 0};
  rows.push_back(check("conv2d_1x1", [&] { return weighted_sum(conv2d(x, c1), 16); }, {x, c1.weight, c1.bias}));
  Conv2dParams<double> cs{probe({2, 3, 3, 3}, 17), probe({2}, 18), 2, 1};
  rows.push_back(check("conv2d_stride2", [&] { return weighted_sum(conv2d(x, cs), 19); }, {x, cs.weight, cs.bias}));

  rows.push_back(check("maxpool2", [&] { return weighted_sum(maxpool2(x), 20); }, {x}));
  rows.push_back(check("avgpool2", [&] { return weighted_sum(avgpool2(x), 21); }, {x}));
  rows.push_back(check("upsample2_nearest", [&] { return weighted_sum(upsample2_nearest(x), 22); }, {x}));
  rows.push_back(check("relu", [&] { return weighted_sum(relu(x), 23); }, {x}));
  auto y = probe({2, 2, 6, 6}, 24);
  rows.push_back(check("concat_channels", [&] { return weighted_sum(concat_channels(x, y), 25); }, {x, y}));
  rows.push_back(check("slice_channels", [&] { return weighted_sum(slice_channels(x, 1, 3), 26); }, {x}));
  auto logits = probe({2, 4, 3, 3}, 27);
  const auto ce_labels = labels(2 * 3 * 3, 28);
  rows.push_back(check("softmax_ce_loss", [&] { return softmax_ce_loss(logits, ce_labels); }, {logits}));
  auto coarse = probe({2, 4, 3, 3}, 29), fine = probe({2, 3, 6, 6}, 30);
  Conv2dParams<double> proj{probe({3, 4, 1, 1}, 31), probe({3}, 32), 1, 0};
  rows.push_back(check("residual_merge", [&] { return weighted_sum(residual_merge(coarse, fine, &proj), 33); },
                       {coarse, fine, proj.weight, proj.bias}));

  // End-to-end stage-1 network at 32x32 with narrow widths; projections get
  // random values so the coarse branch is exercised.
  StageConfig config = make_stage_config(1, {4, 6});
  auto model = build_stage<double>(config, 41);
  std::vector<Tensor64> params;
  for (auto& [name, p] : model.parameters()) {
    if (name.find(".proj.") != std::string::npos) {
      auto fresh = Tensor64::randn(p.tensor.shape(), parameter_seed(43, name), 0.5);
      std::copy(fresh.data().begin(), fresh.data().end(), p.tensor.mutable_data().begin());
    }
    params.push_back(p.tensor);
  }
  auto image = Tensor64::randn({1, 3, 32, 32}, 44);
  const auto pixel_labels = labels(32 * 32, 45);
  rows.push_back(check("stage1_model", [&] { return softmax_ce_loss(model.forward(image), pixel_labels); }, params));
  return rows;
}

}  // namespace pgu::cli
