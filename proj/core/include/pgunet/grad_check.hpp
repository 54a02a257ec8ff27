#pragma once

// Central-difference gradient verification in 64-bit mode.
//
// The error measure is |analytic - numeric| / max(1, |analytic|), maximized
// over coordinates. relu and maxpool make the objective piecewise smooth; a
// probe whose +-step interval crosses a kink (detected by comparing the
// activation pattern at x-step, x and x+step) says nothing about the
// derivative at x. Such a coordinate is re-probed with step/10 and step/100,
// and excluded only if every probe straddles a kink.

#include <functional>
#include <vector>

#include "pgunet/tensor.hpp"

namespace pgu {

using ScalarFn = std::function<Tensor64(const Tensor64&)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t kink_retries = 0;   // coordinates that needed a smaller step
  std::size_t kink_excluded = 0;  // coordinates with a kink inside every probe
};

/// max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// Throws GraphError if `fn` is not deterministic at x.
double grad_check(const ScalarFn& fn, const Tensor64& x, double step = 1e-4);

/// Same measure over every coordinate of every tensor in `params`. `loss`
/// rebuilds the objective from the current contents of `params`, which are
/// perturbed in place during probing and restored afterwards.
GradCheckReport grad_check_params(const std::function<Tensor64()>& loss, std::vector<Tensor64> params,
                                  double step = 1e-4);

}  // namespace pgu
