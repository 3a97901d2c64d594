// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "tspm/tensor.hpp"

namespace tspm {

// Compares the tape gradient of a scalar function against central
// differences (f(x+h·e_i) − f(x−h·e_i)) / 2h, the divisor being the step left
// after rounding x ± h to f32. Returns
// max_i |analytic_i − numeric_i| / max(1, |analytic_i|).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-3);

}  // namespace tspm
