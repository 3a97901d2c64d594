// SPDX-License-Identifier: Apache-2.0
#include "tspm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "tspm/error.hpp"

namespace tspm {

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  Tensor probe = x.detach();
  probe.set_requires_grad(true);
  std::vector<float> analytic(x.numel(), 0.0f);
  {
    GradTape tape;
    TapeScope scope(tape);
    Tensor y = f(probe);
    if (y.numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
    tape.backward(y);
    if (probe.has_grad()) analytic.assign(probe.grad().begin(), probe.grad().end());
  }

  double worst = 0.0;
  std::vector<float> base = x.to_vector();
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<float> plus = base, minus = base;
    plus[i] = static_cast<float>(plus[i] + h);
    minus[i] = static_cast<float>(minus[i] - h);
    // The step actually taken once x ± h is rounded to f32.
    const double step = double(plus[i]) - double(minus[i]);
    const double fp = f(Tensor(x.shape(), std::move(plus))).item();
    const double fm = f(Tensor(x.shape(), std::move(minus))).item();
    const double numeric = (fp - fm) / step;
    const double a = analytic[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace tspm
