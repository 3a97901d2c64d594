// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "tspm/ops.hpp"
#include "tspm/optim.hpp"
#include "tspm/rng.hpp"

namespace tspm {

// Affine map y = x·W + b with W stored [in, out]. Bias may be undefined.
struct Linear {
  Tensor weight;
  Tensor bias;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

// Registers `<prefix>/weight` (and `<prefix>/bias`) drawn from
// uniform(−1/√in, +1/√in).
Linear make_linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                   bool with_bias = true);
// Registers `<prefix>/gamma` = 1 and `<prefix>/beta` = 0.
LayerNorm make_layer_norm(ParameterStore& store, const std::string& prefix, std::size_t width);

}  // namespace tspm
