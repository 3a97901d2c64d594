// SPDX-License-Identifier: Apache-2.0
#include "tspm/nn.hpp"

#include <cmath>

namespace tspm {

namespace {
Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<float> values(shape_numel(shape));
  for (float& v : values) v = static_cast<float>(rng.uniform(-bound, bound));
  return Tensor(std::move(shape), std::move(values));
}
}  // namespace

Linear make_linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                   bool with_bias) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = store.add(prefix + "/weight", uniform_tensor({in, out}, bound, rng));
  if (with_bias) l.bias = store.add(prefix + "/bias", uniform_tensor({out}, bound, rng));
  return l;
}

LayerNorm make_layer_norm(ParameterStore& store, const std::string& prefix, std::size_t width) {
  LayerNorm ln;
  ln.gamma = store.add(prefix + "/gamma", Tensor::full({width}, 1.0f));
  ln.beta = store.add(prefix + "/beta", Tensor::zeros({width}));
  return ln;
}

}  // namespace tspm
