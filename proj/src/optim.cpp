// SPDX-License-Identifier: Apache-2.0
#include "tspm/optim.hpp"

#include <cmath>

#include "tspm/error.hpp"

namespace tspm {

Tensor ParameterStore::add(const std::string& name, Tensor init) {
  if (params_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  init.set_requires_grad(true);
  params_.emplace(name, init);
  moments_.emplace(name, Moments{std::vector<float>(init.numel(), 0.0f), std::vector<float>(init.numel(), 0.0f)});
  return init;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [name, t] : params_) {
    Tensor handle = t;
    handle.clear_grad();
  }
}

ParameterStore ParameterStore::clone() const {
  ParameterStore out;
  for (const auto& [name, t] : params_) out.add(name, t.detach());
  out.moments_ = moments_;
  out.step_ = step_;
  return out;
}

AdamReport adam_step(ParameterStore& store, const AdamOptions& options) {
  AdamReport report;
  store.advance_step();
  const double t = static_cast<double>(store.step());
  const double bc1 = 1.0 - std::pow(options.beta1, t);
  const double bc2 = 1.0 - std::pow(options.beta2, t);
  for (const auto& [name, param] : store.params()) {
    Tensor p = param;
    if (!p.has_grad()) {
      ++report.skipped;
      continue;
    }
    auto& mom = store.moments().at(name);
    auto w = p.mutable_data();
    auto g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      const double m = options.beta1 * mom.m[i] + (1.0 - options.beta1) * gi;
      const double v = options.beta2 * mom.v[i] + (1.0 - options.beta2) * gi * gi;
      mom.m[i] = static_cast<float>(m);
      mom.v[i] = static_cast<float>(v);
      const double update = options.lr * (m / bc1) / (std::sqrt(v / bc2) + options.eps);
      w[i] = static_cast<float>(w[i] - update);
    }
    p.zero_grad();
    ++report.updated;
  }
  return report;
}

double grad_norm(const ParameterStore& store) {
  double sq = 0.0;
  for (const auto& [name, p] : store.params()) {
    for (float g : p.grad()) sq += double(g) * g;
  }
  return std::sqrt(sq);
}

double clip_grad_norm(ParameterStore& store, double max_norm) {
  const double norm = grad_norm(store);
  if (max_norm <= 0.0 || norm <= max_norm) return norm;
  const float factor = static_cast<float>(max_norm / norm);
  for (const auto& [name, param] : store.params()) {
    Tensor p = param;
    if (!p.has_grad()) continue;
    for (float& g : p.mutable_grad()) g *= factor;
  }
  return norm;
}

}  // namespace tspm
