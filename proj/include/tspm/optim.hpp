// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tspm/tensor.hpp"

namespace tspm {

// Named trainable tensors plus their Adam moments. Iteration order is the
// lexicographic name order, which keeps updates and serialization stable.
class ParameterStore {
 public:
  struct Moments {
    std::vector<float> m;
    std::vector<float> v;
  };

  // Registers a parameter (marked requires_grad). Names must be unique.
  Tensor add(const std::string& name, Tensor init);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const std::map<std::string, Tensor>& params() const { return params_; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }
  void advance_step() { ++step_; }

  std::size_t parameter_count() const;
  void zero_grad();
  // Deep copy: fresh tensors, same values and optimizer state.
  ParameterStore clone() const;

 private:
  std::map<std::string, Tensor> params_;
  std::map<std::string, Moments> moments_;
  std::uint64_t step_ = 0;
};

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamReport {
  std::size_t updated = 0;
  // Parameters that had no gradient buffer this step.
  std::size_t skipped = 0;
};

// Bias-corrected Adam over every parameter holding a gradient, then zeroes
// the gradients. The step counter advances once per call.
AdamReport adam_step(ParameterStore& store, const AdamOptions& options);

// Global L2 norm of all gradients.
double grad_norm(const ParameterStore& store);
// Rescales gradients so their global norm is at most max_norm. Returns the norm before clipping.
double clip_grad_norm(ParameterStore& store, double max_norm);

}  // namespace tspm
