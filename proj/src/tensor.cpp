// SPDX-License-Identifier: Apache-2.0
#include "tspm/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "tspm/error.hpp"

namespace tspm {

namespace {
thread_local GradTape* g_active_tape = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<float> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor shape " + shape_to_string(shape) + " has a zero extent");
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::vector<float> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

float Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

std::span<float> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::record(const Tensor& output, std::vector<Tensor> inputs, BackwardFn fn) {
  entries_.push_back(Entry{output, std::move(inputs), std::move(fn)});
}

void GradTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_to_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;
  for (Entry& e : entries_) {
    auto& g = e.output.impl()->grad;
    g.assign(e.output.numel(), 0.0f);
  }
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0f;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->fn(*it->output.impl());
  }
}

TapeScope::TapeScope(GradTape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = previous_; }

void backward(const Tensor& loss) {
  GradTape* tape = GradTape::active();
  if (tape == nullptr) throw ContractError("backward() called with no active tape");
  tape->backward(loss);
}

Tensor make_op_result_list(Shape shape, std::vector<float> data, const std::vector<Tensor>& inputs,
                           std::function<void(TensorImpl&)> fn) {
  Tensor out(std::move(shape), std::move(data));
  GradTape* tape = GradTape::active();
  if (tape == nullptr) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!needs) return out;
  out.impl()->requires_grad = true;
  out.impl()->is_leaf = false;
  tape->record(out, inputs, std::move(fn));
  return out;
}

Tensor make_op_result(Shape shape, std::vector<float> data, std::initializer_list<Tensor> inputs,
                      std::function<void(TensorImpl&)> fn) {
  return make_op_result_list(std::move(shape), std::move(data), std::vector<Tensor>(inputs), std::move(fn));
}

float* grad_target(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  auto& g = t.impl()->grad;
  if (g.empty()) g.assign(t.numel(), 0.0f);
  return g.data();
}

}  // namespace tspm
