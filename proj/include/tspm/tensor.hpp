// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tspm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  // Empty until a backward pass (or the optimizer) touches it.
  std::vector<float> grad;
  bool requires_grad = false;
  // False for tensors produced by a recorded op.
  bool is_leaf = true;
};

// Dense row-major f32 array with shared ownership. Copies of a Tensor alias
// the same storage, which is how parameters are threaded through the model.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor scalar(float value);
  static Tensor vector(std::vector<float> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const float> data() const { return impl_->data; }
  std::span<float> mutable_data() { return impl_->data; }
  float at(std::size_t i) const { return impl_->data.at(i); }
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool is_leaf() const { return impl_->is_leaf; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const float> grad() const { return impl_->grad; }
  // Allocates a zero gradient buffer on first use.
  std::span<float> mutable_grad();
  void zero_grad();
  void clear_grad() { impl_->grad.clear(); }

  // Fresh leaf tensor holding a copy of the values.
  Tensor detach() const;
  std::vector<float> to_vector() const { return impl_->data; }

  TensorImpl* impl() const { return impl_.get(); }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of differentiable ops. Ops record onto the tape that is
// active on the current thread; with no active tape nothing is recorded and
// outputs never require grad (inference mode).
class GradTape {
 public:
  using BackwardFn = std::function<void(TensorImpl& out)>;

  void record(const Tensor& output, std::vector<Tensor> inputs, BackwardFn fn);
  // Reverse replay from a scalar loss. Leaf gradients accumulate across
  // calls; intermediate gradients are reset on every call.
  void backward(const Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

  static GradTape* active();

 private:
  struct Entry {
    Tensor output;
    std::vector<Tensor> inputs;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;

  friend class TapeScope;
};

// Makes a tape active on this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* previous_;
};

// Backward through the active tape.
void backward(const Tensor& loss);

// Builds an op output. When a tape is active and any input requires grad, the
// output requires grad and `fn` is recorded; otherwise `fn` is dropped.
Tensor make_op_result(Shape shape, std::vector<float> data, std::initializer_list<Tensor> inputs,
                      std::function<void(TensorImpl&)> fn);
Tensor make_op_result_list(Shape shape, std::vector<float> data, const std::vector<Tensor>& inputs,
                           std::function<void(TensorImpl&)> fn);

// Gradient buffer of an input inside a backward rule, or nullptr when the
// input does not take gradients.
float* grad_target(const Tensor& t);

}  // namespace tspm
