#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace moemamba {

using Shape = std::vector<std::size_t>;

enum class DType { kFloat32, kFloat64 };

template <typename T>
struct DTypeOf;
template <>
struct DTypeOf<float> {
  static constexpr DType value = DType::kFloat32;
};
template <>
struct DTypeOf<double> {
  static constexpr DType value = DType::kFloat64;
};

std::string_view dtype_name(DType dtype);
DType parse_dtype(std::string_view name);

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct TensorImpl;

/// Backward rule of a recorded op. Receives the gradient flowing into the
/// op's output and the output's forward value; accumulates into the inputs
/// it captured.
template <typename T>
using BackwardFn = std::function<void(std::span<const T> out_grad, std::span<const T> out_value)>;

template <typename T>
struct TapeNode {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  BackwardFn<T> backward;
  bool released = false;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::shared_ptr<TapeNode<T>> node;  // null for leaves
};

}  // namespace detail

/// Whether ops record onto the tape on this thread.
bool grad_enabled();

/// Disables tape recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor with reverse-mode autodiff.
///
/// A Tensor is a shared handle: copies alias the same buffer and tape entry.
/// Ops that see at least one input with requires_grad() record a TapeNode on
/// their result; backward() on a scalar result walks those nodes once in
/// reverse topological order and then releases them.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t size(std::size_t axis) const;
  std::size_t numel() const;
  static constexpr DType dtype() { return DTypeOf<T>::value; }

  std::span<const T> data() const;
  // Writable view; intended for leaves (parameter init, optimizer updates).
  std::span<T> mutable_data();
  T item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const;
  std::string_view op_name() const;

  bool has_grad() const;
  std::span<const T> grad() const;
  // Gradient storage, zero-filled on first use.
  std::span<T> grad_buffer() const;
  void zero_grad() const;

  void backward() const;

  // Same values, no tape history, never requires grad.
  Tensor detach() const;

  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}
  template <typename U>
  friend Tensor<U> make_op_result(std::string op, Shape shape, std::vector<U> data,
                                  std::vector<Tensor<U>> inputs, detail::BackwardFn<U> backward);

  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// Builds the result of a differentiable op. The node is recorded only when
/// grad mode is on and some input requires grad; otherwise `backward` is
/// dropped and the result is a plain constant.
template <typename T>
Tensor<T> make_op_result(std::string op, Shape shape, std::vector<T> data,
                         std::vector<Tensor<T>> inputs, detail::BackwardFn<T> backward);

/// True when grads should be accumulated into `t` by a backward rule.
template <typename T>
bool wants_grad(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace moemamba
