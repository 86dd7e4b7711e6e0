#include "moemamba/tensor.hpp"

#include <algorithm>
#include <unordered_set>
#include <utility>

#include "moemamba/errors.hpp"

namespace moemamba {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

std::string_view dtype_name(DType dtype) {
  return dtype == DType::kFloat32 ? "float32" : "float64";
}

DType parse_dtype(std::string_view name) {
  if (name == "float32") return DType::kFloat32;
  if (name == "float64") return DType::kFloat64;
  throw ConfigError("unknown dtype '" + std::string(name) + "' (expected float32 or float64)");
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                     " elements but " + std::to_string(data.size()) + " were given");
  }
  impl_ = std::make_shared<detail::TensorImpl<T>>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  std::vector<T> data(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw UsageError("shape() on an undefined tensor");
  return impl_->shape;
}

template <typename T>
std::size_t Tensor<T>::size(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return impl_ ? impl_->data.size() : 0;
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!impl_) return {};
  return impl_->data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!impl_) return {};
  return impl_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool value) {
  if (!impl_) throw UsageError("set_requires_grad on an undefined tensor");
  if (!value && impl_->node) throw UsageError("cannot clear requires_grad on a non-leaf tensor");
  impl_->requires_grad = value;
  return *this;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return !impl_ || !impl_->node;
}

template <typename T>
std::string_view Tensor<T>::op_name() const {
  if (!impl_ || !impl_->node) return "leaf";
  return impl_->node->op;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) return {};
  return impl_->grad;
}

template <typename T>
std::span<T> Tensor<T>::grad_buffer() const {
  if (!impl_) throw UsageError("grad_buffer() on an undefined tensor");
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() const {
  if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  if (!impl_) return {};
  return Tensor(impl_->shape, impl_->data, false);
}

template <typename T>
void Tensor<T>::backward() const {
  using Impl = detail::TensorImpl<T>;
  if (!impl_) throw UsageError("backward() on an undefined tensor");
  if (impl_->data.size() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " + shape_str(impl_->shape));
  }
  if (impl_->node && impl_->node->released) {
    throw UsageError("backward() on a released tape: the graph was already differentiated");
  }
  if (!impl_->requires_grad) throw UsageError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order with inputs first.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [current, next_input] = stack.back();
    const auto& node = current->node;
    if (node && node->released) {
      throw UsageError("backward() reached a released tape node '" + node->op + "'");
    }
    if (node && next_input < node->inputs.size()) {
      Impl* child = node->inputs[next_input++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(current);
    stack.pop_back();
  }

  for (Impl* t : order) {
    if (t->grad.empty()) t->grad.assign(t->data.size(), T(0));
  }
  impl_->grad[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* t = *it;
    if (t->node && t->node->backward) t->node->backward(t->grad, t->data);
  }
  for (Impl* t : order) {
    if (!t->node) continue;
    t->node->backward = nullptr;
    t->node->inputs.clear();
    t->node->released = true;
  }
}

template <typename T>
Tensor<T> make_op_result(std::string op, Shape shape, std::vector<T> data,
                         std::vector<Tensor<T>> inputs, detail::BackwardFn<T> backward) {
  Tensor<T> out(std::move(shape), std::move(data), false);
  if (!grad_enabled()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor<T>& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<detail::TapeNode<T>>();
  node->op = std::move(op);
  node->inputs.reserve(inputs.size());
  for (auto& in : inputs) {
    if (in.defined()) node->inputs.push_back(in.impl());
  }
  node->backward = std::move(backward);
  out.impl_->requires_grad = true;
  out.impl_->node = std::move(node);
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

template Tensor<float> make_op_result(std::string, Shape, std::vector<float>,
                                      std::vector<Tensor<float>>, detail::BackwardFn<float>);
template Tensor<double> make_op_result(std::string, Shape, std::vector<double>,
                                       std::vector<Tensor<double>>, detail::BackwardFn<double>);

}  // namespace moemamba
