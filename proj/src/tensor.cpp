#include "hmode/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace hmode {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (shape.empty()) throw InvalidShape("tensor shape must have at least one extent");
  for (std::size_t d : shape) {
    if (d == 0) throw InvalidShape("tensor extents must be positive: " + shape_string(shape));
  }
  if (values.size() != shape_numel(shape)) {
    throw InvalidShape("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_string(shape));
  }
  data_ = std::make_shared<TensorStorage<T>>();
  data_->shape = std::move(shape);
  data_->values = std::move(values);
  data_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw InvalidShape("item() on non-scalar tensor " + shape_string(shape()));
  return data_->values[0];
}

template <typename T>
T Tensor<T>::at(std::size_t i, std::size_t j) const {
  const auto& s = data_->shape;
  return data_->values[i * s.back() + j];
}

template <typename T>
T Tensor<T>::at(std::size_t c, std::size_t i, std::size_t j) const {
  const auto& s = data_->shape;
  const std::size_t h = s[s.size() - 2];
  const std::size_t w = s.back();
  return data_->values[(c * h + i) * w + j];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  data_->requires_grad = on;
  return *this;
}

template <typename T>
std::vector<T> Tensor<T>::grad() const {
  if (data_->grad.empty()) return std::vector<T>(numel(), T(0));
  return data_->grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() {
  return grad_slot(*data_);
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(data_->grad.begin(), data_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(shape(), data_->values, false);
}

template <typename T>
Tensor<T> make_op_output(Shape shape, std::vector<T> values, bool requires_grad) {
  Tensor<T> out(std::move(shape), std::move(values), requires_grad);
  out.data_->is_leaf = false;
  return out;
}

template <typename T>
std::span<T> grad_slot(TensorStorage<T>& t) {
  if (t.grad.empty()) t.grad.assign(t.values.size(), T(0));
  return t.grad;
}

template <typename T>
void accumulate_grad(TensorStorage<T>& t, std::span<const T> delta) {
  auto g = grad_slot(t);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

template <typename T>
Tape<T>& Tape<T>::active() {
  thread_local Tape<T> tape;
  return tape;
}

template <typename T>
void Tape<T>::record(const Tensor<T>& output, BackwardFn fn) {
  entries_.push_back({{output.shared_storage()}, std::move(fn)});
}

template <typename T>
void Tape<T>::record(std::span<const Tensor<T>> outputs, BackwardFn fn) {
  Entry entry{{}, std::move(fn)};
  for (const auto& o : outputs) entry.outputs.push_back(o.shared_storage());
  entries_.push_back(std::move(entry));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& root) {
  if (!root.defined() || root.numel() != 1) {
    throw InvalidArgument("backward() requires a scalar root");
  }
  const auto* target = root.storage();
  auto it = std::find_if(entries_.rbegin(), entries_.rend(), [&](const Entry& e) {
    return std::any_of(e.outputs.begin(), e.outputs.end(),
                       [&](const auto& o) { return o.get() == target; });
  });
  if (it == entries_.rend()) {
    throw InvalidArgument("backward() root was not produced on the active tape");
  }
  const std::size_t last = static_cast<std::size_t>(entries_.rend() - it) - 1;

  // Intermediate gradients restart from zero; leaf gradients accumulate.
  for (std::size_t i = 0; i <= last; ++i) {
    for (auto& out : entries_[i].outputs) out->grad.assign(out->values.size(), T(0));
  }
  root.storage()->grad[0] = T(1);
  for (std::size_t i = last + 1; i-- > 0;) entries_[i].fn();
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template Tensor<float> make_op_output(Shape, std::vector<float>, bool);
template Tensor<double> make_op_output(Shape, std::vector<double>, bool);
template std::span<float> grad_slot(TensorStorage<float>&);
template std::span<double> grad_slot(TensorStorage<double>&);
template void accumulate_grad(TensorStorage<float>&, std::span<const float>);
template void accumulate_grad(TensorStorage<double>&, std::span<const double>);

}  // namespace hmode
