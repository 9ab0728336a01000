#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hmode/error.hpp"

namespace hmode {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until the first gradient lands
  bool requires_grad = false;
  bool is_leaf = true;
};

/// Dense row-major tensor with an optional gradient slot.
///
/// Copies share storage, so a Tensor behaves like a handle. Values are never
/// rewritten by the differentiable ops; only parameters are mutated in place
/// (by the optimizer) through mutable_values().
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return data_->shape; }
  std::size_t rank() const { return data_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return data_->shape.at(axis); }
  std::size_t numel() const { return data_->values.size(); }

  std::span<const T> values() const { return data_->values; }
  std::span<T> mutable_values() { return data_->values; }
  T item() const;
  T operator[](std::size_t flat) const { return data_->values[flat]; }
  T at(std::size_t i, std::size_t j) const;
  T at(std::size_t c, std::size_t i, std::size_t j) const;

  bool requires_grad() const { return data_->requires_grad; }
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return data_->is_leaf; }
  bool has_grad() const { return !data_->grad.empty(); }
  /// Gradient values; all zeros if nothing has been accumulated yet.
  std::vector<T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad();

  /// Deep copy detached from any tape.
  Tensor clone() const;

  TensorStorage<T>* storage() const { return data_.get(); }
  const std::shared_ptr<TensorStorage<T>>& shared_storage() const { return data_; }

 private:
  explicit Tensor(std::shared_ptr<TensorStorage<T>> data) : data_(std::move(data)) {}
  template <typename>
  friend class Tape;
  template <typename U>
  friend Tensor<U> make_op_output(Shape shape, std::vector<U> values, bool requires_grad);

  std::shared_ptr<TensorStorage<T>> data_;
};

template <typename T>
Tensor<T> make_op_output(Shape shape, std::vector<T> values, bool requires_grad);

/// Record of executed differentiable operations for one thread and precision.
///
/// Entries are appended in execution order; backward() walks them in exact
/// reverse order starting from the entry that produced the root.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  static Tape& active();

  bool recording() const { return enabled_; }
  void set_recording(bool on) { enabled_ = on; }

  void record(const Tensor<T>& output, BackwardFn fn);
  /// One entry for an op with several outputs; fn sees all output gradients.
  void record(std::span<const Tensor<T>> outputs, BackwardFn fn);
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  void backward(const Tensor<T>& root);

 private:
  struct Entry {
    std::vector<std::shared_ptr<TensorStorage<T>>> outputs;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  bool enabled_ = true;
};

/// Suspends tape recording for the current thread and precision.
template <typename T>
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape<T>::active().recording()) {
    Tape<T>::active().set_recording(false);
  }
  ~NoGradGuard() { Tape<T>::active().set_recording(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Populates gradients of every requires_grad tensor reachable from `root`.
template <typename T>
void backward(const Tensor<T>& root) {
  Tape<T>::active().backward(root);
}

/// Accumulates `delta` into the gradient slot of `t`, allocating it if needed.
template <typename T>
void accumulate_grad(TensorStorage<T>& t, std::span<const T> delta);

template <typename T>
std::span<T> grad_slot(TensorStorage<T>& t);

}  // namespace hmode
