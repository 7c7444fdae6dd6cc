#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mvswin/error.hpp"

namespace mvswin {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

/// Dense row-major tensor handle.
///
/// Copies share the underlying node, which is what lets a parameter held by a
/// model and the same parameter referenced from the tape accumulate into one
/// gradient buffer. Use clone() for an independent copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor from_node(std::shared_ptr<TensorNode<T>> node) { return Tensor(std::move(node)); }

  bool defined() const { return node_ != nullptr; }
  explicit operator bool() const { return defined(); }

  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  /// Extent of `axis`; negative values count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::size_t flat) const { return node_->data[flat]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_buffer(), node_->data.size()}; }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy with the same requires_grad flag and no gradient.
  Tensor clone() const;
  /// Deep copy that is never recorded.
  Tensor detach() const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of primitive operations for one forward pass.
///
/// Entries are appended in execution order, so replaying their backward rules
/// in reverse visits every consumer before its producers. A tape is meant to
/// be reset after each backward pass and never shared across threads.
template <typename T>
class Tape {
 public:
  using Rule = std::function<void()>;

  void record(std::string op, std::shared_ptr<TensorNode<T>> output, Rule rule);
  /// Seeds d(loss)/d(loss) = 1 and runs every rule in reverse order.
  void backward(const Tensor<T>& loss);
  void reset() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::string op;
    std::shared_ptr<TensorNode<T>> output;
    Rule rule;
  };
  std::vector<Entry> entries_;
};

/// The tape that operations on the current thread record to, or null.
template <typename T>
Tape<T>* active_tape();

/// RAII activation of a tape on the current thread.
template <typename T>
class Recording {
 public:
  explicit Recording(Tape<T>& tape);
  ~Recording();
  Recording(const Recording&) = delete;
  Recording& operator=(const Recording&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording on the current thread for the guard's lifetime.
template <typename T>
class NoRecording {
 public:
  NoRecording();
  ~NoRecording();
  NoRecording(const NoRecording&) = delete;
  NoRecording& operator=(const NoRecording&) = delete;

 private:
  Tape<T>* previous_;
};

/// Runs backward on the active tape.
template <typename T>
void backward(const Tensor<T>& loss);

namespace fault {
/// Test hook: scales the upstream gradient seen by the named op's backward
/// rule by 1.5. Pass an empty string to clear. Used to prove that gradient
/// checking catches broken rules.
void corrupt_backward(std::string op);
const std::string& corrupted_backward();
}  // namespace fault

}  // namespace mvswin
