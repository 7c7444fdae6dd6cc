#include "mvswin/tensor.hpp"

#include <sstream>

namespace mvswin {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " elements, got " +
                         std::to_string(data.size()));
  }
  node_ = std::make_shared<TensorNode<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  const int n = static_cast<int>(ndim());
  const int a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(shape()));
  }
  return node_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw ContractError("item() needs a single-element tensor, got " + shape_str(shape()));
  }
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  node_->requires_grad = flag;
  return *this;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(node_->shape, node_->data, node_->requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->data, false);
}

namespace fault {
namespace {
std::string& corrupted_op() {
  static std::string op;
  return op;
}
}  // namespace

void corrupt_backward(std::string op) { corrupted_op() = std::move(op); }
const std::string& corrupted_backward() { return corrupted_op(); }
}  // namespace fault

template <typename T>
void Tape<T>::record(std::string op, std::shared_ptr<TensorNode<T>> output, Rule rule) {
  entries_.push_back(Entry{std::move(op), std::move(output), std::move(rule)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1 || loss.ndim() != 0) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a loss that does not require grad");
  }
  loss.node()->grad_buffer()[0] += T(1);
  const auto& corrupted = fault::corrupted_backward();
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not reachable from the loss
    if (!corrupted.empty() && it->op == corrupted) {
      for (auto& g : it->output->grad) g *= T(1.5);
    }
    it->rule();
  }
}

namespace {
template <typename T>
Tape<T>*& tape_slot() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace

template <typename T>
Tape<T>* active_tape() {
  return tape_slot<T>();
}

template <typename T>
Recording<T>::Recording(Tape<T>& tape) : previous_(tape_slot<T>()) {
  tape_slot<T>() = &tape;
}

template <typename T>
Recording<T>::~Recording() {
  tape_slot<T>() = previous_;
}

template <typename T>
NoRecording<T>::NoRecording() : previous_(tape_slot<T>()) {
  tape_slot<T>() = nullptr;
}

template <typename T>
NoRecording<T>::~NoRecording() {
  tape_slot<T>() = previous_;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  auto* tape = active_tape<T>();
  if (tape == nullptr) throw ContractError("backward() without an active tape");
  tape->backward(loss);
}

#define MVSWIN_INSTANTIATE(T)                          \
  template class Tensor<T>;                            \
  template class Tape<T>;                              \
  template class Recording<T>;                         \
  template class NoRecording<T>;                       \
  template Tape<T>* active_tape<T>();                  \
  template void backward<T>(const Tensor<T>&);

MVSWIN_INSTANTIATE(float)
MVSWIN_INSTANTIATE(double)

#undef MVSWIN_INSTANTIATE

}  // namespace mvswin
