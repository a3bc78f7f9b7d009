#pragma once

// Dense tensors with reverse-mode autodiff recorded on an explicit tape.
//
// A Tensor is a shared handle: copies alias the same storage, the way graph
// nodes need them to. Operations only record a backward rule when a Tape is
// active on the calling thread and at least one input requires a gradient;
// without a tape every op is a plain forward computation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace jooci {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// 64-byte aligned storage. Vectorized reductions peel an unaligned head,
// so their rounding would otherwise depend on where malloc put the buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <class T>
struct TensorImpl {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until something writes a gradient
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <class T>
class Tensor {
 public:
  using value_type = T;
  using Impl = TensorImpl<T>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : impl_(std::make_shared<Impl>()) {
    impl_->data.assign(jooci::numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data) : impl_(std::make_shared<Impl>()) {
    if (jooci::numel(shape) != data.size()) {
      throw std::invalid_argument("Tensor: shape " + to_string(shape) + " holds " +
                                  std::to_string(jooci::numel(shape)) + " elements, got " +
                                  std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data.assign(data.begin(), data.end());
  }

  Tensor(Shape shape, Buffer<T> data) : impl_(std::make_shared<Impl>()) {
    if (jooci::numel(shape) != data.size()) {
      throw std::invalid_argument("Tensor: shape " + to_string(shape) + " holds " +
                                  std::to_string(jooci::numel(shape)) + " elements, got " +
                                  std::to_string(data.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const std::shared_ptr<Impl>& impl() const { return impl_; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (numel() != 1) {
      throw std::invalid_argument("item() on tensor of shape " + to_string(shape()));
    }
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  // Deep copy without gradient or graph linkage.
  Tensor clone() const { return Tensor(shape(), impl_->data); }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape(), std::vector<U>(impl_->data.begin(), impl_->data.end()));
  }

 private:
  std::shared_ptr<Impl> impl_;
};

// Ordered record of operations. Construction makes the tape active for the
// calling thread (for scalar type T); destruction restores the previous one.
template <class T>
class Tape {
 public:
  struct Node {
    std::shared_ptr<TensorImpl<T>> output;
    std::function<void()> backward;
  };

  Tape() : previous_(active_slot()) { active_slot() = this; }
  ~Tape() { active_slot() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_slot(); }

  void push(std::shared_ptr<TensorImpl<T>> output, std::function<void()> backward) {
    nodes_.push_back(Node{std::move(output), std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

 private:
  template <class U>
  friend class NoGrad;

  static Tape*& active_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }

  Tape* previous_;
  std::vector<Node> nodes_;
};

// Suspends recording for the current scope.
template <class T>
class NoGrad {
 public:
  NoGrad() : saved_(Tape<T>::active_slot()) { Tape<T>::active_slot() = nullptr; }
  ~NoGrad() { Tape<T>::active_slot() = saved_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  Tape<T>* saved_;
};

// Propagates d(loss)/d(x) to every requires_grad tensor reachable through the
// tape. Gradients accumulate, so call zero_grad on parameters between steps.
template <class T>
void backward(Tape<T>& tape, const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  auto& impl = *loss.impl();
  impl.ensure_grad();
  impl.grad[0] += T(1);
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not on a path to the loss
    it->backward();
  }
}

namespace detail {

template <class T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <class T>
bool should_record(std::initializer_list<const Tensor<T>*> inputs) {
  return Tape<T>::active() != nullptr && any_requires_grad<T>(inputs);
}

template <class T>
void record(Tensor<T>& out, std::function<void()> backward_rule) {
  out.impl()->requires_grad = true;
  Tape<T>::active()->push(out.impl(), std::move(backward_rule));
}

// Gradient buffer of an input, or nullptr when the input is not tracked.
template <class T>
Buffer<T>* grad_sink(const std::shared_ptr<TensorImpl<T>>& impl) {
  if (!impl || !impl->requires_grad) return nullptr;
  impl->ensure_grad();
  return &impl->grad;
}

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
#ifndef NDEBUG
  for (T v : t.data()) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string(op) + ": produced non-finite value");
    }
  }
#else
  (void)t;
  (void)op;
#endif
}

}  // namespace detail
}  // namespace jooci
