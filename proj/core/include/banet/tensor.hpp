#pragma once

// Dense 5-D (N, C, D, H, W) tensors with a define-by-run gradient tape.
//
// Tensors are shared handles: copying a Tensor aliases its storage. Ops
// record themselves on the thread's active Tape (see Tape::record) when at
// least one input requires a gradient; with no active tape they run as plain
// forward computations.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "banet/common.hpp"

namespace banet {

struct Shape {
  int n = 1;
  int c = 1;
  int d = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * spatial();
  }
  std::size_t spatial() const {
    return static_cast<std::size_t>(d) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  Int3 spatial_dims() const { return {d, h, w}; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  int node_id = -1;
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(const Shape& shape, T fill = T(0));
  Tensor(const Shape& shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, value); }

  bool defined() const { return static_cast<bool>(storage_); }
  const Shape& shape() const { return storage_->shape; }
  std::size_t numel() const { return storage_->values.size(); }

  std::span<T> values() { return storage_->values; }
  std::span<const T> values() const { return storage_->values; }
  T* data() { return storage_->values.data(); }
  const T* data() const { return storage_->values.data(); }

  std::size_t index(int n, int c, int z, int y, int x) const {
    const Shape& s = storage_->shape;
    return (((static_cast<std::size_t>(n) * s.c + c) * s.d + z) * s.h + y) * s.w + x;
  }
  T at(int n, int c, int z, int y, int x) const { return storage_->values[index(n, c, z, y, x)]; }
  T& at(int n, int c, int z, int y, int x) { return storage_->values[index(n, c, z, y, x)]; }

  /// Value of a single-element tensor.
  T item() const;

  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<T> grad() { return storage_->grad; }
  std::span<const T> grad() const { return storage_->grad; }
  /// Allocates a zero gradient if absent and returns it.
  std::vector<T>& grad_buffer();
  void zero_grad() { storage_->grad.clear(); }

  bool requires_grad() const { return storage_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    storage_->requires_grad = on;
    return *this;
  }
  int node_id() const { return storage_->node_id; }

  /// Deep copy of the values without gradient or tape linkage.
  Tensor detach() const { return Tensor(shape(), storage_->values); }

  const std::shared_ptr<TensorStorage<T>>& storage() const { return storage_; }

 private:
  std::shared_ptr<TensorStorage<T>> storage_;
};

/// Ordered record of differentiable operations for one forward pass.
template <typename T>
class Tape {
 public:
  using Storage = std::shared_ptr<TensorStorage<T>>;
  using BackwardFn = std::function<void()>;

  struct Node {
    std::string op;
    std::vector<Storage> inputs;
    Storage output;
    BackwardFn backward;
  };

  /// Makes a tape the active one for the current thread while alive.
  class Recording {
   public:
    explicit Recording(Tape& tape) : previous_(active_) { active_ = &tape; }
    ~Recording() { active_ = previous_; }
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  [[nodiscard]] Recording record() { return Recording(*this); }
  static Tape* active() { return active_; }

  /// Appends a node producing `output` and marks it as requiring grad. The
  /// backward rule reads output->grad and accumulates into its inputs.
  void push(std::string op, std::initializer_list<const Tensor<T>*> inputs,
            const Tensor<T>& output, BackwardFn backward);

  /// Propagates d(loss)/d(.) to every reachable tensor that requires grad.
  void backward(const Tensor<T>& loss);

  void reset();
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node>& nodes() const { return nodes_; }

  /// Name of the first recorded op whose output holds NaN/Inf while all of
  /// its inputs are finite.
  std::optional<std::string> first_non_finite_op() const;

 private:
  static thread_local Tape* active_;
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <typename T>
thread_local Tape<T>* Tape<T>::active_ = nullptr;

/// True if an op with these inputs should be recorded.
template <typename T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr) return nullptr;
  for (const Tensor<T>* t : inputs)
    if (t->requires_grad()) return tape;
  return nullptr;
}

/// Gradient buffer of `s` if it participates in differentiation, else null.
template <typename T>
std::vector<T>* grad_sink(const std::shared_ptr<TensorStorage<T>>& s) {
  if (!s->requires_grad) return nullptr;
  if (s->grad.empty()) s->grad.assign(s->values.size(), T(0));
  return &s->grad;
}

// Elementwise arithmetic. `b` may be channel-broadcast: shape (N,1,D,H,W)
// against `a` of shape (N,C,D,H,W).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scalar_add(const Tensor<T>& a, T s);
template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T s);

/// Channel concatenation; a's channels come first.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
/// Channels [start, start + count).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int start, int count);

/// Sum of all elements as a (1,1,1,1,1) tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x);

bool shapes_broadcastable(const Shape& a, const Shape& b);

}  // namespace banet
