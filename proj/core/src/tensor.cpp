#include "banet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace banet {

std::string Shape::str() const {
  return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(d) + "," +
         std::to_string(h) + "," + std::to_string(w) + ")";
}

template <typename T>
Tensor<T>::Tensor(const Shape& shape, T fill) : storage_(std::make_shared<TensorStorage<T>>()) {
  if (shape.n < 1 || shape.c < 0 || shape.d < 1 || shape.h < 1 || shape.w < 1)
    throw ShapeError("invalid tensor shape " + shape.str());
  storage_->shape = shape;
  storage_->values.assign(shape.numel(), fill);
}

template <typename T>
Tensor<T>::Tensor(const Shape& shape, std::vector<T> values)
    : storage_(std::make_shared<TensorStorage<T>>()) {
  if (shape.n < 1 || shape.c < 0 || shape.d < 1 || shape.h < 1 || shape.w < 1)
    throw ShapeError("invalid tensor shape " + shape.str());
  if (values.size() != shape.numel())
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape.str());
  storage_->shape = shape;
  storage_->values = std::move(values);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
  return storage_->values[0];
}

template <typename T>
std::vector<T>& Tensor<T>::grad_buffer() {
  if (storage_->grad.empty()) storage_->grad.assign(storage_->values.size(), T(0));
  return storage_->grad;
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
void Tape<T>::push(std::string op, std::initializer_list<const Tensor<T>*> inputs,
                   const Tensor<T>& output, BackwardFn backward) {
  if (backward_done_) throw std::logic_error("tape already consumed by backward(); reset first");
  Node node;
  node.op = std::move(op);
  for (const Tensor<T>* t : inputs) node.inputs.push_back(t->storage());
  node.output = output.storage();
  node.output->requires_grad = true;
  node.output->node_id = static_cast<int>(nodes_.size());
  node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (backward_done_)
    throw std::logic_error("backward() called twice on the same tape without reset()");
  if (loss.numel() != 1 || !(loss.shape() == Shape{}))
    throw ShapeError("backward() requires a scalar (1,1,1,1,1) loss, got " + loss.shape().str());
  if (!loss.requires_grad()) throw std::logic_error("backward() on a loss that does not require grad");
  backward_done_ = true;

  auto& seed = *grad_sink(loss.storage());
  seed[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not reachable from the loss
    it->backward();
  }
}

template <typename T>
void Tape<T>::reset() {
  nodes_.clear();
  backward_done_ = false;
}

template <typename T>
std::optional<std::string> Tape<T>::first_non_finite_op() const {
  auto finite = [](const std::vector<T>& v) {
    return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
  };
  for (const Node& node : nodes_) {
    if (finite(node.output->values)) continue;
    bool inputs_ok = std::all_of(node.inputs.begin(), node.inputs.end(),
                                 [&](const Storage& s) { return finite(s->values); });
    if (inputs_ok) return node.op;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Elementwise ops

bool shapes_broadcastable(const Shape& a, const Shape& b) {
  if (a == b) return true;
  return b.c == 1 && a.n == b.n && a.d == b.d && a.h == b.h && a.w == b.w;
}

namespace {

void check_binary(const Shape& a, const Shape& b, const char* op) {
  if (!shapes_broadcastable(a, b))
    throw ShapeError(std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str());
}

// Visits (index into a, index into b) pairs in a's layout.
template <typename F>
void for_each_pair(const Shape& a, const Shape& b, F&& f) {
  if (a == b) {
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) f(i, i);
    return;
  }
  const std::size_t sp = a.spatial();
  std::size_t i = 0;
  for (int n = 0; n < a.n; ++n)
    for (int c = 0; c < a.c; ++c) {
      const std::size_t boff = static_cast<std::size_t>(n) * sp;
      for (std::size_t v = 0; v < sp; ++v, ++i) f(i, boff + v);
    }
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_binary(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for_each_pair(a.shape(), b.shape(), [&](std::size_t i, std::size_t j) { ov[i] = av[i] + bv[j]; });
  if (auto* tape = recording_tape<T>({&a, &b})) {
    tape->push("add", {&a, &b}, out,
               [as = a.storage(), bs = b.storage(), os = out.storage()] {
                 auto* ga = grad_sink(as);
                 auto* gb = grad_sink(bs);
                 const auto& go = os->grad;
                 for_each_pair(as->shape, bs->shape, [&](std::size_t i, std::size_t j) {
                   if (ga) (*ga)[i] += go[i];
                   if (gb) (*gb)[j] += go[i];
                 });
               });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_binary(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for_each_pair(a.shape(), b.shape(), [&](std::size_t i, std::size_t j) { ov[i] = av[i] - bv[j]; });
  if (auto* tape = recording_tape<T>({&a, &b})) {
    tape->push("sub", {&a, &b}, out,
               [as = a.storage(), bs = b.storage(), os = out.storage()] {
                 auto* ga = grad_sink(as);
                 auto* gb = grad_sink(bs);
                 const auto& go = os->grad;
                 for_each_pair(as->shape, bs->shape, [&](std::size_t i, std::size_t j) {
                   if (ga) (*ga)[i] += go[i];
                   if (gb) (*gb)[j] -= go[i];
                 });
               });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_binary(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  const T* av = a.data();
  const T* bv = b.data();
  T* ov = out.data();
  for_each_pair(a.shape(), b.shape(), [&](std::size_t i, std::size_t j) { ov[i] = av[i] * bv[j]; });
  if (auto* tape = recording_tape<T>({&a, &b})) {
    tape->push("mul", {&a, &b}, out,
               [as = a.storage(), bs = b.storage(), os = out.storage()] {
                 auto* ga = grad_sink(as);
                 auto* gb = grad_sink(bs);
                 const auto& go = os->grad;
                 const auto& av = as->values;
                 const auto& bv = bs->values;
                 for_each_pair(as->shape, bs->shape, [&](std::size_t i, std::size_t j) {
                   if (ga) (*ga)[i] += go[i] * bv[j];
                   if (gb) (*gb)[j] += go[i] * av[i];
                 });
               });
  }
  return out;
}

template <typename T>
Tensor<T> scalar_add(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  const auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + s;
  if (auto* tape = recording_tape<T>({&a})) {
    tape->push("scalar_add", {&a}, out, [as = a.storage(), os = out.storage()] {
      auto* ga = grad_sink(as);
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += os->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  const auto av = a.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * s;
  if (auto* tape = recording_tape<T>({&a})) {
    tape->push("scalar_mul", {&a}, out, [as = a.storage(), os = out.storage(), s] {
      auto* ga = grad_sink(as);
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += os->grad[i] * s;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel ops

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.n != sb.n || sa.d != sb.d || sa.h != sb.h || sa.w != sb.w)
    throw ShapeError("concat_channels: mismatched shapes " + sa.str() + " and " + sb.str());
  Shape so = sa;
  so.c = sa.c + sb.c;
  Tensor<T> out(so);
  const std::size_t ablock = static_cast<std::size_t>(sa.c) * sa.spatial();
  const std::size_t bblock = static_cast<std::size_t>(sb.c) * sb.spatial();
  for (int n = 0; n < sa.n; ++n) {
    T* dst = out.data() + n * (ablock + bblock);
    std::copy_n(a.data() + n * ablock, ablock, dst);
    std::copy_n(b.data() + n * bblock, bblock, dst + ablock);
  }
  if (auto* tape = recording_tape<T>({&a, &b})) {
    tape->push("concat_channels", {&a, &b}, out,
               [as = a.storage(), bs = b.storage(), os = out.storage(), ablock, bblock] {
                 auto* ga = grad_sink(as);
                 auto* gb = grad_sink(bs);
                 for (int n = 0; n < os->shape.n; ++n) {
                   const T* src = os->grad.data() + n * (ablock + bblock);
                   if (ga)
                     for (std::size_t i = 0; i < ablock; ++i) (*ga)[n * ablock + i] += src[i];
                   if (gb)
                     for (std::size_t i = 0; i < bblock; ++i)
                       (*gb)[n * bblock + i] += src[ablock + i];
                 }
               });
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int start, int count) {
  const Shape& sx = x.shape();
  if (start < 0 || count < 0 || start + count > sx.c)
    throw ShapeError("slice_channels: range out of bounds for " + sx.str());
  Shape so = sx;
  so.c = count;
  Tensor<T> out(so);
  const std::size_t sp = sx.spatial();
  for (int n = 0; n < sx.n; ++n)
    std::copy_n(x.data() + (static_cast<std::size_t>(n) * sx.c + start) * sp, count * sp,
                out.data() + static_cast<std::size_t>(n) * count * sp);
  if (auto* tape = recording_tape<T>({&x})) {
    tape->push("slice_channels", {&x}, out, [xs = x.storage(), os = out.storage(), start, count] {
      auto* gx = grad_sink(xs);
      const Shape& s = xs->shape;
      const std::size_t sp = s.spatial();
      for (int n = 0; n < s.n; ++n) {
        T* dst = gx->data() + (static_cast<std::size_t>(n) * s.c + start) * sp;
        const T* src = os->grad.data() + static_cast<std::size_t>(n) * count * sp;
        for (std::size_t i = 0; i < count * sp; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0.0;
  for (T v : x.values()) acc += static_cast<double>(v);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (auto* tape = recording_tape<T>({&x})) {
    tape->push("sum", {&x}, out, [xs = x.storage(), os = out.storage()] {
      auto* gx = grad_sink(xs);
      const T g = os->grad[0];
      for (T& v : *gx) v += g;
    });
  }
  return out;
}

#define BANET_INSTANTIATE_TENSOR(T)                                        \
  template class Tensor<T>;                                                \
  template class Tape<T>;                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> scalar_add(const Tensor<T>&, T);                      \
  template Tensor<T> scalar_mul(const Tensor<T>&, T);                      \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);  \
  template Tensor<T> slice_channels(const Tensor<T>&, int, int);           \
  template Tensor<T> sum(const Tensor<T>&);

BANET_INSTANTIATE_TENSOR(float)
BANET_INSTANTIATE_TENSOR(double)

}  // namespace banet
