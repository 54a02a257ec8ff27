#include "pgunet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <unordered_set>

namespace pgu {

namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_sequence = 0;
thread_local detail::ActivationPattern* g_pattern = nullptr;

template <typename T>
TensorImpl<T>& checked(const std::shared_ptr<TensorImpl<T>>& impl) {
  if (!impl) throw ShapeError("operation on an undefined tensor");
  return *impl;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

template <typename T>
std::vector<T>& TensorImpl<T>::grad_buffer() {
  if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  return grad;
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one extent");
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape));
  }
}

}  // namespace

template <typename T>
BasicTensor<T> BasicTensor<T>::full(const Shape& shape, T value) {
  validate_shape(shape);
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = shape;
  impl->data.assign(shape_numel(shape), value);
  return BasicTensor(std::move(impl));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::from_data(const Shape& shape, std::vector<T> data) {
  validate_shape(shape);
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = shape;
  impl->data = std::move(data);
  return BasicTensor(std::move(impl));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::randn(const Shape& shape, std::uint64_t seed, double stddev) {
  validate_shape(shape);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> data(shape_numel(shape));
  for (T& v : data) v = static_cast<T>(dist(rng));
  return from_data(shape, std::move(data));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::uniform(const Shape& shape, std::uint64_t seed, double lo, double hi) {
  validate_shape(shape);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> data(shape_numel(shape));
  for (T& v : data) v = static_cast<T>(dist(rng));
  return from_data(shape, std::move(data));
}

template <typename T>
const Shape& BasicTensor<T>::shape() const {
  return checked(impl_).shape;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) throw ShapeError("axis out of range for shape " + shape_str(s));
  return s[axis];
}

template <typename T>
std::size_t BasicTensor<T>::numel() const {
  return checked(impl_).data.size();
}

template <typename T>
std::span<const T> BasicTensor<T>::data() const {
  return checked(impl_).data;
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename T>
bool BasicTensor<T>::requires_grad() const {
  return checked(impl_).requires_grad;
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  auto& impl = checked(impl_);
  if (impl.node) throw GraphError("requires_grad can only be set on leaf tensors");
  impl.requires_grad = on;
  if (!on) impl.grad.clear();
  return *this;
}

template <typename T>
std::vector<T> BasicTensor<T>::grad() const {
  const auto& impl = checked(impl_);
  if (impl.grad.size() == impl.data.size()) return impl.grad;
  return std::vector<T>(impl.data.size(), T(0));
}

template <typename T>
bool BasicTensor<T>::has_grad() const {
  const auto& impl = checked(impl_);
  return impl.grad.size() == impl.data.size();
}

template <typename T>
void BasicTensor<T>::zero_grad() {
  auto& impl = checked(impl_);
  if (!impl.requires_grad) return;
  impl.grad.assign(impl.data.size(), T(0));
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
  auto& impl = checked(impl_);
  if (impl.node) throw GraphError("mutable_data() on a non-leaf tensor");
  return impl.data;
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_grad() {
  auto& impl = checked(impl_);
  return impl.grad_buffer();
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return from_data(shape(), std::vector<T>(data().begin(), data().end()));
}

template <typename T>
template <typename U>
BasicTensor<U> BasicTensor<T>::cast() const {
  std::vector<U> out(numel());
  std::transform(data().begin(), data().end(), out.begin(), [](T v) { return static_cast<U>(v); });
  auto result = BasicTensor<U>::from_data(shape(), std::move(out));
  result.set_requires_grad(requires_grad());
  return result;
}

template <typename T>
GradTape<T> GradTape<T>::record_from(const BasicTensor<T>& loss) {
  GradTape tape;
  std::unordered_set<const TensorImpl<T>*> seen;
  std::vector<std::shared_ptr<TensorImpl<T>>> stack{loss.impl()};
  while (!stack.empty()) {
    auto current = std::move(stack.back());
    stack.pop_back();
    if (!current->node || !seen.insert(current.get()).second) continue;
    tape.entries_.push_back(current);
    for (const auto& input : current->node->inputs) {
      if (input->node && input->requires_grad) stack.push_back(input);
    }
  }
  std::sort(tape.entries_.begin(), tape.entries_.end(),
            [](const auto& a, const auto& b) { return a->node->sequence > b->node->sequence; });
  return tape;
}

template <typename T>
std::vector<std::uint64_t> GradTape<T>::sequence_numbers() const {
  std::vector<std::uint64_t> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e->node->sequence);
  return out;
}

template <typename T>
void GradTape<T>::replay() {
  for (const auto& entry : entries_) {
    if (entry->grad.size() != entry->data.size()) continue;  // nothing flowed here
    entry->node->backward(*entry);
    detail::check_finite<T>(entry->grad, entry->node->op);
  }
}

template <typename T>
void GradTape<T>::discard() {
  for (const auto& entry : entries_) {
    entry->node.reset();
    entry->grad.clear();
    entry->grad.shrink_to_fit();
  }
  entries_.clear();
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (!loss.defined()) throw GraphError("backward() on an undefined tensor");
  auto& impl = *loss.impl();
  if (impl.backward_done) throw GraphError("backward() called twice on the same graph");
  if (impl.data.size() != 1) {
    throw GraphError("backward() requires a scalar loss, got shape " + shape_str(impl.shape));
  }
  if (!impl.requires_grad) throw GraphError("loss does not depend on any tensor requiring grad");

  if (!impl.node) {
    // Leaf loss: d(loss)/d(loss) = 1.
    impl.grad_buffer()[0] += T(1);
    impl.backward_done = true;
    return;
  }
  auto tape = GradTape<T>::record_from(loss);
  impl.grad_buffer()[0] = T(1);
  tape.replay();
  tape.discard();
  impl.backward_done = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_recording_enabled() { return g_grad_enabled; }

namespace detail {

std::uint64_t next_sequence() { return ++g_sequence; }

ActivationPattern* active_pattern() { return g_pattern; }

PatternScope::PatternScope(ActivationPattern& pattern) : previous_(g_pattern) { g_pattern = &pattern; }
PatternScope::~PatternScope() { g_pattern = previous_; }

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite value produced by ") + op);
  }
}

template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                           std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
                           std::function<void(const TensorImpl<T>&)> backward_fn) {
  check_finite<T>(data, op);
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs_grad = false;
  for (const auto& in : inputs) needs_grad = needs_grad || in->requires_grad;
  if (needs_grad && g_grad_enabled) {
    impl->requires_grad = true;
    auto node = std::make_shared<GradNode<T>>();
    node->sequence = next_sequence();
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
    impl->node = std::move(node);
  }
  return BasicTensor<T>(std::move(impl));
}

template void check_finite<float>(std::span<const float>, const char*);
template void check_finite<double>(std::span<const double>, const char*);
template BasicTensor<float> make_result<float>(Shape, std::vector<float>, const char*,
                                               std::vector<std::shared_ptr<TensorImpl<float>>>,
                                               std::function<void(const TensorImpl<float>&)>);
template BasicTensor<double> make_result<double>(Shape, std::vector<double>, const char*,
                                                 std::vector<std::shared_ptr<TensorImpl<double>>>,
                                                 std::function<void(const TensorImpl<double>&)>);

}  // namespace detail

template struct TensorImpl<float>;
template struct TensorImpl<double>;
template class BasicTensor<float>;
template class BasicTensor<double>;
template BasicTensor<double> BasicTensor<float>::cast<double>() const;
template BasicTensor<float> BasicTensor<double>::cast<float>() const;
template BasicTensor<float> BasicTensor<float>::cast<float>() const;
template BasicTensor<double> BasicTensor<double>::cast<double>() const;
template class GradTape<float>;
template class GradTape<double>;
template void backward<float>(const BasicTensor<float>&);
template void backward<double>(const BasicTensor<double>&);

}  // namespace pgu
