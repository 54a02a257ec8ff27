#pragma once

// Dense row-major tensors with reverse-mode differentiation.
//
// A tensor is a cheap handle onto shared, immutable storage. Operations never
// touch their inputs; they allocate a fresh output and, when any input
// requires a gradient, attach a GradNode that knows how to push the output
// gradient back. Nodes are stamped with a per-thread sequence number so that
// backward() can replay them in strict reverse recording order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pgunet/errors.hpp"

namespace pgu {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorImpl;

template <typename T>
struct GradNode {
  std::uint64_t sequence = 0;
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  // Reads out.grad and accumulates into the gradient buffers of `inputs`.
  std::function<void(const TensorImpl<T>& out)> backward;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;
  bool backward_done = false;
  std::shared_ptr<GradNode<T>> node;

  // Zero-filled gradient buffer, allocated on first use.
  std::vector<T>& grad_buffer();
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  static BasicTensor full(const Shape& shape, T value);
  static BasicTensor zeros(const Shape& shape) { return full(shape, T(0)); }
  static BasicTensor from_data(const Shape& shape, std::vector<T> data);
  // Normal(0, stddev) entries, bitwise reproducible for a given (seed, shape).
  // Draws are made in double precision and rounded, so float and double
  // tensors built from the same seed agree to float precision.
  static BasicTensor randn(const Shape& shape, std::uint64_t seed, double stddev = 1.0);
  static BasicTensor uniform(const Shape& shape, std::uint64_t seed, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const T> data() const;
  T item() const;
  T at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  // Only valid on leaves (tensors not produced by a recorded operation).
  BasicTensor& set_requires_grad(bool on = true);

  // dloss/dthis after backward(); all zeros if no gradient reached it.
  std::vector<T> grad() const;
  bool has_grad() const;
  void zero_grad();

  // In-place update hook for optimizers. Leaves only.
  std::span<T> mutable_data();
  std::span<T> mutable_grad();

  // Independent leaf holding a copy of the data (no graph, no gradient).
  BasicTensor detach() const;

  template <typename U>
  BasicTensor<U> cast() const;

  // Internal: used by operation implementations.
  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
  explicit BasicTensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Ordered replay list for one backward pass: every graph node reachable from
// the loss, sorted by descending recording sequence.
template <typename T>
class GradTape {
 public:
  static GradTape record_from(const BasicTensor<T>& loss);

  std::size_t size() const { return entries_.size(); }
  std::vector<std::uint64_t> sequence_numbers() const;
  void replay();
  // Drops every recorded node so intermediate buffers can be released.
  void discard();

 private:
  std::vector<std::shared_ptr<TensorImpl<T>>> entries_;
};

// Seeds dloss/dloss = 1, replays the tape, and discards the graph.
// Throws GraphError for a non-scalar loss or a second call on the same loss.
template <typename T>
void backward(const BasicTensor<T>& loss);

// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_recording_enabled();

namespace detail {

std::uint64_t next_sequence();

// Digest of the piecewise-linear branch taken by every relu and maxpool
// evaluated while a PatternScope is alive on this thread. Two evaluations
// with equal digests lie in the same smooth region.
class ActivationPattern {
 public:
  void mix(std::uint64_t value) {
    hash_ ^= value + 0x9e3779b97f4a7c15ULL + (hash_ << 6) + (hash_ >> 2);
  }
  std::uint64_t digest() const { return hash_; }

 private:
  std::uint64_t hash_ = 0;
};

ActivationPattern* active_pattern();

class PatternScope {
 public:
  explicit PatternScope(ActivationPattern& pattern);
  ~PatternScope();
  PatternScope(const PatternScope&) = delete;
  PatternScope& operator=(const PatternScope&) = delete;

 private:
  ActivationPattern* previous_;
};

// Throws NumericalError naming `op` if any element is non-finite.
template <typename T>
void check_finite(std::span<const T> values, const char* op);

// Builds the output tensor and, if any input requires grad and recording is
// on, wires up a GradNode.
template <typename T>
BasicTensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                           std::vector<std::shared_ptr<TensorImpl<T>>> inputs,
                           std::function<void(const TensorImpl<T>&)> backward_fn);

}  // namespace detail

}  // namespace pgu
