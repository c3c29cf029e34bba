#pragma once

// Dense row-major tensors with a tape-based reverse-mode autodiff.
//
// A Tensor is a shared handle: copies alias the same storage, which is what
// lets a parameter owned by a model and the tape node that consumed it agree
// on where gradients go. Use clone() for a deep copy.
//
// Recording is opt-in. Operations append a node to the tape installed on the
// current thread by a TapeScope, and only when at least one input requires a
// gradient. Without an active tape every operation is a plain evaluation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "samdkif/errors.hpp"
#include "samdkif/rng.hpp"

namespace samdkif {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor();
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows);
  static Tensor vector(std::initializer_list<T> values);
  static Tensor vector(std::vector<T> values);
  static Tensor identity(std::size_t n);
  static Tensor randn(Shape shape, Rng& rng, double stddev);

  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  /// Rows/cols of a matrix view: a vector [n] is treated as 1 x n.
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_scalar() const { return size() == 1; }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  std::vector<T>& values() { return impl_->data; }
  const std::vector<T>& values() const { return impl_->data; }

  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }
  T& at(std::size_t r, std::size_t c) { return impl_->data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; allocated (zero) on first access.
  std::span<T> grad();
  std::span<const T> grad() const;
  void zero_grad();

  /// Deep copy of the values; the result does not require grad.
  Tensor clone() const;
  Tensor reshape(Shape shape) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  TensorStorage<T>& storage() { return *impl_; }
  const TensorStorage<T>& storage() const { return *impl_; }
  std::shared_ptr<TensorStorage<T>> handle() const { return impl_; }

 private:
  std::shared_ptr<TensorStorage<T>> impl_;
};

/// Ordered record of executed primitives. Nodes are appended in execution
/// order, so inputs always precede the nodes that consume them, and backward
/// simply walks the list in reverse.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void()>;

  struct Node {
    std::shared_ptr<TensorStorage<T>> output;
    Backward backward;
  };

  void record(const Tensor<T>& output, Backward backward);

  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor that
  /// requires grad. Intermediate gradients are reset first; leaf gradients
  /// accumulate, so callers zero them between steps.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  /// Number of backward() calls made on any tape of this scalar type on the
  /// current thread. Used to assert gradient-free code paths.
  static std::size_t backward_calls();
  static void reset_backward_calls();

 private:
  std::vector<Node> nodes_;
};

/// Installs a tape as the current recording target for this thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Disables recording for the lifetime of the guard.
template <typename T>
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
Tape<T>* active_tape();

template <typename T>
void backward(const Tensor<T>& loss);

// ---------------------------------------------------------------------------
// Operations. Matrices are 2-D; vectors [n] broadcast as 1 x n rows.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

/// a + b. b may have a's shape, be a row vector matching a's columns, or be a
/// scalar.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise product with the same broadcasting rules as add().
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> relu(const Tensor<T>& a);

/// tanh approximation of GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a);

template <typename T>
Tensor<T> exp(const Tensor<T>& a);

/// Natural log with inputs clamped below at kLogEpsilon.
template <typename T>
Tensor<T> log(const Tensor<T>& a);

inline constexpr double kLogEpsilon = 1e-12;

/// Inverted dropout. Identity when !training or p == 0.
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, Rng& rng, bool training);

/// Row-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a);

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5));

/// Gathers rows of `table` for each id.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);

/// Rows [0, count) of a matrix.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t count);

/// Multi-head scaled dot-product attention with a causal mask. q, k, v are
/// [seq x d_model]; heads split the columns evenly.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t n_heads);

/// -sum_t log softmax(logits[t])[targets[t]] over positions with mask[t] set.
template <typename T>
Tensor<T> masked_nll(const Tensor<T>& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> mean(const Tensor<T>& a);

template <typename T>
Tensor<T> sum_squares(const Tensor<T>& a);

/// Scalar element i of a (flat index).
template <typename T>
Tensor<T> select(const Tensor<T>& a, std::size_t index);

/// Sums a list of tensors of identical shape.
template <typename T>
Tensor<T> add_n(const std::vector<Tensor<T>>& terms);

// Plain (non-recording) kernels shared with code that works on raw buffers.
namespace kernels {

/// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

/// c[m x n] += a[m x k] * b^T, b stored [n x k]
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

/// c[m x n] += a^T * b, a stored [k x m], b stored [k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

}  // namespace kernels

}  // namespace samdkif
