#include "samdkif/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace samdkif {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) {
      out << 'x';
    }
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor() : impl_(std::make_shared<TensorStorage<T>>()) {
  impl_->shape = Shape{0};
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<TensorStorage<T>>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : impl_(std::make_shared<TensorStorage<T>>()) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("Tensor: shape " + shape_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::matrix(std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<T> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) {
      throw ShapeError("Tensor::matrix: ragged rows");
    }
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(values));
}

template <typename T>
Tensor<T> Tensor<T>::vector(std::initializer_list<T> values) {
  return Tensor(Shape{values.size()}, std::vector<T>(values));
}

template <typename T>
Tensor<T> Tensor<T>::vector(std::vector<T> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

template <typename T>
Tensor<T> Tensor<T>::identity(std::size_t n) {
  Tensor out(Shape{n, n});
  for (std::size_t i = 0; i < n; ++i) {
    out[i * n + i] = T(1);
  }
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, Rng& rng, double stddev) {
  Tensor out(std::move(shape));
  for (auto& v : out.values()) {
    v = static_cast<T>(rng.normal() * stddev);
  }
  return out;
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  const auto& s = impl_->shape;
  if (s.size() == 2) {
    return s[0];
  }
  return 1;
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  const auto& s = impl_->shape;
  if (s.size() == 2) {
    return s[1];
  }
  if (s.size() == 1) {
    return s[0];
  }
  return 1;
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) {
    throw ContractError("Tensor::item on tensor of shape " + shape_string(shape()));
  }
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

template <typename T>
std::span<T> Tensor<T>::grad() {
  if (impl_->grad.size() != impl_->data.size()) {
    impl_->grad.assign(impl_->data.size(), T(0));
  }
  return impl_->grad;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(impl_->shape, impl_->data);
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (shape_numel(shape) != size()) {
    throw ShapeError("reshape: " + shape_string(this->shape()) + " -> " + shape_string(shape));
  }
  Tensor out(std::move(shape), impl_->data);
  return out;
}

// ---------------------------------------------------------------------------
// Tape

namespace {

template <typename T>
Tape<T>*& current_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

template <typename T>
std::size_t& backward_counter() {
  thread_local std::size_t count = 0;
  return count;
}

template <typename T>
std::vector<T>& grad_of(TensorStorage<T>& s) {
  if (s.grad.size() != s.data.size()) {
    s.grad.assign(s.data.size(), T(0));
  }
  return s.grad;
}

template <typename T>
using StoragePtr = std::shared_ptr<TensorStorage<T>>;

template <typename T>
bool wants_grad(const Tensor<T>& t) {
  return t.requires_grad();
}

/// Returns the tape to record on, or nullptr when the op needs no node.
template <typename T, typename... Ts>
Tape<T>* recording(const Ts&... inputs) {
  Tape<T>* tape = current_tape<T>();
  if (tape == nullptr) {
    return nullptr;
  }
  const bool any = (wants_grad(inputs) || ...);
  return any ? tape : nullptr;
}

template <typename T>
void require_matrix(const Tensor<T>& a, const char* op) {
  if (a.ndim() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

}  // namespace

template <typename T>
void Tape<T>::record(const Tensor<T>& output, Backward backward) {
  nodes_.push_back(Node{output.handle(), std::move(backward)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " + shape_string(loss.shape()));
  }
  ++backward_counter<T>();
  for (auto& node : nodes_) {
    node.output->grad.clear();
  }
  auto loss_handle = loss.handle();
  grad_of(*loss_handle)[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output->grad.empty()) {
      it->backward();
    }
  }
}

template <typename T>
std::size_t Tape<T>::backward_calls() {
  return backward_counter<T>();
}

template <typename T>
void Tape<T>::reset_backward_calls() {
  backward_counter<T>() = 0;
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(current_tape<T>()) {
  current_tape<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  current_tape<T>() = previous_;
}

template <typename T>
NoGradScope<T>::NoGradScope() : previous_(current_tape<T>()) {
  current_tape<T>() = nullptr;
}

template <typename T>
NoGradScope<T>::~NoGradScope() {
  current_tape<T>() = previous_;
}

template <typename T>
Tape<T>* active_tape() {
  return current_tape<T>();
}

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = current_tape<T>();
  if (tape == nullptr) {
    throw ContractError("backward: no active tape");
  }
  tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Kernels

namespace kernels {

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  // Four rows of C at a time so each row of B is loaded once per block.
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    T* __restrict c0 = c + i * n;
    T* __restrict c1 = c0 + n;
    T* __restrict c2 = c1 + n;
    T* __restrict c3 = c2 + n;
    const T* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
      const T* __restrict brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bj = brow[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += aip * brow[j];
      }
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) {
      bt[p * n + j] = b[j * k + p];
    }
  }
  gemm_nn(a, bt.data(), c, m, k, n);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = arow[i];
      if (api == T(0)) {
        continue;
      }
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += api * brow[j];
      }
    }
  }
}

}  // namespace kernels

// ---------------------------------------------------------------------------
// Operations

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() > 2 || b.ndim() > 2 || a.ndim() == 0 || b.ndim() == 0) {
    throw ShapeError("matmul: unsupported ranks " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  const std::size_t m = a.rows();
  const std::size_t k = a.cols();
  const std::size_t n = b.ndim() == 2 ? b.cols() : 1;
  const std::size_t kb = b.ndim() == 2 ? b.rows() : b.size();
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  }
  Tensor<T> out(Shape{m, n});
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  if (auto* tape = recording<T>(a, b)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.handle(), sb = b.handle(), so = out.handle();
    tape->record(out, [sa, sb, so, m, k, n] {
      if (sa->requires_grad) {
        kernels::gemm_nt(so->grad.data(), sb->data.data(), grad_of(*sa).data(), m, n, k);
      }
      if (sb->requires_grad) {
        kernels::gemm_tn(sa->data.data(), so->grad.data(), grad_of(*sb).data(), k, m, n);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor<T> out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out[j * r + i] = a[i * c + j];
    }
  }
  if (auto* tape = recording<T>(a)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.handle(), so = out.handle();
    tape->record(out, [sa, so, r, c] {
      auto& ga = grad_of(*sa);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          ga[i * c + j] += so->grad[j * r + i];
        }
      }
    });
  }
  return out;
}

namespace {

enum class Broadcast { same, row, scalar };

template <typename T>
Broadcast classify_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) {
    return Broadcast::same;
  }
  if (b.size() == 1) {
    return Broadcast::scalar;
  }
  if (a.ndim() == 2 && b.size() == a.cols() && (b.ndim() == 1 || b.rows() == 1)) {
    return Broadcast::row;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(b.shape()) + " onto " +
                   shape_string(a.shape()));
}

template <typename T>
std::size_t broadcast_index(Broadcast kind, std::size_t i, std::size_t cols) {
  switch (kind) {
    case Broadcast::same:
      return i;
    case Broadcast::row:
      return i % cols;
    case Broadcast::scalar:
      return 0;
  }
  return 0;
}

// a (op) b with b broadcast onto a. sign_b = -1 turns add into sub.
template <typename T>
Tensor<T> add_impl(const Tensor<T>& a, const Tensor<T>& b, T sign_b, const char* name) {
  const Broadcast kind = classify_broadcast(a, b, name);
  const std::size_t n = a.size(), cols = a.cols();
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = a[i] + sign_b * b[broadcast_index<T>(kind, i, cols)];
  }
  if (auto* tape = recording<T>(a, b)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.handle(), sb = b.handle(), so = out.handle();
    tape->record(out, [sa, sb, so, kind, n, cols, sign_b] {
      if (sa->requires_grad) {
        auto& ga = grad_of(*sa);
        for (std::size_t i = 0; i < n; ++i) {
          ga[i] += so->grad[i];
        }
      }
      if (sb->requires_grad) {
        auto& gb = grad_of(*sb);
        for (std::size_t i = 0; i < n; ++i) {
          gb[broadcast_index<T>(kind, i, cols)] += sign_b * so->grad[i];
        }
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() < b.size()) {
    return add_impl(b, a, T(1), "add");
  }
  return add_impl(a, b, T(1), "add");
}


template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() < b.size()) {
    return scale(add_impl(b, a, T(-1), "sub"), T(-1));
  }
  return add_impl(a, b, T(-1), "sub");
}

namespace {

template <typename T>
Tensor<T> mul_impl(const Tensor<T>& a, const Tensor<T>& b) {
  const Broadcast kind = classify_broadcast(a, b, "mul");
  const std::size_t n = a.size(), cols = a.cols();
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = a[i] * b[broadcast_index<T>(kind, i, cols)];
  }
  if (auto* tape = recording<T>(a, b)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.handle(), sb = b.handle(), so = out.handle();
    tape->record(out, [sa, sb, so, kind, n, cols] {
      if (sa->requires_grad) {
        auto& ga = grad_of(*sa);
        for (std::size_t i = 0; i < n; ++i) {
          ga[i] += so->grad[i] * sb->data[broadcast_index<T>(kind, i, cols)];
        }
      }
      if (sb->requires_grad) {
        auto& gb = grad_of(*sb);
        for (std::size_t i = 0; i < n; ++i) {
          gb[broadcast_index<T>(kind, i, cols)] += so->grad[i] * sa->data[i];
        }
      }
    });
  }
  return out;
}

// Shared scaffolding for y = f(x) with dy/dx computed from (x, y).
template <typename T, typename Forward, typename Derivative>
Tensor<T> unary(const Tensor<T>& a, Forward f, Derivative df) {
  const std::size_t n = a.size();
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(a[i]);
  }
  if (auto* tape = recording<T>(a)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.handle(), so = out.handle();
    tape->record(out, [sa, so, n, df] {
      auto& ga = grad_of(*sa);
      for (std::size_t i = 0; i < n; ++i) {
        ga[i] += so->grad[i] * df(sa->data[i], so->data[i]);
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() < b.size()) {
    return mul_impl(b, a);
  }
  return mul_impl(a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(
      a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  return unary(
      a,
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x))); },
      [](T x, T) {
        const T t = std::tanh(c * (x + k * x * x * x));
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
      });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  const T eps = static_cast<T>(kLogEpsilon);
  return unary(
      a, [eps](T x) { return std::log(std::max(x, eps)); },
      [eps](T x, T) { return x > eps ? T(1) / x : T(0); });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) {
    throw ContractError("dropout: p must lie in [0, 1)");
  }
  if (!training || p == 0.0) {
    return a;
  }
  const std::size_t n = a.size();
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(n);
  for (auto& m : *mask) {
    m = rng.uniform() < p ? T(0) : keep_scale;
  }
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = a[i] * (*mask)[i];
  }
  if (auto* tape = recording<T>(a)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.handle(), so = out.handle();
    tape->record(out, [sa, so, mask, n] {
      auto& ga = grad_of(*sa);
      for (std::size_t i = 0; i < n; ++i) {
        ga[i] += so->grad[i] * (*mask)[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < r; ++i) {
    const T* x = a.data().data() + i * c;
    T* y = out.data().data() + i * c;
    const T mx = *std::max_element(x, x + c);
    T total = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      total += y[j];
    }
    for (std::size_t j = 0; j < c; ++j) {
      y[j] /= total;
    }
  }
  if (auto* tape = recording<T>(a)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.handle(), so = out.handle();
    tape->record(out, [sa, so, r, c] {
      auto& ga = grad_of(*sa);
      for (std::size_t i = 0; i < r; ++i) {
        const T* y = so->data.data() + i * c;
        const T* gy = so->grad.data() + i * c;
        T dot = T(0);
        for (std::size_t j = 0; j < c; ++j) {
          dot += y[j] * gy[j];
        }
        for (std::size_t j = 0; j < c; ++j) {
          ga[i * c + j] += y[j] * (gy[j] - dot);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.size() != c || bias.size() != c) {
    throw ShapeError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                     shape_string(bias.shape()) + " vs input " + shape_string(x.shape()));
  }
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(r * c);
  auto inv_std = std::make_shared<std::vector<T>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const T* xi = x.data().data() + i * c;
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      mu += xi[j];
    }
    mu /= static_cast<T>(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      var += (xi[j] - mu) * (xi[j] - mu);
    }
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T h = (xi[j] - mu) * is;
      (*xhat)[i * c + j] = h;
      out[i * c + j] = h * gain[j] + bias[j];
    }
  }
  if (auto* tape = recording<T>(x, gain, bias)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.handle(), sg = gain.handle(), sb = bias.handle(), so = out.handle();
    tape->record(out, [sx, sg, sb, so, xhat, inv_std, r, c] {
      const T* gy = so->grad.data();
      if (sg->requires_grad) {
        auto& gg = grad_of(*sg);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            gg[j] += gy[i * c + j] * (*xhat)[i * c + j];
          }
        }
      }
      if (sb->requires_grad) {
        auto& gb = grad_of(*sb);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) {
            gb[j] += gy[i * c + j];
          }
        }
      }
      if (sx->requires_grad) {
        auto& gx = grad_of(*sx);
        std::vector<T> dh(c);
        for (std::size_t i = 0; i < r; ++i) {
          T mean_dh = T(0), mean_dh_h = T(0);
          for (std::size_t j = 0; j < c; ++j) {
            dh[j] = gy[i * c + j] * sg->data[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * (*xhat)[i * c + j];
          }
          mean_dh /= static_cast<T>(c);
          mean_dh_h /= static_cast<T>(c);
          for (std::size_t j = 0; j < c; ++j) {
            gx[i * c + j] +=
                (*inv_std)[i] * (dh[j] - mean_dh - (*xhat)[i * c + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  require_matrix(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols(), n = ids.size();
  Tensor<T> out(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw ContractError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                          std::to_string(vocab));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data().data() + i * d);
  }
  if (auto* tape = recording<T>(table)) {
    out.set_requires_grad(true);
    StoragePtr<T> st = table.handle(), so = out.handle();
    auto id_copy = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
    tape->record(out, [st, so, id_copy, d] {
      auto& gt = grad_of(*st);
      for (std::size_t i = 0; i < id_copy->size(); ++i) {
        const std::size_t row = static_cast<std::size_t>((*id_copy)[i]);
        for (std::size_t j = 0; j < d; ++j) {
          gt[row * d + j] += so->grad[i * d + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t count) {
  require_matrix(a, "slice_rows");
  if (count > a.rows()) {
    throw ShapeError("slice_rows: " + std::to_string(count) + " rows from " +
                     shape_string(a.shape()));
  }
  const std::size_t c = a.cols();
  Tensor<T> out(Shape{count, c});
  std::copy_n(a.data().data(), count * c, out.data().data());
  if (auto* tape = recording<T>(a)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.handle(), so = out.handle();
    tape->record(out, [sa, so, count, c] {
      auto& ga = grad_of(*sa);
      for (std::size_t i = 0; i < count * c; ++i) {
        ga[i] += so->grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::size_t n_heads) {
  require_matrix(q, "causal_attention");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("causal_attention: q " + shape_string(q.shape()) + ", k " +
                     shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  const std::size_t s = q.rows(), d = q.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    throw ShapeError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  }
  const std::size_t hd = d / n_heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  // probs[h][i][j] for j <= i, stored densely as [h][i*s + j]
  auto probs = std::make_shared<std::vector<T>>(n_heads * s * s, T(0));
  Tensor<T> out(Shape{s, d});
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();
  T* od = out.data().data();
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    T* ph = probs->data() + h * s * s;
    for (std::size_t i = 0; i < s; ++i) {
      T* row = ph + i * s;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j <= i; ++j) {
        T dot = T(0);
        for (std::size_t t = 0; t < hd; ++t) {
          dot += qd[i * d + off + t] * kd[j * d + off + t];
        }
        row[j] = dot * inv_sqrt;
        mx = std::max(mx, row[j]);
      }
      T total = T(0);
      for (std::size_t j = 0; j <= i; ++j) {
        row[j] = std::exp(row[j] - mx);
        total += row[j];
      }
      for (std::size_t j = 0; j <= i; ++j) {
        row[j] /= total;
        const T p = row[j];
        for (std::size_t t = 0; t < hd; ++t) {
          od[i * d + off + t] += p * vd[j * d + off + t];
        }
      }
    }
  }
  if (auto* tape = recording<T>(q, k, v)) {
    out.set_requires_grad(true);
    StoragePtr<T> sq = q.handle(), sk = k.handle(), sv = v.handle(), so = out.handle();
    tape->record(out, [sq, sk, sv, so, probs, s, d, hd, n_heads, inv_sqrt] {
      auto& gq = grad_of(*sq);
      auto& gk = grad_of(*sk);
      auto& gv = grad_of(*sv);
      const T* gout = so->grad.data();
      const T* qd = sq->data.data();
      const T* kd = sk->data.data();
      const T* vd = sv->data.data();
      std::vector<T> dp(s);
      for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t off = h * hd;
        const T* ph = probs->data() + h * s * s;
        for (std::size_t i = 0; i < s; ++i) {
          const T* row = ph + i * s;
          T weighted = T(0);
          for (std::size_t j = 0; j <= i; ++j) {
            T dot = T(0);
            for (std::size_t t = 0; t < hd; ++t) {
              dot += gout[i * d + off + t] * vd[j * d + off + t];
              gv[j * d + off + t] += row[j] * gout[i * d + off + t];
            }
            dp[j] = dot;
            weighted += row[j] * dot;
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const T ds = row[j] * (dp[j] - weighted) * inv_sqrt;
            if (ds == T(0)) {
              continue;
            }
            for (std::size_t t = 0; t < hd; ++t) {
              gq[i * d + off + t] += ds * kd[j * d + off + t];
              gk[j * d + off + t] += ds * qd[i * d + off + t];
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> masked_nll(const Tensor<T>& logits, std::span<const int> targets,
                     std::span<const std::uint8_t> mask) {
  require_matrix(logits, "masked_nll");
  const std::size_t s = logits.rows(), vocab = logits.cols();
  if (targets.size() != s || mask.size() != s) {
    throw ShapeError("masked_nll: logits " + shape_string(logits.shape()) + " with " +
                     std::to_string(targets.size()) + " targets and " +
                     std::to_string(mask.size()) + " mask entries");
  }
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) {
    throw ContractError("masked_nll: answer mask is empty");
  }
  // Softmax of each masked row, kept for the backward pass.
  auto probs = std::make_shared<std::vector<T>>(s * vocab, T(0));
  T total = T(0);
  for (std::size_t i = 0; i < s; ++i) {
    if (mask[i] == 0) {
      continue;
    }
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab) {
      throw ContractError("masked_nll: target id out of range");
    }
    const T* x = logits.data().data() + i * vocab;
    T* p = probs->data() + i * vocab;
    const T mx = *std::max_element(x, x + vocab);
    T z = T(0);
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] = std::exp(x[j] - mx);
      z += p[j];
    }
    for (std::size_t j = 0; j < vocab; ++j) {
      p[j] /= z;
    }
    total += -(x[targets[i]] - mx - std::log(z));
  }
  Tensor<T> out = Tensor<T>::scalar(total);
  if (auto* tape = recording<T>(logits)) {
    out.set_requires_grad(true);
    StoragePtr<T> sl = logits.handle(), so = out.handle();
    auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
    auto msk = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
    tape->record(out, [sl, so, probs, tgt, msk, s, vocab] {
      auto& gl = grad_of(*sl);
      const T g = so->grad[0];
      for (std::size_t i = 0; i < s; ++i) {
        if ((*msk)[i] == 0) {
          continue;
        }
        const T* p = probs->data() + i * vocab;
        for (std::size_t j = 0; j < vocab; ++j) {
          gl[i * vocab + j] += g * p[j];
        }
        gl[i * vocab + static_cast<std::size_t>((*tgt)[i])] -= g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = T(0);
  for (const T x : a.data()) {
    total += x;
  }
  Tensor<T> out = Tensor<T>::scalar(total);
  if (auto* tape = recording<T>(a)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.handle(), so = out.handle();
    tape->record(out, [sa, so] {
      auto& ga = grad_of(*sa);
      for (auto& g : ga) {
        g += so->grad[0];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) {
    throw ContractError("mean: empty tensor");
  }
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> sum_squares(const Tensor<T>& a) {
  T total = T(0);
  for (const T x : a.data()) {
    total += x * x;
  }
  Tensor<T> out = Tensor<T>::scalar(total);
  if (auto* tape = recording<T>(a)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.handle(), so = out.handle();
    tape->record(out, [sa, so] {
      auto& ga = grad_of(*sa);
      const T g = so->grad[0];
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] += T(2) * g * sa->data[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> select(const Tensor<T>& a, std::size_t index) {
  if (index >= a.size()) {
    throw ShapeError("select: index " + std::to_string(index) + " outside " +
                     shape_string(a.shape()));
  }
  Tensor<T> out = Tensor<T>::scalar(a[index]);
  if (auto* tape = recording<T>(a)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.handle(), so = out.handle();
    tape->record(out, [sa, so, index] { grad_of(*sa)[index] += so->grad[0]; });
  }
  return out;
}

template <typename T>
Tensor<T> add_n(const std::vector<Tensor<T>>& terms) {
  if (terms.empty()) {
    throw ContractError("add_n: no terms");
  }
  const Shape shape = terms.front().shape();
  Tensor<T> out(shape);
  bool any_grad = false;
  for (const auto& t : terms) {
    if (t.shape() != shape) {
      throw ShapeError("add_n: " + shape_string(t.shape()) + " vs " + shape_string(shape));
    }
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] += t[i];
    }
    any_grad = any_grad || t.requires_grad();
  }
  Tape<T>* tape = current_tape<T>();
  if (tape != nullptr && any_grad) {
    out.set_requires_grad(true);
    std::vector<StoragePtr<T>> inputs;
    inputs.reserve(terms.size());
    for (const auto& t : terms) {
      inputs.push_back(t.handle());
    }
    StoragePtr<T> so = out.handle();
    tape->record(out, [inputs = std::move(inputs), so] {
      for (const auto& in : inputs) {
        if (!in->requires_grad) {
          continue;
        }
        auto& g = grad_of(*in);
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] += so->grad[i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Instantiations

#define SAMDKIF_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                      \
  template class Tape<T>;                                                                        \
  template class TapeScope<T>;                                                                   \
  template class NoGradScope<T>;                                                                 \
  template Tape<T>* active_tape<T>();                                                            \
  template void backward<T>(const Tensor<T>&);                                                   \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                             \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                  \
  template Tensor<T> gelu<T>(const Tensor<T>&);                                                  \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                   \
  template Tensor<T> log<T>(const Tensor<T>&);                                                   \
  template Tensor<T> dropout<T>(const Tensor<T>&, double, Rng&, bool);                           \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                          \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
  template Tensor<T> embedding<T>(const Tensor<T>&, std::span<const int>);                       \
  template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t);                               \
  template Tensor<T> causal_attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                         std::size_t);                                           \
  template Tensor<T> masked_nll<T>(const Tensor<T>&, std::span<const int>,                       \
                                   std::span<const std::uint8_t>);                               \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                   \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                  \
  template Tensor<T> sum_squares<T>(const Tensor<T>&);                                           \
  template Tensor<T> select<T>(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> add_n<T>(const std::vector<Tensor<T>>&);                                    \
  template void kernels::gemm_nn<T>(const T*, const T*, T*, std::size_t, std::size_t,            \
                                    std::size_t);                                                \
  template void kernels::gemm_nt<T>(const T*, const T*, T*, std::size_t, std::size_t,            \
                                    std::size_t);                                                \
  template void kernels::gemm_tn<T>(const T*, const T*, T*, std::size_t, std::size_t,            \
                                    std::size_t);

SAMDKIF_INSTANTIATE(float)
SAMDKIF_INSTANTIATE(double)

#undef SAMDKIF_INSTANTIATE

}  // namespace samdkif
