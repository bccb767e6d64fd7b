#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation.
//
// The tape is implicit: every op that runs while gradients are enabled
// returns a tensor that owns (a) its forward values and (b) a closure that
// routes the incoming gradient to the op's inputs. backward() walks that
// graph once in reverse topological order, accumulates into leaf gradient
// buffers, and frees the traversed closures, so each forward pass pays for
// exactly one tape. Leaf tensors — parameters — keep their gradients until
// they are zeroed; repeated backward passes therefore accumulate.
//
// Values are immutable after construction. The one sanctioned exception is
// mutable_data()/mutable_grad() on leaves, used by the optimizer between
// passes. Shared reads are safe from any number of threads; writes through
// the optimizer must be single-threaded.
//
// Every op verifies its output is finite and throws NumericError otherwise,
// so NaN/Inf surfaces at the op that produced it rather than three modules
// later.

#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

#include "timesaf/common.hpp"
#include "timesaf/rng.hpp"

namespace timesaf {

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;  // allocated lazily, kept for leaves
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), real(0));
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, real v);
  static Tensor scalar(real v) { return full({1}, v); }
  static Tensor from_data(Shape s, std::vector<real> v);
  static Tensor randn(Shape s, Rng& rng, real stddev = 1.0);
  static Tensor truncated_normal(Shape s, Rng& rng, real stddev);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  Index size() const { return static_cast<Index>(impl_->data.size()); }
  Index dim(int d) const { return impl_->shape[static_cast<std::size_t>(d)]; }

  std::span<const real> data() const { return impl_->data; }
  real value() const;  // scalar tensors only
  real at(std::initializer_list<Index> idx) const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<real> grad_vector() const;  // zeros when untouched
  void zero_grad();

  // Reverse pass from a scalar. Frees the traversed tape; leaf grads remain.
  void backward() const;

  // Leaf-only mutation points for the optimizer / loaders.
  std::span<real> mutable_data();
  std::span<real> mutable_grad();

  // Internal handle; ops and the parameter store go through this.
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Evaluation-scope guard: ops run while a NoGradGuard is alive produce
// constants, so inference loops don't grow tapes.
bool grad_enabled();
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---- elementwise (NumPy-style broadcasting over trailing dimensions) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, real c);
Tensor add_scalar(const Tensor& a, real c);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

// ---- shape movement ----
Tensor reshape(const Tensor& a, Shape s);
Tensor permute(const Tensor& a, const std::vector<int>& dims);
Tensor transpose_last2(const Tensor& a);
// out[i] = a.flat[idx[i]]; backward scatter-adds. idx is shared so the tape
// closure does not copy potentially large index maps.
Tensor take(const Tensor& a, std::shared_ptr<const std::vector<Index>> idx,
            Shape out_shape);

// ---- contractions / reductions ----
// Batched matmul: [..., m, k] x [..., k, n] with leading dims broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& a);   // scalar
Tensor mean(const Tensor& a);  // scalar

// ---- normalization and friends ----
Tensor softmax_lastdim(const Tensor& a);
// Per-slice (last dim) standardization followed by an affine map. gain and
// bias broadcast against the slice.
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 real eps = 1e-5);
// Inverted dropout: scales surviving activations by 1/(1-rate) in training
// mode, identity in eval mode or at rate 0.
Tensor dropout(const Tensor& a, real rate, bool train, Rng& rng);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace timesaf
