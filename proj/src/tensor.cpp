#include "timesaf/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>
#include <utility>

namespace timesaf {

using detail::TensorImpl;

namespace {

using Mat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<Mat>;
using MapConstMat = Eigen::Map<const Mat>;

thread_local bool g_grad_enabled = true;

void check_finite(const char* op, const std::vector<real>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(std::string(op) +
                         ": non-finite value at flat index " +
                         std::to_string(i));
    }
  }
}

// Wires the result into the graph when recording is on and any input needs
// gradients; otherwise the result is a plain constant.
Tensor make_result(const char* op, Shape shape, std::vector<real> data,
                   std::initializer_list<Tensor> inputs,
                   std::function<void(TensorImpl&)> bw) {
  check_finite(op, data);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  bool needs = false;
  if (g_grad_enabled) {
    for (const Tensor& t : inputs) needs = needs || t.impl()->requires_grad;
  }
  if (needs) {
    impl->requires_grad = true;
    impl->leaf = false;
    for (const Tensor& t : inputs) impl->parents.push_back(t.impl());
    impl->backward_fn = std::move(bw);
  }
  return Tensor(std::move(impl));
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  std::size_t n = std::max(a.size(), b.size());
  Shape out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Index ai = i < n - a.size() ? 1 : a[i - (n - a.size())];
    Index bi = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (ai != bi && ai != 1 && bi != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " +
                       shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(ai, bi);
  }
  return out;
}

// Strides of `in` aligned to the (broadcast) output rank, 0 on stretched dims.
std::vector<Index> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<Index> strides(out.size(), 0);
  std::vector<Index> nat(in.size());
  Index st = 1;
  for (int i = static_cast<int>(in.size()) - 1; i >= 0; --i) {
    nat[static_cast<std::size_t>(i)] = st;
    st *= in[static_cast<std::size_t>(i)];
  }
  std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    strides[off + i] = (in[i] == out[off + i]) ? nat[i] : 0;
  }
  return strides;
}

// Walks an output shape in row-major order while tracking two source
// offsets whose strides may be zero on broadcast dimensions.
struct Cursor2 {
  Shape out;
  std::vector<Index> coord, sa, sb;
  Index offa = 0, offb = 0;

  Cursor2(Shape o, std::vector<Index> a, std::vector<Index> b)
      : out(std::move(o)), coord(out.size(), 0), sa(std::move(a)),
        sb(std::move(b)) {}

  void advance() {
    for (int d = static_cast<int>(out.size()) - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      ++coord[du];
      offa += sa[du];
      offb += sb[du];
      if (coord[du] < out[du]) return;
      offa -= sa[du] * out[du];
      offb -= sb[du] * out[du];
      coord[du] = 0;
    }
  }
};

template <class F, class DFA, class DFB>
Tensor binary_ew(const char* op, const Tensor& a, const Tensor& b, F f,
                 DFA dfa, DFB dfb) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  Shape os = broadcast_shape(op, as, bs);
  Index n = numel(os);
  auto pa = a.impl();
  auto pb = b.impl();
  std::vector<real> out(static_cast<std::size_t>(n));
  if (as == bs) {
    for (Index i = 0; i < n; ++i) {
      auto iu = static_cast<std::size_t>(i);
      out[iu] = f(pa->data[iu], pb->data[iu]);
    }
  } else {
    Cursor2 c(os, aligned_strides(as, os), aligned_strides(bs, os));
    for (Index i = 0; i < n; ++i, c.advance()) {
      out[static_cast<std::size_t>(i)] =
          f(pa->data[static_cast<std::size_t>(c.offa)],
            pb->data[static_cast<std::size_t>(c.offb)]);
    }
  }
  return make_result(
      op, os, std::move(out), {a, b},
      [pa, pb, as, bs, os, dfa, dfb](TensorImpl& self) {
        bool ga = pa->requires_grad;
        bool gb = pb->requires_grad;
        if (ga) pa->ensure_grad();
        if (gb) pb->ensure_grad();
        Index n = static_cast<Index>(self.data.size());
        if (as == bs) {
          for (Index i = 0; i < n; ++i) {
            auto iu = static_cast<std::size_t>(i);
            real g = self.grad[iu];
            if (ga) pa->grad[iu] += dfa(pa->data[iu], pb->data[iu], g);
            if (gb) pb->grad[iu] += dfb(pa->data[iu], pb->data[iu], g);
          }
        } else {
          Cursor2 c(os, aligned_strides(as, os), aligned_strides(bs, os));
          for (Index i = 0; i < n; ++i, c.advance()) {
            auto iu = static_cast<std::size_t>(i);
            auto ia = static_cast<std::size_t>(c.offa);
            auto ib = static_cast<std::size_t>(c.offb);
            real g = self.grad[iu];
            if (ga) pa->grad[ia] += dfa(pa->data[ia], pb->data[ib], g);
            if (gb) pb->grad[ib] += dfb(pa->data[ia], pb->data[ib], g);
          }
        }
      });
}

// df sees (x, y, g) with y = f(x) so ops can reuse the forward value.
template <class F, class DF>
Tensor unary_ew(const char* op, const Tensor& a, F f, DF df) {
  auto pa = a.impl();
  std::size_t n = pa->data.size();
  std::vector<real> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(pa->data[i]);
  return make_result(op, a.shape(), std::move(out), {a},
                     [pa, df](TensorImpl& self) {
                       if (!pa->requires_grad) return;
                       pa->ensure_grad();
                       for (std::size_t i = 0; i < self.data.size(); ++i) {
                         pa->grad[i] +=
                             df(pa->data[i], self.data[i], self.grad[i]);
                       }
                     });
}

Shape leading_dims(const Shape& s) {
  return Shape(s.begin(), s.end() - 2);
}

}  // namespace

// ---------------------------------------------------------------- Tensor --

Tensor Tensor::zeros(Shape s) { return full(std::move(s), real(0)); }

Tensor Tensor::full(Shape s, real v) {
  auto impl = std::make_shared<TensorImpl>();
  Index n = numel(s);
  if (n < 0) throw ShapeError("full: negative extent in " + shape_str(s));
  impl->shape = std::move(s);
  impl->data.assign(static_cast<std::size_t>(n), v);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape s, std::vector<real> v) {
  if (numel(s) != static_cast<Index>(v.size())) {
    throw ShapeError("from_data: " + std::to_string(v.size()) +
                     " values cannot fill " + shape_str(s));
  }
  check_finite("from_data", v);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(s);
  impl->data = std::move(v);
  return Tensor(std::move(impl));
}

Tensor Tensor::randn(Shape s, Rng& rng, real stddev) {
  Index n = numel(s);
  std::vector<real> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<real>(rng.normal()) * stddev;
  return from_data(std::move(s), std::move(v));
}

Tensor Tensor::truncated_normal(Shape s, Rng& rng, real stddev) {
  Index n = numel(s);
  std::vector<real> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<real>(rng.truncated_normal(stddev));
  return from_data(std::move(s), std::move(v));
}

real Tensor::value() const {
  if (size() != 1) {
    throw UsageError("value: tensor has shape " + shape_str(shape()) +
                     ", expected a scalar");
  }
  return impl_->data[0];
}

real Tensor::at(std::initializer_list<Index> idx) const {
  const Shape& s = impl_->shape;
  if (idx.size() != s.size()) {
    throw UsageError("at: " + std::to_string(idx.size()) +
                     " indices for shape " + shape_str(s));
  }
  Index flat = 0;
  std::size_t d = 0;
  for (Index i : idx) {
    if (i < 0 || i >= s[d]) {
      throw UsageError("at: index " + std::to_string(i) +
                       " out of range for dim " + std::to_string(d) +
                       " of " + shape_str(s));
    }
    flat = flat * s[d] + i;
    ++d;
  }
  return impl_->data[static_cast<std::size_t>(flat)];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!impl_->leaf) {
    throw UsageError("set_requires_grad: only leaf tensors can be marked");
  }
  impl_->requires_grad = on;
  return *this;
}

std::vector<real> Tensor::grad_vector() const {
  if (impl_->grad.size() == impl_->data.size()) return impl_->grad;
  return std::vector<real>(impl_->data.size(), real(0));
}

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), real(0));
  }
}

std::span<real> Tensor::mutable_data() {
  if (!impl_->leaf) {
    throw UsageError("mutable_data: only leaf tensors may be mutated");
  }
  return impl_->data;
}

std::span<real> Tensor::mutable_grad() {
  if (!impl_->leaf) {
    throw UsageError("mutable_grad: only leaf tensors carry persistent grads");
  }
  impl_->ensure_grad();
  return impl_->grad;
}

void Tensor::backward() const {
  if (size() != 1) {
    throw UsageError("backward: tensor has shape " + shape_str(shape()) +
                     ", expected a scalar loss");
  }
  // Reverse postorder of a DFS over parent edges is a topological order:
  // every consumer runs before the node it feeds from.
  std::vector<std::shared_ptr<TensorImpl>> order;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    std::shared_ptr<TensorImpl> node;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({impl_, 0});
  visited.insert(impl_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      auto p = f.node->parents[f.next++];
      if (visited.insert(p.get()).second) {
        stack.push_back({std::move(p), 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  impl_->ensure_grad();
  impl_->grad[0] += real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = it->get();
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
      node->backward_fn = nullptr;  // free the tape as we go
      node->parents.clear();
    }
    if (!node->leaf) {
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ------------------------------------------------------------------- ops --

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "add", a, b, [](real x, real y) { return x + y; },
      [](real, real, real g) { return g; },
      [](real, real, real g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "sub", a, b, [](real x, real y) { return x - y; },
      [](real, real, real g) { return g; },
      [](real, real, real g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "mul", a, b, [](real x, real y) { return x * y; },
      [](real, real y, real g) { return g * y; },
      [](real x, real, real g) { return g * x; });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_ew(
      "divide", a, b, [](real x, real y) { return x / y; },
      [](real, real y, real g) { return g / y; },
      [](real x, real y, real g) { return -g * x / (y * y); });
}

Tensor neg(const Tensor& a) {
  return unary_ew(
      "neg", a, [](real x) { return -x; },
      [](real, real, real g) { return -g; });
}

Tensor scale(const Tensor& a, real c) {
  return unary_ew(
      "scale", a, [c](real x) { return c * x; },
      [c](real, real, real g) { return c * g; });
}

Tensor add_scalar(const Tensor& a, real c) {
  return unary_ew(
      "add_scalar", a, [c](real x) { return x + c; },
      [](real, real, real g) { return g; });
}

Tensor relu(const Tensor& a) {
  return unary_ew(
      "relu", a, [](real x) { return x > 0 ? x : real(0); },
      [](real x, real, real g) { return x > 0 ? g : real(0); });
}

Tensor gelu(const Tensor& a) {
  // exact form x * Phi(x); derivative Phi(x) + x * phi(x)
  constexpr real inv_sqrt2 = real(0.70710678118654752440);
  constexpr real inv_sqrt2pi = real(0.39894228040143267794);
  return unary_ew(
      "gelu", a,
      [=](real x) {
        return x * real(0.5) * (real(1) + std::erf(x * inv_sqrt2));
      },
      [=](real x, real, real g) {
        real cdf = real(0.5) * (real(1) + std::erf(x * inv_sqrt2));
        real pdf = inv_sqrt2pi * std::exp(real(-0.5) * x * x);
        return g * (cdf + x * pdf);
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary_ew(
      "sigmoid", a,
      [](real x) { return real(1) / (real(1) + std::exp(-x)); },
      [](real, real y, real g) { return g * y * (real(1) - y); });
}

Tensor reshape(const Tensor& a, Shape s) {
  if (numel(s) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                     shape_str(s));
  }
  auto pa = a.impl();
  std::vector<real> out = pa->data;
  return make_result("reshape", std::move(s), std::move(out), {a},
                     [pa](TensorImpl& self) {
                       if (!pa->requires_grad) return;
                       pa->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         pa->grad[i] += self.grad[i];
                       }
                     });
}

Tensor take(const Tensor& a, std::shared_ptr<const std::vector<Index>> idx,
            Shape out_shape) {
  if (static_cast<Index>(idx->size()) != numel(out_shape)) {
    throw ShapeError("take: " + std::to_string(idx->size()) +
                     " indices cannot fill " + shape_str(out_shape));
  }
  auto pa = a.impl();
  const Index limit = a.size();
  std::vector<real> out(idx->size());
  for (std::size_t i = 0; i < idx->size(); ++i) {
    Index j = (*idx)[i];
    if (j < 0 || j >= limit) {
      throw ShapeError("take: index " + std::to_string(j) +
                       " out of range for " + shape_str(a.shape()));
    }
    out[i] = pa->data[static_cast<std::size_t>(j)];
  }
  return make_result("take", std::move(out_shape), std::move(out), {a},
                     [pa, idx](TensorImpl& self) {
                       if (!pa->requires_grad) return;
                       pa->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         pa->grad[static_cast<std::size_t>((*idx)[i])] +=
                             self.grad[i];
                       }
                     });
}

Tensor permute(const Tensor& a, const std::vector<int>& dims) {
  const Shape& s = a.shape();
  if (dims.size() != s.size()) {
    throw ShapeError("permute: " + std::to_string(dims.size()) +
                     " axes for " + shape_str(s));
  }
  std::vector<bool> seen(dims.size(), false);
  for (int d : dims) {
    if (d < 0 || d >= static_cast<int>(dims.size()) || seen[static_cast<std::size_t>(d)]) {
      throw ShapeError("permute: axes are not a permutation");
    }
    seen[static_cast<std::size_t>(d)] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < dims.size(); ++i) {
    out_shape[i] = s[static_cast<std::size_t>(dims[i])];
  }
  // natural strides of the input, then reordered to the output axis order
  std::vector<Index> nat(s.size());
  Index st = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    nat[static_cast<std::size_t>(i)] = st;
    st *= s[static_cast<std::size_t>(i)];
  }
  auto idx = std::make_shared<std::vector<Index>>(
      static_cast<std::size_t>(a.size()));
  std::vector<Index> coord(s.size(), 0);
  Index off = 0;
  std::vector<Index> strides(s.size());
  for (std::size_t i = 0; i < dims.size(); ++i) {
    strides[i] = nat[static_cast<std::size_t>(dims[i])];
  }
  for (std::size_t i = 0; i < idx->size(); ++i) {
    (*idx)[i] = off;
    for (int d = static_cast<int>(out_shape.size()) - 1; d >= 0; --d) {
      auto du = static_cast<std::size_t>(d);
      ++coord[du];
      off += strides[du];
      if (coord[du] < out_shape[du]) break;
      off -= strides[du] * out_shape[du];
      coord[du] = 0;
    }
  }
  return take(a, std::move(idx), std::move(out_shape));
}

Tensor transpose_last2(const Tensor& a) {
  if (a.ndim() < 2) {
    throw ShapeError("transpose_last2: rank " + std::to_string(a.ndim()) +
                     " tensor " + shape_str(a.shape()));
  }
  std::vector<int> dims(static_cast<std::size_t>(a.ndim()));
  for (std::size_t i = 0; i < dims.size(); ++i) dims[i] = static_cast<int>(i);
  std::swap(dims[dims.size() - 1], dims[dims.size() - 2]);
  return permute(a, dims);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2) {
    throw ShapeError("matmul: needs rank >= 2, got " + shape_str(as) +
                     " and " + shape_str(bs));
  }
  Index m = as[as.size() - 2];
  Index k = as[as.size() - 1];
  Index kb = bs[bs.size() - 2];
  Index n = bs[bs.size() - 1];
  if (k != kb) {
    throw ShapeError("matmul: inner extents disagree: " + shape_str(as) +
                     " vs " + shape_str(bs));
  }
  Shape lead_a = leading_dims(as);
  Shape lead_b = leading_dims(bs);
  Shape lead = broadcast_shape("matmul", lead_a, lead_b);
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Index batches = numel(lead);
  auto pa = a.impl();
  auto pb = b.impl();
  std::vector<real> out(static_cast<std::size_t>(batches * m * n));
  {
    Cursor2 c(lead, aligned_strides(lead_a, lead), aligned_strides(lead_b, lead));
    for (Index bi = 0; bi < batches; ++bi, c.advance()) {
      MapConstMat A(pa->data.data() + c.offa * m * k, m, k);
      MapConstMat B(pb->data.data() + c.offb * k * n, k, n);
      MapMat C(out.data() + bi * m * n, m, n);
      C.noalias() = A * B;
    }
  }
  return make_result(
      "matmul", std::move(out_shape), std::move(out), {a, b},
      [pa, pb, lead, lead_a, lead_b, m, k, n](TensorImpl& self) {
        bool ga = pa->requires_grad;
        bool gb = pb->requires_grad;
        if (ga) pa->ensure_grad();
        if (gb) pb->ensure_grad();
        Index batches = numel(lead);
        Cursor2 c(lead, aligned_strides(lead_a, lead),
                  aligned_strides(lead_b, lead));
        for (Index bi = 0; bi < batches; ++bi, c.advance()) {
          MapConstMat G(self.grad.data() + bi * m * n, m, n);
          MapConstMat A(pa->data.data() + c.offa * m * k, m, k);
          MapConstMat B(pb->data.data() + c.offb * k * n, k, n);
          if (ga) {
            MapMat dA(pa->grad.data() + c.offa * m * k, m, k);
            dA.noalias() += G * B.transpose();
          }
          if (gb) {
            MapMat dB(pb->grad.data() + c.offb * k * n, k, n);
            dB.noalias() += A.transpose() * G;
          }
        }
      });
}

Tensor sum(const Tensor& a) {
  auto pa = a.impl();
  real acc = 0;
  for (real v : pa->data) acc += v;
  return make_result("sum", {1}, {acc}, {a}, [pa](TensorImpl& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    real g = self.grad[0];
    for (auto& gv : pa->grad) gv += g;
  });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), real(1) / static_cast<real>(a.size()));
}

Tensor softmax_lastdim(const Tensor& a) {
  if (a.ndim() < 1) throw ShapeError("softmax_lastdim: scalar input");
  Index d = a.shape().back();
  Index rows = a.size() / d;
  auto pa = a.impl();
  std::vector<real> out(pa->data.size());
  for (Index r = 0; r < rows; ++r) {
    const real* x = pa->data.data() + r * d;
    real* y = out.data() + r * d;
    real mx = x[0];
    for (Index j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    real s = 0;
    for (Index j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (Index j = 0; j < d; ++j) y[j] /= s;
  }
  return make_result("softmax_lastdim", a.shape(), std::move(out), {a},
                     [pa, d, rows](TensorImpl& self) {
                       if (!pa->requires_grad) return;
                       pa->ensure_grad();
                       for (Index r = 0; r < rows; ++r) {
                         const real* y = self.data.data() + r * d;
                         const real* g = self.grad.data() + r * d;
                         real dot = 0;
                         for (Index j = 0; j < d; ++j) dot += g[j] * y[j];
                         real* gx = pa->grad.data() + r * d;
                         for (Index j = 0; j < d; ++j) {
                           gx[j] += y[j] * (g[j] - dot);
                         }
                       }
                     });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 real eps) {
  if (x.ndim() < 1) throw ShapeError("layernorm: scalar input");
  Index d = x.shape().back();
  if (gain.size() != d || bias.size() != d) {
    throw ShapeError("layernorm: affine shapes " + shape_str(gain.shape()) +
                     "/" + shape_str(bias.shape()) + " do not match slice " +
                     std::to_string(d));
  }
  Index rows = x.size() / d;
  auto px = x.impl();
  auto pg = gain.impl();
  auto pb = bias.impl();
  auto xhat = std::make_shared<std::vector<real>>(px->data.size());
  auto inv = std::make_shared<std::vector<real>>(static_cast<std::size_t>(rows));
  std::vector<real> out(px->data.size());
  for (Index r = 0; r < rows; ++r) {
    const real* xr = px->data.data() + r * d;
    real mu = 0;
    for (Index j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<real>(d);
    real var = 0;
    for (Index j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<real>(d);
    real iv = real(1) / std::sqrt(var + eps);
    (*inv)[static_cast<std::size_t>(r)] = iv;
    real* xh = xhat->data() + r * d;
    real* yr = out.data() + r * d;
    for (Index j = 0; j < d; ++j) {
      xh[j] = (xr[j] - mu) * iv;
      yr[j] = xh[j] * pg->data[static_cast<std::size_t>(j)] +
              pb->data[static_cast<std::size_t>(j)];
    }
  }
  return make_result(
      "layernorm", x.shape(), std::move(out), {x, gain, bias},
      [px, pg, pb, xhat, inv, d, rows](TensorImpl& self) {
        bool gx = px->requires_grad;
        bool gg = pg->requires_grad;
        bool gb = pb->requires_grad;
        if (gx) px->ensure_grad();
        if (gg) pg->ensure_grad();
        if (gb) pb->ensure_grad();
        for (Index r = 0; r < rows; ++r) {
          const real* g = self.grad.data() + r * d;
          const real* xh = xhat->data() + r * d;
          real iv = (*inv)[static_cast<std::size_t>(r)];
          if (gg || gb) {
            for (Index j = 0; j < d; ++j) {
              auto ju = static_cast<std::size_t>(j);
              if (gg) pg->grad[ju] += g[j] * xh[j];
              if (gb) pb->grad[ju] += g[j];
            }
          }
          if (gx) {
            real mean_dxh = 0, mean_dxh_xh = 0;
            for (Index j = 0; j < d; ++j) {
              real dxh = g[j] * pg->data[static_cast<std::size_t>(j)];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= static_cast<real>(d);
            mean_dxh_xh /= static_cast<real>(d);
            real* gxr = px->grad.data() + r * d;
            for (Index j = 0; j < d; ++j) {
              real dxh = g[j] * pg->data[static_cast<std::size_t>(j)];
              gxr[j] += iv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
          }
        }
      });
}

Tensor dropout(const Tensor& a, real rate, bool train, Rng& rng) {
  if (rate < 0 || rate >= 1) {
    throw ConfigError("dropout: rate " + std::to_string(rate) +
                      " outside [0, 1)");
  }
  if (!train || rate == 0) return a;
  real keep = real(1) - rate;
  auto pa = a.impl();
  auto mask = std::make_shared<std::vector<real>>(pa->data.size());
  std::vector<real> out(pa->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    real m = rng.uniform() < keep ? real(1) / keep : real(0);
    (*mask)[i] = m;
    out[i] = pa->data[i] * m;
  }
  return make_result("dropout", a.shape(), std::move(out), {a},
                     [pa, mask](TensorImpl& self) {
                       if (!pa->requires_grad) return;
                       pa->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         pa->grad[i] += self.grad[i] * (*mask)[i];
                       }
                     });
}

}  // namespace timesaf
