#pragma once

// Reference implementations and the finite-difference gradient checker used
// across the test suites. Everything here is deliberately brute-force and
// independent of the library's kernels, so a test that compares against
// these is comparing two different derivations of the same quantity.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "timesaf/params.hpp"
#include "timesaf/tensor.hpp"

namespace oracle {

// Plain 2-D matmul, no blocking, no library calls.
inline std::vector<double> matmul_ref(const std::vector<double>& a,
                                      const std::vector<double>& b,
                                      int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      for (int j = 0; j < n; ++j) {
        c[static_cast<std::size_t>(i) * n + j] +=
            a[static_cast<std::size_t>(i) * k + p] *
            b[static_cast<std::size_t>(p) * n + j];
      }
    }
  }
  return c;
}

inline std::vector<double> softmax_ref(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> y(x.size());
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = std::exp(x[i] - mx);
    s += y[i];
  }
  for (double& v : y) v /= s;
  return y;
}

inline std::vector<double> layernorm_ref(const std::vector<double>& x,
                                         const std::vector<double>& gain,
                                         const std::vector<double>& bias,
                                         double eps) {
  double mu = 0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  double var = 0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  double inv = 1.0 / std::sqrt(var + eps);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = (x[i] - mu) * inv * gain[i] + bias[i];
  }
  return y;
}

// Central finite differences over every element of every listed parameter,
// compared against one analytic backward pass. The error metric is
//   |fd - analytic| / max(|fd|, |analytic|, 1e-4)
// which behaves like a relative error for healthy gradients and like a
// scaled absolute error (slack 1e-8 at the 1e-4 threshold) near zero, where
// relative comparison is meaningless.
struct GradCheck {
  double max_err = 0.0;
  std::string worst;  // "name[i]" of the worst element
  bool ok(double tol) const { return max_err < tol; }
};

inline GradCheck check_gradients(
    const std::function<timesaf::Tensor()>& forward_loss,
    const std::vector<std::pair<std::string, timesaf::Tensor>>& params,
    double h = 1e-5) {
  using timesaf::Tensor;
  GradCheck result;

  for (auto& [name, p] : params) {
    Tensor t = p;
    t.zero_grad();
  }
  Tensor loss = forward_loss();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& [name, p] : params) {
    auto g = p.grad_vector();
    analytic.emplace_back(g.begin(), g.end());
  }

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor t = params[pi].second;
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      double orig = data[i];
      double lp, lm;
      {
        timesaf::NoGradGuard ng;
        data[i] = static_cast<timesaf::real>(orig + h);
        lp = forward_loss().value();
        data[i] = static_cast<timesaf::real>(orig - h);
        lm = forward_loss().value();
        data[i] = static_cast<timesaf::real>(orig);
      }
      double fd = (lp - lm) / (2.0 * h);
      double an = analytic[pi][i];
      double err = std::abs(fd - an) /
                   std::max({std::abs(fd), std::abs(an), 1e-4});
      if (err > result.max_err) {
        result.max_err = err;
        result.worst = params[pi].first + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

}  // namespace oracle
