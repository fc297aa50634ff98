#ifndef DCAPS_GRADCHECK_HPP_
#define DCAPS_GRADCHECK_HPP_

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dcaps/rng.hpp"
#include "dcaps/tensor.hpp"

namespace dcaps {

// Central-difference gradient of a scalar-valued function. This is the
// independent oracle the analytic backward pass is checked against, so it
// must never call into the autodiff machinery itself.
template <class T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f,
                           const Tensor<T>& at, T eps) {
  if (!(eps > T(0))) throw ConfigError("finite_diff_grad requires eps > 0");
  std::vector<T> base = at.data();
  std::vector<T> g(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<T> plus = base, minus = base;
    plus[i] += eps;
    minus[i] -= eps;
    const T fp = f(Tensor<T>(at.shape(), std::move(plus)));
    const T fm = f(Tensor<T>(at.shape(), std::move(minus)));
    if (!std::isfinite(static_cast<double>(fp)) ||
        !std::isfinite(static_cast<double>(fm))) {
      throw NumericError("finite_diff_grad: non-finite function value at element " +
                         std::to_string(i));
    }
    g[i] = (fp - fm) / (T(2) * eps);
  }
  return Tensor<T>(at.shape(), std::move(g));
}

// Worst relative error between two gradient vectors. Entries smaller than
// `floor` in magnitude are compared absolutely at floor * tolerance, since a
// pure ratio on near-zero values only amplifies central-difference noise.
template <class T>
double max_rel_error(const std::vector<T>& analytic, const std::vector<T>& numeric,
                     double floor = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = static_cast<double>(analytic[i]);
    const double n = static_cast<double>(numeric[i]);
    const double denom = std::max({std::fabs(a), std::fabs(n), floor});
    worst = std::max(worst, std::fabs(a - n) / denom);
  }
  return worst;
}

// One gradient check: loss(x) must build a recorded graph from a leaf x.
// Returns the worst relative error over all elements of x.
template <class T>
double check_gradient(const std::function<Tensor<T>(const Tensor<T>&)>& make_loss,
                      const Tensor<T>& at, T eps = T(1e-5)) {
  Tensor<T> x(at.shape(), at.data(), /*requires_grad=*/true);
  Tensor<T> loss = make_loss(x);
  backward(loss);
  Tensor<T> numeric = finite_diff_grad<T>(
      [&](const Tensor<T>& probe) { return make_loss(probe).item(); }, at, eps);
  return max_rel_error(x.grad(), numeric.data());
}

// Random tensor with entries from scale * N(0,1).
template <class T>
Tensor<T> random_tensor(Shape shape, Rng& rng, T scale = T(1)) {
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = scale * static_cast<T>(rng.normal());
  return Tensor<T>(std::move(shape), std::move(v));
}

}  // namespace dcaps

#endif  // DCAPS_GRADCHECK_HPP_
