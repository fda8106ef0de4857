#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dfpf/autograd.hpp"
#include "dfpf/dcfm.hpp"
#include "dfpf/ops.hpp"
#include "dfpf/params.hpp"

namespace dfpf::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (double& v : t.storage()) v = u(rng);
  return t;
}

inline Tensor random_binary(Shape shape, Rng& rng, double p = 0.5) {
  Tensor t(std::move(shape));
  std::bernoulli_distribution b(p);
  for (double& v : t.storage()) v = b(rng) ? 1.0 : 0.0;
  return t;
}

inline Matrix random_matrix(int rows, int cols, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(rows, cols);
  std::uniform_real_distribution<double> u(lo, hi);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = u(rng);
  }
  return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

struct GradCheckResult {
  double rel_error = 0;  // ||analytic - numeric|| / max(||analytic||, ||numeric||)
  int coords = 0;
  double grad_norm = 0;
};

// Compares backprop against central differences of L = sum(f() * R) for a
// fixed random R. `wrt` are handles whose values f reads; up to
// `coords_per_input` coordinates of each are probed (0 = all).
inline GradCheckResult grad_check(const std::function<Var()>& f, const std::vector<Var>& wrt, Rng& rng,
                                  int coords_per_input = 0, double h = 1e-5) {
  Tensor r;
  {
    NoGradGuard guard;
    r = random_tensor(f().shape(), rng);
  }
  for (const Var& v : wrt) v.zero_grad();
  backward(ops::dot(f(), r));
  auto loss = [&] {
    NoGradGuard guard;
    return ops::dot(f(), r).value()[0];
  };
  double diff2 = 0, an2 = 0, nu2 = 0;
  GradCheckResult out;
  for (const Var& v : wrt) {
    const Tensor analytic = v.has_grad() ? v.grad() : Tensor(v.shape());
    std::vector<size_t> idx(v.value().numel());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (coords_per_input > 0 && idx.size() > static_cast<size_t>(coords_per_input)) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(coords_per_input);
    }
    Tensor& value = v.mutable_value();
    for (size_t i : idx) {
      const double saved = value[i];
      value[i] = saved + h;
      const double up = loss();
      value[i] = saved - h;
      const double down = loss();
      value[i] = saved;
      const double numeric = (up - down) / (2 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      an2 += analytic[i] * analytic[i];
      nu2 += numeric * numeric;
      ++out.coords;
    }
  }
  const double scale = std::max(std::sqrt(an2), std::sqrt(nu2));
  out.grad_norm = std::sqrt(an2);
  out.rel_error = scale > 0 ? std::sqrt(diff2) / scale : 0.0;
  return out;
}

}  // namespace dfpf::testing
