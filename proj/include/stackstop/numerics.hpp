#pragma once

// Small numerical helpers shared by the infinite-horizon solvers.

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <exception>
#include <functional>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "game_model.hpp"

namespace stackstop {

// Indicator comparisons stop on ties within this absolute tolerance.
inline constexpr double kTieTol = 1e-12;
// Tolerance for comparing expected values of different stopping rules.
inline constexpr double kValueTol = 1e-9;

/// Shortest decimal text that reads back to the same double.
inline std::string shortest(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double sup_norm_diff(const Vector& a, const Vector& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double sup_norm(const Vector& a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

struct FixedPointTrace {
  Vector value;
  std::vector<double> diffs;  // sup-norm successive differences
  int iterations = 0;
  bool converged = false;
};

/// Iterates x <- op(x) from x0 until the successive difference is at most
/// tol * (1 - modulus) / modulus, which bounds the distance to the fixed
/// point of a `modulus`-contraction by tol. The threshold never drops below a
/// few ulps of the iterate, which is the best double arithmetic can resolve.
inline FixedPointTrace iterate_contraction(const std::function<Vector(const Vector&)>& op,
                                           Vector x0, double modulus, double tol,
                                           int max_iter = 100000) {
  FixedPointTrace tr;
  const double threshold = tol * (1.0 - modulus) / modulus;
  tr.value = std::move(x0);
  for (int k = 0; k < max_iter; ++k) {
    Vector next = op(tr.value);
    double d = sup_norm_diff(next, tr.value);
    tr.value = std::move(next);
    tr.diffs.push_back(d);
    tr.iterations = k + 1;
    const double floor = 16.0 * std::numeric_limits<double>::epsilon() *
                         std::max(1.0, sup_norm(tr.value));
    if (d <= std::max(threshold, floor)) {
      tr.converged = true;
      break;
    }
  }
  return tr;
}

/// Solves A x = b with partial-pivot LU.
inline Vector solve_linear(const Matrix& a, const Vector& b) {
  const int n = static_cast<int>(b.size());
  Eigen::MatrixXd m(n, n);
  Eigen::VectorXd r(n);
  for (int i = 0; i < n; ++i) {
    r(i) = b[i];
    for (int j = 0; j < n; ++j) m(i, j) = a[i][j];
  }
  Eigen::VectorXd x = m.partialPivLu().solve(r);
  return Vector(x.data(), x.data() + n);
}

/// Max |A x - b|.
inline double linear_residual(const Matrix& a, const Vector& x, const Vector& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    double s = -b[i];
    for (std::size_t j = 0; j < x.size(); ++j) s += a[i][j] * x[j];
    m = std::max(m, std::abs(s));
  }
  return m;
}

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Runs fn(begin, end, worker) over [0, n) split into contiguous chunks.
inline void parallel_for(std::size_t n, int threads,
                         const std::function<void(std::size_t, std::size_t, int)>& fn) {
  threads = std::max(1, std::min<int>(resolve_threads(threads), static_cast<int>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    fn(0, n, 0);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  const std::size_t chunk = (n + threads - 1) / threads;
  for (int w = 0; w < threads; ++w) {
    std::size_t b = w * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&, b, e, w] {
      try {
        fn(b, e, w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
}

}  // namespace stackstop
