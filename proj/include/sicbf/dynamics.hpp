#pragma once

// Control-affine systems, closed-loop vector fields, and fixed-step RK4 flows
// with the variational (sensitivity) equation.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace sicbf {

template <int N>
using Vec = Eigen::Matrix<double, N, 1>;
template <int N>
using RowVec = Eigen::Matrix<double, 1, N>;
template <int N>
using Mat = Eigen::Matrix<double, N, N>;

template <int N>
using VectorField = std::function<Vec<N>(const Vec<N>&)>;
template <int N>
using JacobianField = std::function<Mat<N>(const Vec<N>&)>;

/// Raised when a trajectory produces NaN/Inf. Carries the time at which the
/// non-finite value was first observed so batch callers can record it.
class FlowDivergence : public std::runtime_error {
 public:
  explicit FlowDivergence(double t)
      : std::runtime_error("flow diverged at t = " + std::to_string(t)), time_(t) {}
  double time() const noexcept { return time_; }

 private:
  double time_;
};

/// xdot = f(x) + g(x) u with a (possibly unbounded) input box.
///
/// The optional Jacobians are used when building closed-loop Jacobians for the
/// sensitivity equation; when absent a central finite difference is taken.
template <int N, int M>
struct ControlAffineSystem {
  static_assert(N > 0 && M > 0, "state and input dimensions are compile-time constants");
  using State = Vec<N>;
  using Input = Vec<M>;
  using InputMatrix = Eigen::Matrix<double, N, M>;

  std::function<State(const State&)> f;
  std::function<InputMatrix(const State&)> g;
  Input input_lower = Input::Constant(-std::numeric_limits<double>::infinity());
  Input input_upper = Input::Constant(std::numeric_limits<double>::infinity());

  // d f / d x
  std::function<Mat<N>(const State&)> drift_jacobian;
  // d (g(x) u) / d x at fixed u
  std::function<Mat<N>(const State&, const Input&)> input_jacobian;

  static constexpr int n() { return N; }
  static constexpr int m() { return M; }

  void validate() const {
    if (!f || !g) throw std::invalid_argument("ControlAffineSystem: f and g are required");
    for (int i = 0; i < M; ++i) {
      if (std::isnan(input_lower[i]) || std::isnan(input_upper[i]) || input_lower[i] > input_upper[i]) {
        throw std::invalid_argument("ControlAffineSystem: input_lower must not exceed input_upper");
      }
    }
  }

  State rate(const State& x, const Input& u) const { return f(x) + g(x) * u; }

  Input clip(const Input& u) const { return u.cwiseMax(input_lower).cwiseMin(input_upper); }
};

/// F(x) = f(x) + g(x) k(x). `k` may return a fixed-size input or an
/// Eigen::VectorXd; the latter is checked against m at every evaluation.
template <int N, int M, class Controller>
VectorField<N> closed_loop_field(const ControlAffineSystem<N, M>& sys, Controller k) {
  return [sys, k = std::move(k)](const Vec<N>& x) -> Vec<N> {
    const auto u = k(x);
    if constexpr (std::decay_t<decltype(u)>::RowsAtCompileTime == Eigen::Dynamic) {
      if (u.size() != M) {
        throw std::invalid_argument("closed_loop_field: controller returned " + std::to_string(u.size()) +
                                    " inputs, system expects " + std::to_string(M));
      }
    }
    return sys.rate(x, Vec<M>(u));
  };
}

/// Central-difference Jacobian of F with step 1e-6 (1 + |x|).
template <int N>
Mat<N> finite_difference_jacobian(const VectorField<N>& F, const Vec<N>& x, double rel_step = 1e-6) {
  const double step = rel_step * (1.0 + x.norm());
  Mat<N> J;
  for (int j = 0; j < N; ++j) {
    Vec<N> xp = x, xm = x;
    xp[j] += step;
    xm[j] -= step;
    J.col(j) = (F(xp) - F(xm)) / (2.0 * step);
  }
  return J;
}

template <int N>
JacobianField<N> finite_difference_jacobian_field(VectorField<N> F) {
  return [F = std::move(F)](const Vec<N>& x) { return finite_difference_jacobian<N>(F, x); };
}

/// Jacobian of x -> f(x) + g(x) k(x) given dk/dx.
template <int N, int M>
JacobianField<N> closed_loop_jacobian(const ControlAffineSystem<N, M>& sys,
                                      std::function<Vec<M>(const Vec<N>&)> k,
                                      std::function<Eigen::Matrix<double, M, N>(const Vec<N>&)> dk) {
  return [sys, k = std::move(k), dk = std::move(dk)](const Vec<N>& x) -> Mat<N> {
    const Vec<M> u = k(x);
    Mat<N> J = sys.drift_jacobian ? sys.drift_jacobian(x)
                                  : finite_difference_jacobian<N>(sys.f, x);
    if (sys.input_jacobian) {
      J += sys.input_jacobian(x, u);
    } else {
      const VectorField<N> gu = [&sys, &u](const Vec<N>& y) -> Vec<N> { return sys.g(y) * u; };
      J += finite_difference_jacobian<N>(gu, x);
    }
    J += sys.g(x) * dk(x);
    return J;
  };
}

struct FlowOptions {
  double step = 1e-3;
};

template <int N>
struct FlowResult {
  double t = 0.0;
  Vec<N> state;
  Mat<N> sensitivity = Mat<N>::Identity();
};

namespace detail {

inline void check_grid(const std::vector<double>& t_grid) {
  if (t_grid.empty()) throw std::invalid_argument("time grid is empty");
  if (t_grid.front() != 0.0) throw std::invalid_argument("time grid must start at 0");
  for (std::size_t i = 1; i < t_grid.size(); ++i) {
    if (!(t_grid[i] > t_grid[i - 1])) throw std::invalid_argument("time grid must be strictly ascending");
  }
}

inline int substeps(double dt, double step) {
  return std::max(1, static_cast<int>(std::ceil(dt / step - 1e-9)));
}

template <int N>
Vec<N> rk4_step(const VectorField<N>& F, const Vec<N>& x, double h) {
  const Vec<N> k1 = F(x);
  const Vec<N> k2 = F(x + 0.5 * h * k1);
  const Vec<N> k3 = F(x + 0.5 * h * k2);
  const Vec<N> k4 = F(x + h * k3);
  return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

// One RK4 step of the state jointly with Qdot = J(x) Q.
template <int N>
void rk4_step_sensitivity(const VectorField<N>& F, const JacobianField<N>& J, Vec<N>& x, Mat<N>& Q,
                          double h) {
  const Vec<N> k1 = F(x);
  const Mat<N> l1 = J(x) * Q;
  const Vec<N> x2 = x + 0.5 * h * k1;
  const Mat<N> Q2 = Q + 0.5 * h * l1;
  const Vec<N> k2 = F(x2);
  const Mat<N> l2 = J(x2) * Q2;
  const Vec<N> x3 = x + 0.5 * h * k2;
  const Mat<N> Q3 = Q + 0.5 * h * l2;
  const Vec<N> k3 = F(x3);
  const Mat<N> l3 = J(x3) * Q3;
  const Vec<N> x4 = x + h * k3;
  const Mat<N> Q4 = Q + h * l3;
  const Vec<N> k4 = F(x4);
  const Mat<N> l4 = J(x4) * Q4;
  x += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  Q += (h / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
}

}  // namespace detail

/// Evenly spaced grid 0, step, ..., horizon (the last point is exactly horizon).
inline std::vector<double> uniform_grid(double horizon, double step) {
  const int n = detail::substeps(horizon, step);
  std::vector<double> grid(n + 1);
  for (int k = 0; k <= n; ++k) grid[k] = horizon * static_cast<double>(k) / n;
  return grid;
}

/// phi_t(x0) at each grid time. Throws FlowDivergence on NaN/Inf.
template <int N>
std::vector<FlowResult<N>> integrate_flow(const VectorField<N>& F, const Vec<N>& x0,
                                          const std::vector<double>& t_grid, FlowOptions opts = {}) {
  detail::check_grid(t_grid);
  std::vector<FlowResult<N>> out;
  out.reserve(t_grid.size());
  Vec<N> x = x0;
  if (!x.allFinite()) throw FlowDivergence(0.0);
  out.push_back({0.0, x, Mat<N>::Identity()});
  for (std::size_t i = 1; i < t_grid.size(); ++i) {
    const double dt = t_grid[i] - t_grid[i - 1];
    const int n = detail::substeps(dt, opts.step);
    const double h = dt / n;
    for (int s = 0; s < n; ++s) {
      x = detail::rk4_step<N>(F, x, h);
      if (!x.allFinite()) throw FlowDivergence(t_grid[i - 1] + (s + 1) * h);
    }
    out.push_back({t_grid[i], x, Mat<N>::Identity()});
  }
  return out;
}

/// phi_t(x0) and Q(t) = d phi_t / d x at each grid time. Passing an empty J
/// substitutes a central finite-difference Jacobian of F.
template <int N>
std::vector<FlowResult<N>> integrate_flow_with_sensitivity(const VectorField<N>& F, JacobianField<N> J,
                                                           const Vec<N>& x0, const std::vector<double>& t_grid,
                                                           FlowOptions opts = {}) {
  detail::check_grid(t_grid);
  if (!J) J = finite_difference_jacobian_field<N>(F);
  std::vector<FlowResult<N>> out;
  out.reserve(t_grid.size());
  Vec<N> x = x0;
  Mat<N> Q = Mat<N>::Identity();
  if (!x.allFinite()) throw FlowDivergence(0.0);
  out.push_back({0.0, x, Q});
  for (std::size_t i = 1; i < t_grid.size(); ++i) {
    const double dt = t_grid[i] - t_grid[i - 1];
    const int n = detail::substeps(dt, opts.step);
    const double h = dt / n;
    for (int s = 0; s < n; ++s) {
      detail::rk4_step_sensitivity<N>(F, J, x, Q, h);
      if (!x.allFinite() || !Q.allFinite()) throw FlowDivergence(t_grid[i - 1] + (s + 1) * h);
    }
    out.push_back({t_grid[i], x, Q});
  }
  return out;
}

struct JacobianReport {
  double worst_relative_error = 0.0;
  std::size_t worst_sample = 0;
  bool passed = true;
};

/// Compares J against central differences of F at each sample. The relative
/// error is |J - J_fd|_F / max(|J_fd|_F, 1).
template <int N>
JacobianReport jacobian_check(const VectorField<N>& F, const JacobianField<N>& J,
                              const std::vector<Vec<N>>& samples, double fd_step, double tol) {
  if (samples.empty()) throw std::invalid_argument("jacobian_check: no samples");
  JacobianReport report;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const Vec<N>& x = samples[s];
    Mat<N> fd;
    for (int j = 0; j < N; ++j) {
      Vec<N> xp = x, xm = x;
      xp[j] += fd_step;
      xm[j] -= fd_step;
      fd.col(j) = (F(xp) - F(xm)) / (2.0 * fd_step);
    }
    const double err = (J(x) - fd).norm() / std::max(fd.norm(), 1.0);
    if (err > report.worst_relative_error || s == 0) {
      report.worst_relative_error = err;
      report.worst_sample = s;
    }
  }
  report.passed = report.worst_relative_error <= tol;
  return report;
}

}  // namespace sicbf
