#pragma once

// Backup-set constructions: LQR design, the saturated-LQR backup controller,
// and the flow-defined implicit family
//
//   h(tau, x) = h_c(phi_tau(x))   tau in [0, T]
//   h(T+1, x) = h_b(phi_T(x))
//
// whose state gradients come from the flow sensitivity Q(tau, x).

#include <sicbf/barrier.hpp>
#include <sicbf/dynamics.hpp>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace sicbf {

class LqrError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BackupSpecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Solves A' P + P A + Q = 0 (A Hurwitz) through its Kronecker form.
inline Eigen::MatrixXd solve_lyapunov(const Eigen::MatrixXd& A, const Eigen::MatrixXd& Q) {
  const auto n = A.rows();
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd At = A.transpose();
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n * n, n * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      L.block(i * n, j * n, n, n) += I(i, j) * At;  // I (x) A'
      L.block(i * n, j * n, n, n) += At(i, j) * I;  // A' (x) I
    }
  }
  const Eigen::VectorXd rhs = -Eigen::Map<const Eigen::VectorXd>(Q.data(), n * n);
  const Eigen::VectorXd p = L.fullPivLu().solve(rhs);
  Eigen::MatrixXd P = Eigen::Map<const Eigen::MatrixXd>(p.data(), n, n);
  return 0.5 * (P + P.transpose());
}

inline double max_real_eigenvalue(const Eigen::MatrixXd& A) {
  return Eigen::EigenSolver<Eigen::MatrixXd>(A, false).eigenvalues().real().maxCoeff();
}

struct LqrResult {
  Eigen::MatrixXd P;
  Eigen::MatrixXd K;
  double residual = 0.0;
  int iterations = 0;
};

inline Eigen::MatrixXd riccati_residual(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& Q,
                                        const Eigen::MatrixXd& R, const Eigen::MatrixXd& P) {
  return A.transpose() * P + P * A - P * B * R.llt().solve(B.transpose()) * P + Q;
}

/// Continuous-time LQR by Newton-Kleinman iteration. The stabilizing seed is
/// Bass's gain K0 = B' Z^-1 with (A + bI) Z + Z (A + bI)' = 2 B B'.
inline LqrResult lqr_design(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const Eigen::MatrixXd& Qw,
                            const Eigen::MatrixXd& Rw, int max_iter = 100) {
  const auto n = A.rows();
  const auto m = B.cols();
  if (A.cols() != n || B.rows() != n || Qw.rows() != n || Qw.cols() != n || Rw.rows() != m || Rw.cols() != m) {
    throw LqrError("lqr_design: inconsistent dimensions");
  }
  if ((Qw - Qw.transpose()).cwiseAbs().maxCoeff() > 1e-12 ||
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(Qw).eigenvalues().minCoeff() < -1e-12) {
    throw LqrError("lqr_design: Q must be symmetric positive semidefinite");
  }
  const Eigen::LLT<Eigen::MatrixXd> Rllt(Rw);
  if (Rllt.info() != Eigen::Success) throw LqrError("lqr_design: R must be positive definite");

  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(m, n);
  if (max_real_eigenvalue(A) >= 0.0) {
    const double beta = A.norm() + 1.0;
    const Eigen::MatrixXd shifted = -(A + beta * Eigen::MatrixXd::Identity(n, n));
    const Eigen::MatrixXd Z = solve_lyapunov(shifted.transpose(), 2.0 * B * B.transpose());
    const Eigen::FullPivLU<Eigen::MatrixXd> Zlu(Z);
    if (!Zlu.isInvertible()) throw LqrError("lqr_design: (A, B) is not stabilizable by the seed construction");
    K = B.transpose() * Zlu.inverse();
    if (max_real_eigenvalue(A - B * K) >= 0.0) throw LqrError("lqr_design: (A, B) is not stabilizable");
  }

  LqrResult out;
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
  for (int it = 0; it < max_iter; ++it) {
    out.iterations = it + 1;
    const Eigen::MatrixXd Acl = A - B * K;
    const Eigen::MatrixXd P_next = solve_lyapunov(Acl, Qw + K.transpose() * Rw * K);
    if (!P_next.allFinite()) throw LqrError("lqr_design: Newton-Kleinman iteration diverged");
    K = Rllt.solve(B.transpose() * P_next);
    const double change = (P_next - P).norm();
    P = P_next;
    if (change <= 1e-14 * (1.0 + P.norm())) break;
  }
  out.P = P;
  out.K = K;
  out.residual = riccati_residual(A, B, Qw, Rw, P).norm();
  if (max_real_eigenvalue(A - B * K) >= 0.0) throw LqrError("lqr_design: closed loop is not Hurwitz");
  if (out.residual > 1e-9 * (1.0 + P.norm())) {
    throw LqrError("lqr_design: Riccati residual " + std::to_string(out.residual) + " above tolerance");
  }
  return out;
}

/// Candidate set h_c, backup set h_b, backup controller k_b (with its
/// Jacobian) and horizon T.
template <int N, int M>
struct BackupSpec {
  using State = Vec<N>;
  ControlAffineSystem<N, M> sys;
  std::function<double(const State&)> h_c;
  std::function<RowVec<N>(const State&)> grad_h_c;
  std::function<double(const State&)> h_b;
  std::function<RowVec<N>(const State&)> grad_h_b;
  std::function<Vec<M>(const State&)> k_b;
  std::function<Eigen::Matrix<double, M, N>(const State&)> dk_b;
  double horizon = 2.0;
  double flow_step = 1e-3;

  VectorField<N> backup_field() const { return closed_loop_field(sys, k_b); }
  JacobianField<N> backup_jacobian() const { return closed_loop_jacobian<N, M>(sys, k_b, dk_b); }
  ParameterSet parameter_set() const { return ParameterSet({{0.0, horizon}}, {horizon + 1.0}); }
  bool is_terminal(double tau) const { return std::abs(tau - (horizon + 1.0)) <= 1e-9; }
  std::vector<double> flow_grid() const { return uniform_grid(horizon, flow_step); }
};

namespace detail {

inline int grid_index(double tau, const std::vector<double>& grid) {
  const double h = grid.back() / static_cast<double>(grid.size() - 1);
  return static_cast<int>(std::floor(tau / h + 1e-9));
}

// Cubic Hermite interpolation of a trajectory between two samples.
template <int N>
Vec<N> hermite(const Vec<N>& x0, const Vec<N>& f0, const Vec<N>& x1, const Vec<N>& f1, double h, double s) {
  const double s2 = s * s, s3 = s2 * s;
  return (2 * s3 - 3 * s2 + 1) * x0 + (s3 - 2 * s2 + s) * h * f0 + (-2 * s3 + 3 * s2) * x1 + (s3 - s2) * h * f1;
}

}  // namespace detail

/// The flow-defined family over T = [0, T] u {T + 1}. Node evaluation shares
/// one flow-with-sensitivity integration per state; off-grid tau get one
/// partial RK4 step from the preceding sample.
template <int N, int M>
ConstraintFamily<N> make_implicit_family(const BackupSpec<N, M>& spec) {
  ConstraintFamily<N> fam;
  fam.params = spec.parameter_set();
  const auto F = spec.backup_field();
  const auto J = spec.backup_jacobian();
  const FlowOptions opts{spec.flow_step};
  const auto grid = spec.flow_grid();

  fam.h = [spec, F, opts](double tau, const Vec<N>& x) -> double {
    if (spec.is_terminal(tau)) {
      return spec.h_b(integrate_flow<N>(F, x, {0.0, spec.horizon}, opts).back().state);
    }
    if (tau <= 0.0) return spec.h_c(x);
    return spec.h_c(integrate_flow<N>(F, x, {0.0, tau}, opts).back().state);
  };

  fam.grad = [spec, F, J, opts](double tau, const Vec<N>& x) -> RowVec<N> {
    if (tau <= 0.0 && !spec.is_terminal(tau)) return spec.grad_h_c(x);
    const double t = spec.is_terminal(tau) ? spec.horizon : tau;
    const auto end = integrate_flow_with_sensitivity<N>(F, J, x, {0.0, t}, opts).back();
    const RowVec<N> outer = spec.is_terminal(tau) ? spec.grad_h_b(end.state) : spec.grad_h_c(end.state);
    return outer * end.sensitivity;
  };

  fam.slice_fn = [spec, F, opts, grid](const Vec<N>& x) -> std::function<double(double)> {
    const auto trace = integrate_flow<N>(F, x, grid, opts);
    std::vector<Vec<N>> states, rates;
    states.reserve(trace.size());
    rates.reserve(trace.size());
    for (const auto& s : trace) {
      states.push_back(s.state);
      rates.push_back(F(s.state));
    }
    const double terminal = spec.h_b(states.back());
    const double h = spec.horizon / static_cast<double>(grid.size() - 1);
    return [spec, states = std::move(states), rates = std::move(rates), terminal, h](double tau) -> double {
      if (spec.is_terminal(tau)) return terminal;
      const double u = std::clamp(tau, 0.0, spec.horizon) / h;
      const auto last = static_cast<int>(states.size()) - 1;
      const int k = std::min(static_cast<int>(std::floor(u)), last - 1);
      const double s = u - k;
      if (s <= 1e-12) return spec.h_c(states[static_cast<std::size_t>(k)]);
      if (s >= 1.0 - 1e-12) return spec.h_c(states[static_cast<std::size_t>(k) + 1]);
      return spec.h_c(detail::hermite<N>(states[static_cast<std::size_t>(k)], rates[static_cast<std::size_t>(k)],
                                         states[static_cast<std::size_t>(k) + 1],
                                         rates[static_cast<std::size_t>(k) + 1], h, s));
    };
  };

  fam.nodes_fn = [spec, F, J, opts, grid](std::span<const double> taus, const Vec<N>& x) {
    double needed = 0.0;
    for (double t : taus) needed = std::max(needed, spec.is_terminal(t) ? spec.horizon : t);
    const int last = std::min(static_cast<int>(grid.size()) - 1,
                              std::max(0, detail::grid_index(needed, grid) + 1));
    const std::vector<double> sub(grid.begin(), grid.begin() + last + 1);
    const auto trace = sub.size() > 1 ? integrate_flow_with_sensitivity<N>(F, J, x, sub, opts)
                                      : std::vector<FlowResult<N>>{{0.0, x, Mat<N>::Identity()}};
    std::vector<NodeEval<N>> out;
    out.reserve(taus.size());
    for (double tau : taus) {
      if (spec.is_terminal(tau)) {
        const auto& end = trace.back();
        out.push_back({tau, spec.h_b(end.state), spec.grad_h_b(end.state) * end.sensitivity});
        continue;
      }
      const double t = std::clamp(tau, 0.0, spec.horizon);
      int k = std::min(detail::grid_index(t, grid), static_cast<int>(trace.size()) - 1);
      Vec<N> state = trace[static_cast<std::size_t>(k)].state;
      Mat<N> Q = trace[static_cast<std::size_t>(k)].sensitivity;
      const double gap = t - grid[static_cast<std::size_t>(k)];
      if (gap > 1e-12) {
        detail::rk4_step_sensitivity<N>(F, J, state, Q, gap);
      }
      out.push_back({tau, spec.h_c(state), spec.grad_h_c(state) * Q});
    }
    return out;
  };
  return fam;
}

/// Saturated LQR backup for a planar linear plant xdot = A x + B u, |u| <= u_max:
/// h_c = 1 - x1^2, h_b = rho - x' P x, k_b = tanh(-K x).
struct LinearBackupDesign {
  Eigen::Matrix2d A = (Eigen::Matrix2d() << 0.0, 1.0, 0.0, 0.0).finished();
  Eigen::Vector2d B = Eigen::Vector2d(0.0, 1.0);
  Eigen::Matrix2d Qw = Eigen::Matrix2d::Identity();
  double Rw = 1.0;
  double input_bound = 1.0;
  Eigen::Matrix2d P = Eigen::Matrix2d::Zero();
  Eigen::RowVector2d K = Eigen::RowVector2d::Zero();

  /// Fills P and K from the Riccati design.
  void design() {
    const LqrResult lqr = lqr_design(A, B, Qw, Eigen::MatrixXd::Constant(1, 1, Rw));
    P = lqr.P;
    K = lqr.K;
  }

  ControlAffineSystem<2, 1> system() const {
    ControlAffineSystem<2, 1> sys;
    const Eigen::Matrix2d A_ = A;
    const Eigen::Vector2d B_ = B;
    sys.f = [A_](const Vec<2>& x) -> Vec<2> { return A_ * x; };
    sys.g = [B_](const Vec<2>&) -> Eigen::Matrix<double, 2, 1> { return B_; };
    sys.drift_jacobian = [A_](const Vec<2>&) -> Mat<2> { return A_; };
    sys.input_jacobian = [](const Vec<2>&, const Vec<1>&) -> Mat<2> { return Mat<2>::Zero(); };
    sys.input_lower = Vec<1>::Constant(-input_bound);
    sys.input_upper = Vec<1>::Constant(input_bound);
    return sys;
  }

  /// Largest rho with {x' P x <= rho} inside |x1| <= 1: 1 / (P^-1)_11.
  double nested_rho_limit() const { return 1.0 / P.inverse()(0, 0); }

  BackupSpec<2, 1> spec(double rho, double horizon, double flow_step = 1e-3) const {
    if (!(rho > 0.0)) throw BackupSpecError("rho must be positive");
    if (!(horizon > 0.0)) throw BackupSpecError("horizon must be positive");
    BackupSpec<2, 1> s;
    s.sys = system();
    const Eigen::Matrix2d P_ = P;
    const Eigen::RowVector2d K_ = K;
    const double ub = input_bound;
    s.h_c = [](const Vec<2>& x) { return 1.0 - x[0] * x[0]; };
    s.grad_h_c = [](const Vec<2>& x) { return RowVec<2>(-2.0 * x[0], 0.0); };
    s.h_b = [P_, rho](const Vec<2>& x) { return rho - x.dot(P_ * x); };
    s.grad_h_b = [P_](const Vec<2>& x) -> RowVec<2> { return -2.0 * (P_ * x).transpose(); };
    s.k_b = [K_, ub](const Vec<2>& x) { return Vec<1>::Constant(ub * std::tanh(-K_.dot(x) / ub)); };
    s.dk_b = [K_, ub](const Vec<2>& x) -> Eigen::Matrix<double, 1, 2> {
      const double c = std::cosh(-K_.dot(x) / ub);
      return -K_ / (c * c);
    };
    s.horizon = horizon;
    s.flow_step = flow_step;
    return s;
  }
};

/// Accepts rho when the backup ellipse sits inside |x1| <= 1 and V = x' P x
/// strictly decreases on sampled ellipse boundary points under k_b.
inline bool rho_acceptable(const LinearBackupDesign& design, double rho, int boundary_samples = 720) {
  if (rho * design.P.inverse()(0, 0) > 1.0) return false;
  const Eigen::Matrix2d Linv_t = design.P.llt().matrixL().transpose().toDenseMatrix().inverse();
  const auto spec = design.spec(rho, 1.0);
  const auto F = spec.backup_field();
  for (int k = 0; k < boundary_samples; ++k) {
    const double a = 2.0 * M_PI * k / boundary_samples;
    const Vec<2> x = std::sqrt(rho) * Linv_t * Vec<2>(std::cos(a), std::sin(a));
    const double vdot = 2.0 * x.dot(design.P * F(x));
    if (!(vdot < 0.0)) return false;
  }
  return true;
}

/// Largest accepted rho in (0, rho_hi] after 20 bisection steps.
inline double calibrate_rho(const LinearBackupDesign& design, double rho_hi) {
  if (!(rho_hi > 0.0)) throw BackupSpecError("calibrate_rho: rho_hi must be positive");
  if (rho_acceptable(design, rho_hi)) return rho_hi;
  double lo = 1e-6;
  if (!rho_acceptable(design, lo)) throw BackupSpecError("calibrate_rho: no rho accepted down to 1e-6");
  double hi = rho_hi;
  for (int it = 0; it < 20; ++it) {
    const double mid = 0.5 * (lo + hi);
    (rho_acceptable(design, mid) ? lo : hi) = mid;
  }
  return lo;
}

struct BackupValidation {
  bool nested = true;     // sampled S_b inside S_c
  bool invariant = true;  // sampled S_b flows stay in S_b
  double worst_h_c_on_backup = 0.0;
  double worst_h_b_along_flow = 0.0;
};

/// Checks S_b within S_c on an ellipse-filling sample set and simulates the
/// backup loop from `flow_samples` points of S_b for 5 T.
inline BackupValidation validate_backup(const LinearBackupDesign& design, const BackupSpec<2, 1>& spec, double rho,
                                        int flow_samples = 120, double safety_tol = 1e-3, unsigned seed = 1) {
  BackupValidation out;
  const Eigen::Matrix2d Linv_t = design.P.llt().matrixL().transpose().toDenseMatrix().inverse();
  out.worst_h_c_on_backup = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= 20; ++i) {
    for (int k = 0; k < 72; ++k) {
      const double a = 2.0 * M_PI * k / 72;
      const Vec<2> x = std::sqrt(rho) * (i / 20.0) * Linv_t * Vec<2>(std::cos(a), std::sin(a));
      out.worst_h_c_on_backup = std::min(out.worst_h_c_on_backup, spec.h_c(x));
    }
  }
  out.nested = out.worst_h_c_on_backup >= 0.0;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto F = spec.backup_field();
  const auto grid = uniform_grid(5.0 * spec.horizon, 0.05);
  out.worst_h_b_along_flow = std::numeric_limits<double>::infinity();
  for (int s = 0; s < flow_samples; ++s) {
    const double a = 2.0 * M_PI * unit(rng);
    const double r = std::sqrt(unit(rng));
    const Vec<2> x0 = std::sqrt(rho) * r * Linv_t * Vec<2>(std::cos(a), std::sin(a));
    for (const auto& p : integrate_flow<2>(F, x0, grid, {spec.flow_step})) {
      out.worst_h_b_along_flow = std::min(out.worst_h_b_along_flow, spec.h_b(p.state));
    }
  }
  out.invariant = out.worst_h_b_along_flow >= -safety_tol;
  return out;
}

/// The double-integrator experiment: LQR with identity weights, |u| <= 1,
/// rho <= 0 requests calibration. Throws BackupSpecError if validation fails.
struct DoubleIntegratorExperiment {
  LinearBackupDesign design;
  BackupSpec<2, 1> spec;
  double rho = 0.0;
};

inline DoubleIntegratorExperiment make_double_integrator_spec(double rho, double horizon, double flow_step = 1e-3,
                                                              LinearBackupDesign design = {}) {
  design.design();
  if (rho <= 0.0) rho = calibrate_rho(design, design.nested_rho_limit());
  DoubleIntegratorExperiment exp{design, design.spec(rho, horizon, flow_step), rho};
  const BackupValidation v = validate_backup(design, exp.spec, rho);
  if (!v.nested) throw BackupSpecError("backup set is not contained in the candidate set");
  if (!v.invariant) throw BackupSpecError("backup set is not invariant under the backup controller");
  return exp;
}

}  // namespace sicbf
