#pragma once

// Small dense strictly convex QPs and slack-maximizing feasibility LPs.
//
//   minimize   1/2 nu' H nu + c' nu
//   subject to A nu <= b,  lb <= nu <= ub
//
// Both problems are solved by primal active-set iterations on the stacked
// inequality system (rows followed by the finite box sides). Infeasibility is
// decided by a phase-1 LP that maximizes a common slack s in A nu + s <= b.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>
#include <iostream>
#include <cstdlib>

namespace sicbf::qp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct DenseQp {
  MatrixXd hessian;
  VectorXd linear;
  MatrixXd A_ineq;  // r x d
  VectorXd b_ineq;  // r
  VectorXd lb;      // d, -inf allowed
  VectorXd ub;      // d, +inf allowed

  int dim() const { return static_cast<int>(linear.size()); }
  int rows() const { return static_cast<int>(b_ineq.size()); }

  /// Unconstrained-box problem with d variables and no rows.
  static DenseQp unconstrained(MatrixXd hessian, VectorXd linear) {
    DenseQp qp;
    const auto d = linear.size();
    qp.hessian = std::move(hessian);
    qp.linear = std::move(linear);
    qp.A_ineq.resize(0, d);
    qp.b_ineq.resize(0);
    qp.lb = VectorXd::Constant(d, -kInf);
    qp.ub = VectorXd::Constant(d, kInf);
    return qp;
  }

  void add_row(const Eigen::RowVectorXd& a, double b) {
    A_ineq.conservativeResize(A_ineq.rows() + 1, Eigen::NoChange);
    A_ineq.row(A_ineq.rows() - 1) = a;
    b_ineq.conservativeResize(b_ineq.size() + 1);
    b_ineq[b_ineq.size() - 1] = b;
  }

  void validate() const {
    const auto d = linear.size();
    if (d == 0) throw std::invalid_argument("DenseQp: empty decision vector");
    if (hessian.rows() != d || hessian.cols() != d) throw std::invalid_argument("DenseQp: hessian shape");
    if (A_ineq.cols() != d || A_ineq.rows() != b_ineq.size()) throw std::invalid_argument("DenseQp: row shape");
    if (lb.size() != d || ub.size() != d) throw std::invalid_argument("DenseQp: bound shape");
    if ((hessian - hessian.transpose()).cwiseAbs().maxCoeff() > 1e-12) {
      throw std::invalid_argument("DenseQp: hessian is not symmetric");
    }
    if (Eigen::LLT<MatrixXd>(hessian).info() != Eigen::Success) {
      throw std::invalid_argument("DenseQp: hessian is not positive definite");
    }
    for (Eigen::Index i = 0; i < d; ++i) {
      if (std::isnan(lb[i]) || std::isnan(ub[i]) || lb[i] > ub[i]) throw std::invalid_argument("DenseQp: lb > ub");
    }
    if (!A_ineq.allFinite() || !b_ineq.allFinite() || !linear.allFinite()) {
      throw std::invalid_argument("DenseQp: non-finite problem data");
    }
  }
};

enum class QpStatus { Optimal, Infeasible, MaxIter };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::Optimal: return "optimal";
    case QpStatus::Infeasible: return "infeasible";
    case QpStatus::MaxIter: return "max_iter";
  }
  return "unknown";
}

struct QpSolution {
  QpStatus status = QpStatus::MaxIter;
  VectorXd nu;
  std::vector<int> active_rows;  // indices into A_ineq
  VectorXd row_multipliers;      // one per row, zero when inactive
  double objective = kInf;
  double kkt_residual = kInf;
  double primal_violation = kInf;
  double phase1_slack = 0.0;
  int iterations = 0;
};

struct QpSettings {
  double feas_tol = 1e-9;
  double kkt_tol = 1e-8;
  double mult_tol = 1e-10;
  double slack_cap = 1e6;
};

struct FeasibilityResult {
  bool feasible = false;
  VectorXd witness;
  double slack = 0.0;
};

namespace detail {

// Stacked inequality system G z <= h. `origin[i]` >= 0 names an A row;
// -(j+1) the lower bound of variable j; -(d+j+1) its upper bound.
struct Stacked {
  MatrixXd G;
  VectorXd h;
  std::vector<int> origin;
};

inline Stacked stack(const MatrixXd& A, const VectorXd& b, const VectorXd& lb, const VectorXd& ub) {
  const auto d = A.cols();
  std::vector<int> origin;
  for (Eigen::Index i = 0; i < A.rows(); ++i) origin.push_back(static_cast<int>(i));
  for (Eigen::Index j = 0; j < d; ++j) {
    if (std::isfinite(lb[j])) origin.push_back(-static_cast<int>(j) - 1);
    if (std::isfinite(ub[j])) origin.push_back(-static_cast<int>(d + j) - 1);
  }
  Stacked s;
  s.origin = origin;
  s.G.setZero(static_cast<Eigen::Index>(origin.size()), d);
  s.h.resize(static_cast<Eigen::Index>(origin.size()));
  for (std::size_t k = 0; k < origin.size(); ++k) {
    const int o = origin[k];
    const auto r = static_cast<Eigen::Index>(k);
    if (o >= 0) {
      s.G.row(r) = A.row(o);
      s.h[r] = b[o];
    } else if (-o - 1 < d) {
      const auto j = -o - 1;
      s.G(r, j) = -1.0;
      s.h[r] = -lb[j];
    } else {
      const auto j = -o - 1 - d;
      s.G(r, j) = 1.0;
      s.h[r] = ub[j];
    }
  }
  return s;
}

inline double max_violation(const MatrixXd& G, const VectorXd& h, const VectorXd& z) {
  if (G.rows() == 0) return 0.0;
  return std::max(0.0, (G * z - h).maxCoeff());
}

// Chooses the working-set member to release among negative multipliers:
// most negative first, lowest stacked index under Bland's rule.
inline int pick_release(const std::vector<int>& W, const VectorXd& lambda, double tol, bool bland) {
  int pos = -1;
  for (std::size_t k = 0; k < W.size(); ++k) {
    if (lambda[static_cast<Eigen::Index>(k)] >= -tol) continue;
    if (pos < 0) {
      pos = static_cast<int>(k);
    } else if (bland ? W[k] < W[static_cast<std::size_t>(pos)]
                     : lambda[static_cast<Eigen::Index>(k)] < lambda[pos]) {
      pos = static_cast<int>(k);
    }
  }
  return pos;
}

// Ratio test along p from feasible z. Returns the blocking stacked index or
// -1, and the step length in `alpha` (capped by `alpha_max`).
inline int ratio_test(const MatrixXd& G, const VectorXd& h, const std::vector<int>& W, const VectorXd& z,
                      const VectorXd& p, double alpha_max, bool bland, double& alpha) {
  alpha = alpha_max;
  int block = -1;
  double block_rate = 0.0;
  const double pnorm = p.norm();
  for (Eigen::Index i = 0; i < G.rows(); ++i) {
    if (std::find(W.begin(), W.end(), static_cast<int>(i)) != W.end()) continue;
    const double rate = G.row(i).dot(p);
    if (rate <= 1e-12 * G.row(i).norm() * pnorm) continue;
    const double step = std::max(0.0, h[i] - G.row(i).dot(z)) / rate;
    const bool take = block < 0 ? step <= alpha
                                : (step < alpha - 1e-15 || (!bland && step <= alpha + 1e-15 && rate > block_rate));
    if (take) {
      alpha = step;
      block = static_cast<int>(i);
      block_rate = rate;
    }
  }
  return block;
}

inline MatrixXd rows_of(const MatrixXd& G, const std::vector<int>& W) {
  MatrixXd out(static_cast<Eigen::Index>(W.size()), G.cols());
  for (std::size_t k = 0; k < W.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = G.row(W[k]);
  return out;
}

struct LpOutcome {
  enum class Status { Optimal, Unbounded, MaxIter } status = Status::MaxIter;
  VectorXd z;
  int iterations = 0;
};

// minimize c'z s.t. G z <= h from a feasible z. Each iteration either moves
// along the projection of -c onto the null space of the working rows, or
// releases a working row with a negative multiplier.
inline LpOutcome solve_lp(const VectorXd& c, const MatrixXd& G, const VectorXd& h, VectorXd z, int max_iter) {
  const auto n = z.size();
  std::vector<int> W;
  LpOutcome out;
  bool bland = false;
  int stalls = 0;
  for (int it = 0; it < max_iter; ++it) {
    out.iterations = it + 1;
    VectorXd p = -c;
    VectorXd lambda;
    if (!W.empty()) {
      const MatrixXd GWt = rows_of(G, W).transpose();
      Eigen::HouseholderQR<MatrixXd> qr(GWt);
      const MatrixXd Qfull = qr.householderQ();
      const auto k = static_cast<Eigen::Index>(W.size());
      if (k < n) {
        const MatrixXd Z = Qfull.rightCols(n - k);
        p = -Z * (Z.transpose() * c);
      } else {
        p.setZero();
      }
      if (p.norm() <= 1e-12 * (1.0 + c.norm())) lambda = qr.solve(VectorXd(-c));
    }
    if (p.norm() <= 1e-12 * (1.0 + c.norm())) {
      if (W.empty()) {  // c == 0: any feasible point is optimal
        out.status = LpOutcome::Status::Optimal;
        out.z = z;
        return out;
      }
      const int q = pick_release(W, lambda, 1e-12 * (1.0 + c.norm()), bland);
      if (q < 0) {
        out.status = LpOutcome::Status::Optimal;
        out.z = z;
        return out;
      }
      W.erase(W.begin() + q);
      continue;
    }
    double alpha = 0.0;
    const int block = ratio_test(G, h, W, z, p, kInf, bland, alpha);
    if (block < 0) {
      out.status = LpOutcome::Status::Unbounded;
      out.z = z;
      return out;
    }
    z += alpha * p;
    W.push_back(block);
    if (alpha * p.norm() <= 1e-14 * (1.0 + z.norm())) {
      if (++stalls > static_cast<int>(n) + 2) bland = true;
    } else {
      stalls = 0;
    }
  }
  out.z = z;
  return out;
}

// Phase-1 slack LP over the stacked system: rows A nu + s <= b keep the slack,
// box sides do not. Returns (nu, s*).
inline std::pair<VectorXd, double> max_slack(const MatrixXd& A, const VectorXd& b, const VectorXd& lb,
                                             const VectorXd& ub, const VectorXd& start, double slack_cap,
                                             int max_iter, bool& converged) {
  const auto d = A.cols();
  const auto r = A.rows();
  // variables z = (nu, s)
  MatrixXd Az(r, d + 1);
  Az << A, VectorXd::Ones(r);
  VectorXd lbz(d + 1), ubz(d + 1);
  lbz << lb, -kInf;
  ubz << ub, slack_cap;
  const Stacked st = stack(Az, b, lbz, ubz);
  VectorXd z(d + 1);
  z.head(d) = start.cwiseMax(lb).cwiseMin(ub);
  double s0 = slack_cap;
  if (r > 0) s0 = std::min(s0, (b - A * z.head(d)).minCoeff());
  z[d] = s0;
  VectorXd c = VectorXd::Zero(d + 1);
  c[d] = -1.0;
  const LpOutcome lp = solve_lp(c, st.G, st.h, z, max_iter);
  converged = lp.status == LpOutcome::Status::Optimal;
  return {lp.z.head(d), lp.z[d]};
}

}  // namespace detail

/// Maximizes s subject to A nu + s 1 <= b and the box; feasible iff s* > 0.
/// With no rows the slack is capped at `slack_cap`.
inline FeasibilityResult feasibility_lp(const MatrixXd& A, const VectorXd& b, const VectorXd& lb, const VectorXd& ub,
                                        double slack_cap = 1e6) {
  if (A.rows() != b.size() || lb.size() != A.cols() || ub.size() != A.cols()) {
    throw std::invalid_argument("feasibility_lp: inconsistent dimensions");
  }
  for (Eigen::Index j = 0; j < lb.size(); ++j) {
    if (lb[j] > ub[j]) throw std::invalid_argument("feasibility_lp: lb > ub");
  }
  bool converged = false;
  const int max_iter = 50 * static_cast<int>(A.cols() + 1 + A.rows() + 2 * A.cols() + 1);
  auto [nu, s] = detail::max_slack(A, b, lb, ub, VectorXd::Zero(A.cols()), slack_cap, max_iter, converged);
  if (!converged) throw std::runtime_error("feasibility_lp: iteration limit reached");
  return {s > 0.0, nu, s};
}

/// Primal active-set solve. Starts from the unconstrained minimizer clipped to
/// the box when that point satisfies every row; otherwise from the phase-1
/// max-slack point, which also certifies infeasibility when s* < -feas_tol.
inline QpSolution solve(const DenseQp& qp, const QpSettings& settings = {}) {
  qp.validate();
  const auto d = qp.dim();
  const detail::Stacked st = detail::stack(qp.A_ineq, qp.b_ineq, qp.lb, qp.ub);
  const Eigen::LLT<MatrixXd> llt(qp.hessian);
  const int max_iter = 50 * (d + static_cast<int>(st.G.rows()));

  QpSolution sol;
  VectorXd z = llt.solve(VectorXd(-qp.linear)).cwiseMax(qp.lb).cwiseMin(qp.ub);
  if (detail::max_violation(qp.A_ineq, qp.b_ineq, z) > settings.feas_tol) {
    bool converged = false;
    // Only the sign of s* matters here; a unit cap keeps the start point near z.
    auto [nu, s] = detail::max_slack(qp.A_ineq, qp.b_ineq, qp.lb, qp.ub, z, 1.0, max_iter, converged);
    sol.phase1_slack = s;
    if (!converged) {
      sol.status = QpStatus::MaxIter;
      sol.nu = nu;
      return sol;
    }
    if (s < -settings.feas_tol) {
      sol.status = QpStatus::Infeasible;
      sol.nu = nu;
      sol.primal_violation = -s;
      return sol;
    }
    z = nu;
  }

  std::vector<int> W;
  VectorXd lambda;
  bool bland = false;
  int stalls = 0;
  sol.status = QpStatus::MaxIter;
  for (int it = 0; it < max_iter; ++it) {
    sol.iterations = it + 1;
    const VectorXd grad = qp.hessian * z + qp.linear;
    VectorXd p;
    if (W.empty()) {
      p = -llt.solve(grad);
      lambda.resize(0);
    } else {
      // Range-space solve of the equality-constrained step: G_W p = 0.
      const MatrixXd GW = detail::rows_of(st.G, W);
      const MatrixXd HinvGt = llt.solve(MatrixXd(GW.transpose()));
      const VectorXd Hinvg = llt.solve(grad);
      const MatrixXd S = GW * HinvGt;
      lambda = S.fullPivLu().solve(VectorXd(-GW * Hinvg));
      p = -(Hinvg + HinvGt * lambda);
      if (static_cast<int>(W.size()) == d) p.setZero();
    }
    if (p.norm() <= 1e-11 * (1.0 + z.norm())) {
      const int q = detail::pick_release(W, lambda, settings.mult_tol, bland);
      if (q < 0) {
        sol.status = QpStatus::Optimal;
        break;
      }
      W.erase(W.begin() + q);
      continue;
    }
    double alpha = 1.0;
    const int block = detail::ratio_test(st.G, st.h, W, z, p, 1.0, bland, alpha);
    z += alpha * p;
    if (block >= 0) W.push_back(block);
    if (alpha * p.norm() <= 1e-14 * (1.0 + z.norm())) {
      if (++stalls > d + 2) bland = true;
    } else {
      stalls = 0;
    }
  }

  if (sol.status == QpStatus::Optimal && !W.empty()) {
    // Polish: solve the final equality-constrained KKT system directly.
    const auto k = static_cast<Eigen::Index>(W.size());
    const MatrixXd GW = detail::rows_of(st.G, W);
    MatrixXd K = MatrixXd::Zero(d + k, d + k);
    K.topLeftCorner(d, d) = qp.hessian;
    K.topRightCorner(d, k) = GW.transpose();
    K.bottomLeftCorner(k, d) = GW;
    VectorXd rhs(d + k);
    rhs.head(d) = -qp.linear;
    for (Eigen::Index i = 0; i < k; ++i) rhs[d + i] = st.h[W[static_cast<std::size_t>(i)]];
    const Eigen::FullPivLU<MatrixXd> lu(K);
    VectorXd sol_kkt = lu.solve(rhs);
    sol_kkt += lu.solve(VectorXd(rhs - K * sol_kkt));
    if (sol_kkt.allFinite() && detail::max_violation(st.G, st.h, sol_kkt.head(d)) <= settings.feas_tol) {
      z = sol_kkt.head(d);
      lambda = sol_kkt.tail(k);
    }
  }

  sol.nu = z;
  sol.objective = 0.5 * z.dot(qp.hessian * z) + qp.linear.dot(z);
  sol.row_multipliers = VectorXd::Zero(qp.rows());
  const VectorXd Hz = qp.hessian * z;
  VectorXd constraint_force = VectorXd::Zero(d);
  for (std::size_t k = 0; k < W.size(); ++k) {
    const double lam = lambda.size() == static_cast<Eigen::Index>(W.size()) ? lambda[static_cast<Eigen::Index>(k)]
                                                                             : 0.0;
    constraint_force += lam * st.G.row(W[k]).transpose();
    const int o = st.origin[static_cast<std::size_t>(W[k])];
    if (o >= 0) {
      sol.active_rows.push_back(o);
      sol.row_multipliers[o] = lam;
    }
  }
  std::sort(sol.active_rows.begin(), sol.active_rows.end());
  // Stationarity residual scaled by the largest term it balances.
  const double scale = 1.0 + std::max({Hz.lpNorm<Eigen::Infinity>(), qp.linear.lpNorm<Eigen::Infinity>(),
                                       constraint_force.lpNorm<Eigen::Infinity>()});
  const VectorXd stationarity = Hz + qp.linear + constraint_force;
  sol.kkt_residual = stationarity.lpNorm<Eigen::Infinity>() / scale;
  sol.primal_violation = detail::max_violation(st.G, st.h, z);
  return sol;
}

}  // namespace sicbf::qp
