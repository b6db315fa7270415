#pragma once

// Pointwise safety filters over a discretization plan.
//
// Optimal decay, nu = (u, omega):
//   min 1/2 |u - k_d|^2 + 1/2 p (omega - theta_d)^2
//   s.t. -dh g u - alpha(h) omega <= dh f - tighten   (one row per node)
//        -omega <= 0
// Plain, nu = u:
//   min 1/2 |u - k_d|^2  s.t.  -dh g u <= dh f + alpha(h) - tighten

#include <sicbf/barrier.hpp>
#include <sicbf/discretize.hpp>
#include <sicbf/dynamics.hpp>
#include <sicbf/qp.hpp>

#include <cmath>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace sicbf {

struct OptimalDecay {
  double p = 1.0;
  double theta_d = 1.0;
};
struct Plain {};
using FilterMode = std::variant<OptimalDecay, Plain>;

class FilterEvaluationError : public std::runtime_error {
 public:
  FilterEvaluationError(std::size_t node, double tau)
      : std::runtime_error("non-finite constraint data at node " + std::to_string(node) + " (tau = " +
                           std::to_string(tau) + ")"),
        node_(node),
        tau_(tau) {}
  std::size_t node() const noexcept { return node_; }
  double tau() const noexcept { return tau_; }

 private:
  std::size_t node_;
  double tau_;
};

template <int N, int M>
struct FilterSpec {
  ControlAffineSystem<N, M> sys;
  ConstraintFamily<N> fam;
  DiscretizationPlan plan;
  std::function<ClassKFunction(double)> alpha;  // class-K function used at parameter tau
  std::function<Vec<M>(const Vec<N>&)> k_d;
  FilterMode mode = OptimalDecay{};
  double tighten = 0.0;
  qp::QpSettings qp_settings;

  bool optimal_decay() const { return std::holds_alternative<OptimalDecay>(mode); }
  int decision_dim() const { return M + (optimal_decay() ? 1 : 0); }

  std::vector<ClassKFunction> alpha_per_node() const {
    std::vector<ClassKFunction> out;
    out.reserve(plan.nodes.size());
    for (double t : plan.nodes) out.push_back(alpha(t));
    return out;
  }

  void validate() const {
    sys.validate();
    if (!fam.h || !fam.grad) throw std::invalid_argument("FilterSpec: family needs h and grad");
    if (!alpha || !k_d) throw std::invalid_argument("FilterSpec: alpha and k_d are required");
    if (plan.nodes.empty()) throw std::invalid_argument("FilterSpec: plan has no nodes");
    for (double t : plan.nodes) {
      if (!fam.params.contains(t, 1e-9)) {
        throw std::invalid_argument("FilterSpec: node " + std::to_string(t) + " outside the parameter set");
      }
    }
    if (const auto* od = std::get_if<OptimalDecay>(&mode)) {
      if (!(od->p > 0.0)) throw std::invalid_argument("FilterSpec: p must be positive");
      if (!(od->theta_d >= 0.0)) throw std::invalid_argument("FilterSpec: theta_d must be nonnegative");
    }
    if (!(tighten >= 0.0)) throw std::invalid_argument("FilterSpec: tighten must be nonnegative");
  }
};

struct FilterRows {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;
};

template <int M>
struct FilterOutput {
  qp::QpStatus status = qp::QpStatus::Infeasible;
  Vec<M> u = Vec<M>::Zero();
  std::optional<double> omega;
  std::vector<std::size_t> active_nodes;
  int iterations = 0;
  double kkt_residual = 0.0;
  double objective = 0.0;

  bool optimal() const { return status == qp::QpStatus::Optimal; }
  Eigen::VectorXd nu() const {
    Eigen::VectorXd v(M + (omega ? 1 : 0));
    v.head(M) = u;
    if (omega) v[M] = *omega;
    return v;
  }
};

template <int N, int M>
std::vector<NodeEval<N>> evaluate_nodes(const FilterSpec<N, M>& spec, const Vec<N>& x) {
  return spec.fam.evaluate(spec.plan.nodes, x);
}

/// One row per node (plus the omega >= 0 row in optimal-decay mode) from
/// precomputed node evaluations.
template <int N, int M>
FilterRows assemble_rows(const FilterSpec<N, M>& spec, const Vec<N>& x, const std::vector<NodeEval<N>>& evals) {
  const bool od = spec.optimal_decay();
  const auto n_nodes = static_cast<Eigen::Index>(evals.size());
  const int d = spec.decision_dim();
  FilterRows rows{Eigen::MatrixXd::Zero(n_nodes + (od ? 1 : 0), d), Eigen::VectorXd::Zero(n_nodes + (od ? 1 : 0))};
  const Vec<N> fx = spec.sys.f(x);
  const Eigen::Matrix<double, N, M> gx = spec.sys.g(x);
  for (Eigen::Index i = 0; i < n_nodes; ++i) {
    const auto& e = evals[static_cast<std::size_t>(i)];
    const double a = spec.alpha(e.tau)(e.value);
    if (!std::isfinite(e.value) || !e.gradient.allFinite() || !std::isfinite(a)) {
      throw FilterEvaluationError(static_cast<std::size_t>(i), e.tau);
    }
    rows.A.block(i, 0, 1, M) = -(e.gradient * gx);
    const double drift = e.gradient.dot(fx.transpose());
    if (od) {
      rows.A(i, M) = -a;
      rows.b[i] = drift - spec.tighten;
    } else {
      rows.b[i] = drift + a - spec.tighten;
    }
  }
  if (od) {
    rows.A(n_nodes, M) = -1.0;
    rows.b[n_nodes] = 0.0;
  }
  return rows;
}

template <int N, int M>
FilterRows assemble_rows(const FilterSpec<N, M>& spec, const Vec<N>& x) {
  return assemble_rows(spec, x, evaluate_nodes(spec, x));
}

template <int N, int M>
qp::DenseQp build_qp(const FilterSpec<N, M>& spec, const Vec<N>& x, const FilterRows& rows) {
  const int d = spec.decision_dim();
  qp::DenseQp prob;
  prob.hessian = Eigen::MatrixXd::Identity(d, d);
  prob.linear = Eigen::VectorXd::Zero(d);
  prob.lb = Eigen::VectorXd::Constant(d, -std::numeric_limits<double>::infinity());
  prob.ub = Eigen::VectorXd::Constant(d, std::numeric_limits<double>::infinity());
  const Vec<M> kd = spec.k_d(x);
  prob.linear.head(M) = -kd;
  prob.lb.head(M) = spec.sys.input_lower;
  prob.ub.head(M) = spec.sys.input_upper;
  if (const auto* od = std::get_if<OptimalDecay>(&spec.mode)) {
    prob.hessian(M, M) = od->p;
    prob.linear[M] = -od->p * od->theta_d;
  }
  prob.A_ineq = rows.A;
  prob.b_ineq = rows.b;
  return prob;
}

template <int N, int M>
FilterOutput<M> solve_filter(const FilterSpec<N, M>& spec, const Vec<N>& x, const std::vector<NodeEval<N>>& evals) {
  const FilterRows rows = assemble_rows(spec, x, evals);
  const qp::QpSolution sol = qp::solve(build_qp(spec, x, rows), spec.qp_settings);
  FilterOutput<M> out;
  out.status = sol.status;
  out.iterations = sol.iterations;
  out.kkt_residual = sol.kkt_residual;
  out.objective = sol.objective;
  if (sol.status != qp::QpStatus::Optimal) return out;
  out.u = sol.nu.head(M);
  if (spec.optimal_decay()) out.omega = sol.nu[M];
  for (auto r : sol.active_rows) {
    if (r >= 0 && static_cast<std::size_t>(r) < evals.size()) out.active_nodes.push_back(static_cast<std::size_t>(r));
  }
  return out;
}

template <int N, int M>
FilterOutput<M> solve_filter(const FilterSpec<N, M>& spec, const Vec<N>& x) {
  return solve_filter(spec, x, evaluate_nodes(spec, x));
}

/// The filter rows in generic form a(tau, x) + b(tau, x) nu <= 0 (untightened).
template <int N, int M>
ParamScalarFn filter_a(const FilterSpec<N, M>& spec) {
  return [spec](double tau, const Eigen::VectorXd& xd) {
    const Vec<N> x = xd;
    const double lie = spec.fam.grad(tau, x).dot(spec.sys.f(x).transpose());
    return spec.optimal_decay() ? -lie : -lie - spec.alpha(tau)(spec.fam.h(tau, x));
  };
}

template <int N, int M>
ParamRowFn filter_b(const FilterSpec<N, M>& spec) {
  return [spec](double tau, const Eigen::VectorXd& xd) {
    const Vec<N> x = xd;
    const RowVec<N> grad = spec.fam.grad(tau, x);
    Eigen::RowVectorXd row(spec.decision_dim());
    row.head(M) = -(grad * spec.sys.g(x));
    if (spec.optimal_decay()) row[M] = -spec.alpha(tau)(spec.fam.h(tau, x));
    return row;
  };
}

/// Batched (a, b) through the family's shared node evaluation.
template <int N, int M>
ParamRowsFn filter_rows(const FilterSpec<N, M>& spec) {
  return [spec](std::span<const double> taus, const Eigen::VectorXd& xd) {
    const Vec<N> x = xd;
    const Vec<N> fx = spec.sys.f(x);
    const Eigen::Matrix<double, N, M> gx = spec.sys.g(x);
    std::vector<RowSample> out;
    out.reserve(taus.size());
    for (const auto& e : spec.fam.evaluate(taus, x)) {
      const double alpha = spec.alpha(e.tau)(e.value);
      RowSample r;
      r.b.resize(spec.decision_dim());
      r.b.head(M) = -(e.gradient * gx);
      r.a = -e.gradient.dot(fx.transpose());
      if (spec.optimal_decay()) {
        r.b[M] = -alpha;
      } else {
        r.a -= alpha;
      }
      out.push_back(std::move(r));
    }
    return out;
  };
}

/// Largest a + b nu over a grid of `density` parameters per unit length
/// (shared flow trace), with nu the filter output at x.
template <int N, int M>
double dense_row_margin(const FilterSpec<N, M>& spec, const Vec<N>& x, const FilterOutput<M>& out,
                        double density) {
  const auto taus = spec.fam.params.grid(density);
  const auto evals = spec.fam.evaluate(taus, x);
  const Vec<N> fx = spec.sys.f(x);
  const Vec<N> gu = spec.sys.g(x) * out.u;
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& e : evals) {
    const double a = spec.alpha(e.tau)(e.value);
    const double decay = out.omega ? *out.omega * a : a;
    worst = std::max(worst, -(e.gradient.dot((fx + gu).transpose()) + decay));
  }
  return worst;
}

struct ContinuityReport {
  bool base_feasible = false;
  std::vector<double> radii;
  std::vector<double> max_change;  // max |k(x') - k(x)| per radius
  std::vector<double> ratio;       // max_change / radius
  std::size_t infeasible_probes = 0;
  bool passed = false;
};

/// Samples the filter output on balls of radius r, r/2, r/4 around x. Passes
/// when the modulus ratio does not grow beyond 4x its value at r.
/// Infeasible probes are counted separately and do not fail the check.
template <int N, int M>
ContinuityReport continuity_probe(const FilterSpec<N, M>& spec, const Vec<N>& x, double radius, int n_samples,
                                  std::uint64_t seed = 0) {
  ContinuityReport rep;
  const auto base = solve_filter(spec, x);
  rep.base_feasible = base.optimal();
  if (!rep.base_feasible) return rep;
  const Eigen::VectorXd k0 = base.nu();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (double r : {radius, radius / 2, radius / 4}) {
    double worst = 0.0;
    for (int s = 0; s < n_samples; ++s) {
      Vec<N> dir;
      for (int i = 0; i < N; ++i) dir[i] = n01(rng);
      const Vec<N> xp = x + r * std::pow(unit(rng), 1.0 / N) * dir.normalized();
      const auto out = solve_filter(spec, xp);
      if (!out.optimal()) {
        ++rep.infeasible_probes;
        continue;
      }
      worst = std::max(worst, (out.nu() - k0).norm());
    }
    rep.radii.push_back(r);
    rep.max_change.push_back(worst);
    rep.ratio.push_back(worst / r);
  }
  double max_ratio = 0.0;
  for (double q : rep.ratio) max_ratio = std::max(max_ratio, q);
  rep.passed = max_ratio <= 4.0 * rep.ratio.front() + 1e-6;
  return rep;
}

/// Same nodes as spec.plan, with L_a, L_b estimated on T x (box of half-width
/// `radius` around x) and eps* back-solved from the node spacing.
template <int N, int M>
DiscretizationPlan localized_plan(const FilterSpec<N, M>& spec, const Vec<N>& x, double radius, int samples,
                                  std::uint64_t seed = 0) {
  const StateBox box{x.array() - radius, x.array() + radius};
  const auto L = estimate_lipschitz(filter_rows(spec), spec.fam.params, box, samples, seed);
  DiscretizationPlan plan = spec.plan;
  plan.L_a = L.L_a;
  plan.L_b = L.L_b;
  plan.eps_star = plan.delta * (L.L_a + L.L_b * plan.M_star);
  return plan;
}

struct ReductionReport {
  TightenReport tighten;
  std::size_t infeasible = 0;  // tightened filter had no solution
  std::vector<double> eps_star;  // per state
};

/// At each state: localized plan, filter solved with rows tightened by its
/// eps*, then the reduction premises and the dense untightened rows checked
/// for that solution.
template <int N, int M>
ReductionReport reduction_check(const FilterSpec<N, M>& spec, const std::vector<Vec<N>>& states, double radius,
                                int lipschitz_samples, int dense_factor = 20, std::uint64_t seed = 0) {
  ReductionReport rep;
  const auto rows = filter_rows(spec);
  for (std::size_t s = 0; s < states.size(); ++s) {
    const Vec<N>& x = states[s];
    const DiscretizationPlan plan = localized_plan(spec, x, radius, lipschitz_samples, seed + s);
    rep.eps_star.push_back(plan.eps_star);
    FilterSpec<N, M> tight = spec;
    tight.tighten = plan.eps_star;
    const auto out = solve_filter(tight, x);
    if (!out.optimal()) {
      ++rep.infeasible;
      continue;
    }
    const Eigen::VectorXd nu = out.nu();
    const auto one = tighten_and_check(plan, spec.fam.params, rows, [&](const Eigen::VectorXd&) { return nu; },
                                       {Eigen::VectorXd(x)}, dense_factor, 1e-9);
    auto& agg = rep.tighten;
    for (auto v : one.norm_failures) agg.norm_failures.push_back({s, v.tau, v.value});
    for (auto v : one.node_failures) agg.node_failures.push_back({s, v.tau, v.value});
    for (auto v : one.dense_violations) agg.dense_violations.push_back({s, v.tau, v.value});
    agg.states_checked += one.states_checked;
    agg.states_with_premises += one.states_with_premises;
    agg.worst_dense = std::max(agg.worst_dense, one.worst_dense);
  }
  return rep;
}

}  // namespace sicbf
