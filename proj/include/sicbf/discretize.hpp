#pragma once

// Finite reduction of a parametric inequality a(tau, x) + b(tau, x) nu <= 0
// over tau in T: nodes spaced at most 2 Delta apart with
// Delta = eps* / (L_a + L_b M*), rows tightened by eps*.

#include <sicbf/barrier.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace sicbf {

using ParamScalarFn = std::function<double(double, const Eigen::VectorXd&)>;
using ParamRowFn = std::function<Eigen::RowVectorXd(double, const Eigen::VectorXd&)>;

struct RowSample {
  double a = 0.0;
  Eigen::RowVectorXd b;
};
// (a, b) at several tau for one state; lets flow-defined rows share work.
using ParamRowsFn = std::function<std::vector<RowSample>(std::span<const double>, const Eigen::VectorXd&)>;

inline ParamRowsFn rows_from(ParamScalarFn a, ParamRowFn b) {
  return [a = std::move(a), b = std::move(b)](std::span<const double> taus, const Eigen::VectorXd& x) {
    std::vector<RowSample> out;
    out.reserve(taus.size());
    for (double t : taus) out.push_back({a(t, x), b(t, x)});
    return out;
  };
}

struct StateBox {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;
};

struct DiscretizationPlan {
  std::vector<double> nodes;  // ascending, tau_1 .. tau_N
  double delta = 0.0;
  double eps_star = 0.0;
  double M_star = 0.0;
  double L_a = 0.0;
  double L_b = 0.0;

  std::size_t size() const { return nodes.size(); }
};

struct LipschitzEstimate {
  double L_a = 0.0;
  double L_b = 0.0;
};

namespace detail {

// Uniform over the total interval length; isolated points get probability
// 1 / (pieces + 1) each when present.
inline double sample_tau(const ParameterSet& T, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto& ivs = T.intervals();
  const auto& pts = T.points();
  const double point_mass = ivs.empty() ? 1.0 : static_cast<double>(pts.size()) / (ivs.size() + pts.size());
  if (!pts.empty() && unit(rng) < point_mass) {
    return pts[std::min(pts.size() - 1, static_cast<std::size_t>(unit(rng) * static_cast<double>(pts.size())))];
  }
  double total = 0.0;
  for (const auto& iv : ivs) total += iv.length();
  double r = unit(rng) * total;
  for (const auto& iv : ivs) {
    if (r <= iv.length()) return iv.lo + r;
    r -= iv.length();
  }
  return ivs.back().hi;
}

inline Eigen::VectorXd sample_box(const StateBox& box, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::VectorXd x(box.lo.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = box.lo[i] + unit(rng) * (box.hi[i] - box.lo[i]);
  return x;
}

// Nodes per interval at spacing <= `spacing`, endpoints included, plus points.
inline std::vector<double> covering_nodes(const ParameterSet& T, double spacing) {
  std::vector<double> nodes;
  for (const auto& iv : T.intervals()) {
    if (iv.length() == 0.0) {
      nodes.push_back(iv.lo);
      continue;
    }
    const int cells = std::max(1, static_cast<int>(std::ceil(iv.length() / spacing - 1e-9)));
    for (int k = 0; k <= cells; ++k) nodes.push_back(k == cells ? iv.hi : iv.lo + iv.length() * k / cells);
  }
  nodes.insert(nodes.end(), T.points().begin(), T.points().end());
  std::sort(nodes.begin(), nodes.end());
  return nodes;
}

inline double node_distance(const std::vector<double>& nodes, double t) {
  const auto it = std::lower_bound(nodes.begin(), nodes.end(), t);
  double d = std::numeric_limits<double>::infinity();
  if (it != nodes.end()) d = *it - t;
  if (it != nodes.begin()) d = std::min(d, t - *(it - 1));
  return d;
}

}  // namespace detail

/// Sampled Lipschitz constants of a and b in (tau, x), inflated by 1.5 with a
/// 1e-12 floor. Half the pairs are local perturbations, half independent draws.
inline LipschitzEstimate estimate_lipschitz(const ParamRowsFn& rows, const ParameterSet& T, const StateBox& box,
                                            int samples = 2000, std::uint64_t seed = 0, double inflation = 1.5) {
  if (box.lo.size() != box.hi.size() || box.lo.size() == 0) throw std::invalid_argument("estimate_lipschitz: bad box");
  if ((box.lo.array() > box.hi.array()).any()) throw std::invalid_argument("estimate_lipschitz: lo > hi");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  const double scale = 1e-3 * std::max(1.0, (box.hi - box.lo).norm());
  LipschitzEstimate out;
  for (int s = 0; s < samples; ++s) {
    const double t1 = detail::sample_tau(T, rng);
    const Eigen::VectorXd x1 = detail::sample_box(box, rng);
    double t2;
    Eigen::VectorXd x2;
    if (s % 2 == 0) {
      t2 = t1;
      const double dt = scale * n01(rng);
      if (T.contains(t1 + dt, 0.0)) t2 = t1 + dt;
      x2 = x1;
      for (Eigen::Index i = 0; i < x2.size(); ++i) {
        x2[i] = std::clamp(x1[i] + scale * n01(rng), box.lo[i], box.hi[i]);
      }
    } else {
      t2 = detail::sample_tau(T, rng);
      x2 = detail::sample_box(box, rng);
    }
    const double dist = std::sqrt((t1 - t2) * (t1 - t2) + (x1 - x2).squaredNorm());
    if (dist <= 0.0) continue;
    const RowSample p = rows(std::span<const double>(&t1, 1), x1).front();
    const RowSample q = rows(std::span<const double>(&t2, 1), x2).front();
    out.L_a = std::max(out.L_a, std::abs(p.a - q.a) / dist);
    out.L_b = std::max(out.L_b, (p.b - q.b).norm() / dist);
  }
  out.L_a = std::max(inflation * out.L_a, 1e-12);
  out.L_b = std::max(inflation * out.L_b, 1e-12);
  return out;
}

inline LipschitzEstimate estimate_lipschitz(const ParamScalarFn& a, const ParamRowFn& b, const ParameterSet& T,
                                            const StateBox& box, int samples = 2000, std::uint64_t seed = 0,
                                            double inflation = 1.5) {
  return estimate_lipschitz(rows_from(a, b), T, box, samples, seed, inflation);
}

/// Delta = eps* / (L_a + L_b M*) and ceil(len / (2 Delta)) + 1 nodes per interval.
inline DiscretizationPlan build_plan(const ParameterSet& T, double eps_star, double M_star, double L_a, double L_b) {
  if (!(eps_star > 0.0)) throw std::invalid_argument("build_plan: eps_star must be positive");
  if (!(M_star > 0.0)) throw std::invalid_argument("build_plan: M_star must be positive");
  if (!(L_a >= 0.0) || !(L_b >= 0.0) || !(L_a + L_b * M_star > 0.0)) {
    throw std::invalid_argument("build_plan: need L_a + L_b M_star > 0");
  }
  DiscretizationPlan plan;
  plan.eps_star = eps_star;
  plan.M_star = M_star;
  plan.L_a = L_a;
  plan.L_b = L_b;
  plan.delta = eps_star / (L_a + L_b * M_star);
  plan.nodes = detail::covering_nodes(T, 2.0 * plan.delta);
  return plan;
}

/// Largest Delta whose plan has exactly N nodes; eps* is back-solved from it.
inline DiscretizationPlan plan_for_node_count(const ParameterSet& T, std::size_t N, double M_star, double L_a,
                                              double L_b) {
  const std::size_t fixed = T.points().size();
  std::size_t degenerate = 0;
  for (const auto& iv : T.intervals()) degenerate += iv.length() == 0.0 ? 1 : 0;
  std::vector<double> candidates;
  for (const auto& iv : T.intervals()) {
    if (iv.length() == 0.0) continue;
    for (std::size_t k = 1; k <= N; ++k) candidates.push_back(iv.length() / (2.0 * static_cast<double>(k)));
  }
  std::sort(candidates.begin(), candidates.end(), std::greater<>());
  if (candidates.empty()) {
    if (fixed + degenerate != N) throw std::invalid_argument("plan_for_node_count: node count fixed by isolated points");
    return build_plan(T, 1.0, M_star, L_a, L_b);
  }
  for (double delta : candidates) {
    if (detail::covering_nodes(T, 2.0 * delta).size() == N) {
      return build_plan(T, delta * (L_a + L_b * M_star), M_star, L_a, L_b);
    }
  }
  throw std::invalid_argument("plan_for_node_count: no plan with exactly " + std::to_string(N) + " nodes");
}

/// Same Delta and eps*, nodes spaced at factor * 2 Delta. For demonstrating
/// that the covering condition is needed.
inline DiscretizationPlan coarsened(const DiscretizationPlan& plan, const ParameterSet& T, double factor) {
  DiscretizationPlan out = plan;
  out.nodes = detail::covering_nodes(T, factor * 2.0 * plan.delta);
  return out;
}

/// Dense grid with `factor` points per node cell on each interval, plus the
/// isolated points.
inline std::vector<double> dense_grid(const DiscretizationPlan& plan, const ParameterSet& T, int factor) {
  std::vector<double> out;
  for (const auto& iv : T.intervals()) {
    const auto inside = std::count_if(plan.nodes.begin(), plan.nodes.end(),
                                      [&](double t) { return t >= iv.lo && t <= iv.hi; });
    const double cells = static_cast<double>(std::max<std::ptrdiff_t>(1, inside - 1) * factor);
    const auto g = ParameterSet::interval_grid(iv, cells / std::max(iv.length(), 1e-300));
    out.insert(out.end(), g.begin(), g.end());
  }
  out.insert(out.end(), T.points().begin(), T.points().end());
  return out;
}

/// Largest distance from a dense-grid tau to its nearest node.
inline double covering_radius(const DiscretizationPlan& plan, const std::vector<double>& dense) {
  double worst = 0.0;
  for (double t : dense) {
    const auto it = std::lower_bound(plan.nodes.begin(), plan.nodes.end(), t);
    double d = std::numeric_limits<double>::infinity();
    if (it != plan.nodes.end()) d = *it - t;
    if (it != plan.nodes.begin()) d = std::min(d, t - *(it - 1));
    worst = std::max(worst, d);
  }
  return worst;
}

struct TightenViolation {
  std::size_t state = 0;
  double tau = 0.0;
  double value = 0.0;  // a + b nu, or |nu| - M* for norm failures
};

struct TightenReport {
  std::vector<TightenViolation> norm_failures;   // |nu| > M*
  std::vector<TightenViolation> node_failures;   // a + b nu > -eps* at a node
  std::vector<TightenViolation> dense_violations;  // a + b nu > 0, premises held
  std::size_t states_checked = 0;
  std::size_t states_with_premises = 0;
  double worst_dense = -std::numeric_limits<double>::infinity();
  bool sound() const { return dense_violations.empty(); }
};

/// Checks the premises |nu| <= M* and node rows at margin eps*, then the
/// untightened rows on the dense grid. Dense violations are recorded only for
/// states whose premises hold.
inline TightenReport tighten_and_check(const DiscretizationPlan& plan, const ParameterSet& T, const ParamRowsFn& rows,
                                       const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& nu_star,
                                       const std::vector<Eigen::VectorXd>& states, int dense_factor = 20,
                                       double tol = 1e-12) {
  TightenReport rep;
  const auto dense = dense_grid(plan, T, dense_factor);
  for (std::size_t s = 0; s < states.size(); ++s) {
    const Eigen::VectorXd& x = states[s];
    const Eigen::VectorXd nu = nu_star(x);
    ++rep.states_checked;
    bool ok = true;
    if (nu.norm() > plan.M_star) {
      rep.norm_failures.push_back({s, 0.0, nu.norm() - plan.M_star});
      ok = false;
    }
    const auto at_nodes = rows(plan.nodes, x);
    for (std::size_t i = 0; i < plan.nodes.size(); ++i) {
      const double v = at_nodes[i].a + at_nodes[i].b.dot(nu);
      if (v > -plan.eps_star + tol) {
        rep.node_failures.push_back({s, plan.nodes[i], v});
        ok = false;
      }
    }
    if (!ok) continue;
    ++rep.states_with_premises;
    const auto at_dense = rows(dense, x);
    for (std::size_t i = 0; i < dense.size(); ++i) {
      const double v = at_dense[i].a + at_dense[i].b.dot(nu);
      rep.worst_dense = std::max(rep.worst_dense, v);
      if (v > tol) rep.dense_violations.push_back({s, dense[i], v});
    }
  }
  return rep;
}

inline TightenReport tighten_and_check(const DiscretizationPlan& plan, const ParameterSet& T, const ParamScalarFn& a,
                                       const ParamRowFn& b,
                                       const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& nu_star,
                                       const std::vector<Eigen::VectorXd>& states, int dense_factor = 20,
                                       double tol = 1e-12) {
  return tighten_and_check(plan, T, rows_from(a, b), nu_star, states, dense_factor, tol);
}

/// a(tau) = -eps* + L_a dist(tau, nodes), which meets every node row at
/// margin eps* exactly and has Lipschitz constant L_a.
inline ParamScalarFn tent_function(const DiscretizationPlan& plan) {
  return [nodes = plan.nodes, eps = plan.eps_star, L = plan.L_a](double t, const Eigen::VectorXd&) {
    return -eps + L * detail::node_distance(nodes, t);
  };
}

/// Companion row L_b d(tau) e_1 for the tent: with nu = M* e_1 the pair
/// a + b nu = -eps* + (L_a + L_b M*) d(tau) meets the margin with equality
/// at distance Delta.
inline ParamRowFn tent_row(const DiscretizationPlan& plan, int dim) {
  return [nodes = plan.nodes, L = plan.L_b, dim](double t, const Eigen::VectorXd&) {
    Eigen::RowVectorXd b = Eigen::RowVectorXd::Zero(dim);
    b[0] = L * detail::node_distance(nodes, t);
    return b;
  };
}

}  // namespace sicbf
