#pragma once

// Random smooth (a, b) pairs with analytic Lipschitz bounds in (tau, x):
//   a(tau, x) = c1 sin(w tau + v.x + phi) + c2 tau - offset
//   b_j(tau, x) = e_j cos(w_j tau + v_j.x)

#include <sicbf/discretize.hpp>

#include <cmath>
#include <random>
#include <vector>

namespace sicbf::oracle {

struct SmoothPair {
  ParamScalarFn a;
  ParamRowFn b;
  double L_a = 0.0;
  double L_b = 0.0;
};

inline SmoothPair random_smooth_pair(std::mt19937_64& rng, int nu_dim, int x_dim, double offset = 0.0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double c1 = 2.0 * u(rng), c2 = u(rng), w = 4.0 * u(rng), phi = 3.0 * u(rng);
  Eigen::VectorXd v(x_dim);
  for (int i = 0; i < x_dim; ++i) v[i] = 2.0 * u(rng);
  Eigen::VectorXd e(nu_dim), wj(nu_dim);
  Eigen::MatrixXd V(nu_dim, x_dim);
  for (int j = 0; j < nu_dim; ++j) {
    e[j] = u(rng);
    wj[j] = 3.0 * u(rng);
    for (int i = 0; i < x_dim; ++i) V(j, i) = u(rng);
  }
  SmoothPair p;
  p.a = [=](double t, const Eigen::VectorXd& x) { return c1 * std::sin(w * t + v.dot(x) + phi) + c2 * t - offset; };
  p.b = [=](double t, const Eigen::VectorXd& x) {
    Eigen::RowVectorXd r(nu_dim);
    for (int j = 0; j < nu_dim; ++j) r[j] = e[j] * std::cos(wj[j] * t + V.row(j).dot(x));
    return r;
  };
  p.L_a = std::abs(c1) * std::sqrt(w * w + v.squaredNorm()) + std::abs(c2);
  double fro = 0.0;
  for (int j = 0; j < nu_dim; ++j) fro += e[j] * e[j] * (wj[j] * wj[j] + V.row(j).squaredNorm());
  p.L_b = std::sqrt(fro);
  return p;
}

/// Shifts a by a constant so that max over nodes of a + b nu equals -eps* at x.
inline SmoothPair tighten_exactly(SmoothPair p, const DiscretizationPlan& plan, const Eigen::VectorXd& x,
                                  const Eigen::VectorXd& nu) {
  double worst = -std::numeric_limits<double>::infinity();
  for (double t : plan.nodes) worst = std::max(worst, p.a(t, x) + p.b(t, x).dot(nu));
  const double shift = worst + plan.eps_star;
  p.a = [a = p.a, shift](double t, const Eigen::VectorXd& y) { return a(t, y) - shift; };
  return p;
}

}  // namespace sicbf::oracle
