#pragma once

// Random strictly convex QP generator shared by the unit and acceptance suites.

#include <sicbf/qp.hpp>

#include <random>

namespace sicbf::oracle {

inline qp::DenseQp random_qp(std::mt19937_64& rng, int max_dim = 4, int max_rows = 12) {
  std::uniform_int_distribution<int> dim_dist(1, max_dim);
  std::uniform_int_distribution<int> row_dist(0, max_rows);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int d = dim_dist(rng);
  const int r = row_dist(rng);

  Eigen::MatrixXd L(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) L(i, j) = normal(rng);
  qp::DenseQp qp;
  qp.hessian = L * L.transpose() + 0.1 * Eigen::MatrixXd::Identity(d, d);
  qp.linear.resize(d);
  for (int i = 0; i < d; ++i) qp.linear[i] = 2.0 * normal(rng);

  // Rows pass near a random anchor; negative offsets make some problems infeasible.
  Eigen::VectorXd anchor(d);
  for (int i = 0; i < d; ++i) anchor[i] = normal(rng);
  qp.A_ineq.resize(r, d);
  qp.b_ineq.resize(r);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < d; ++j) qp.A_ineq(i, j) = normal(rng);
    qp.b_ineq[i] = qp.A_ineq.row(i).dot(anchor) + (unit(rng) * 2.0 - 0.4);
  }
  qp.lb = Eigen::VectorXd::Constant(d, -qp::kInf);
  qp.ub = Eigen::VectorXd::Constant(d, qp::kInf);
  for (int j = 0; j < d; ++j) {
    if (unit(rng) < 0.3) qp.lb[j] = anchor[j] - 0.5 - unit(rng);
    if (unit(rng) < 0.3) qp.ub[j] = anchor[j] + 0.5 + unit(rng);
  }
  return qp;
}

}  // namespace sicbf::oracle
