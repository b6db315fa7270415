#include <sicbf/experiment.hpp>
#include <sicbf/filter.hpp>

#include "oracles/kkt_enumeration.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace sicbf;

namespace {

const Experiment& experiment() {
  static const Experiment e = build_experiment({});
  return e;
}

// One-node family on a 2-state, 1-input toy system with prescribed h, dh.g and dh.f.
FilterSpec<2, 1> single_node(double h, double dh_g, double dh_f, FilterMode mode) {
  FilterSpec<2, 1> spec;
  spec.sys.f = [](const Vec<2>&) { return Vec<2>(1.0, 0.0); };
  spec.sys.g = [](const Vec<2>&) { return Eigen::Matrix<double, 2, 1>(0.0, 1.0); };
  spec.fam.params = ParameterSet({}, {0.0});
  spec.fam.h = [h](double, const Vec<2>&) { return h; };
  spec.fam.grad = [dh_g, dh_f](double, const Vec<2>&) { return RowVec<2>(dh_f, dh_g); };
  spec.plan.nodes = {0.0};
  spec.plan.delta = 1.0;
  spec.plan.eps_star = 1.0;
  spec.plan.M_star = 10.0;
  spec.alpha = [](double) { return ClassKFunction::linear(0.5); };
  spec.k_d = [](const Vec<2>&) { return Vec<1>::Constant(0.3); };
  spec.mode = mode;
  return spec;
}

const Vec<2> kOrigin = Vec<2>::Zero();

}  // namespace

TEST(AssembleRows, VacuousRow) {
  const auto spec = single_node(0.0, 0.0, 1.0, OptimalDecay{});
  const auto rows = assemble_rows(spec, kOrigin);
  ASSERT_EQ(rows.A.rows(), 2);
  EXPECT_EQ(rows.A.row(0), Eigen::RowVector2d(0.0, 0.0));
  EXPECT_EQ(rows.b[0], 1.0);
  EXPECT_EQ(rows.A.row(1), Eigen::RowVector2d(0.0, -1.0));
  EXPECT_EQ(rows.b[1], 0.0);
}

TEST(AssembleRows, DecayVariableRescuesRow) {
  // h = 2, alpha = s/2, dh.f = -3, dh.g = 0
  const auto od = single_node(2.0, 0.0, -3.0, OptimalDecay{});
  const auto rows = assemble_rows(od, kOrigin);
  EXPECT_EQ(rows.A(0, 1), -1.0);
  EXPECT_EQ(rows.b[0], -3.0);  // omega >= 3
  const auto out = solve_filter(od, kOrigin);
  ASSERT_TRUE(out.optimal());
  EXPECT_NEAR(*out.omega, 3.0, 1e-9);

  const auto plain = single_node(2.0, 0.0, -3.0, Plain{});
  const auto prow = assemble_rows(plain, kOrigin);
  EXPECT_EQ(prow.A.cols(), 1);
  EXPECT_EQ(prow.b[0], -3.0 + 1.0);  // 0 <= -2
  EXPECT_EQ(solve_filter(plain, kOrigin).status, qp::QpStatus::Infeasible);
}

TEST(AssembleRows, NonFiniteDataNamesTheNode) {
  auto spec = single_node(1.0, 1.0, 1.0, OptimalDecay{});
  spec.fam.h = [](double, const Vec<2>&) { return std::nan(""); };
  try {
    assemble_rows(spec, kOrigin);
    FAIL();
  } catch (const FilterEvaluationError& e) {
    EXPECT_EQ(e.node(), 0u);
    EXPECT_EQ(e.tau(), 0.0);
  }
}

TEST(FilterSpec, Validation) {
  auto spec = single_node(1.0, 1.0, 1.0, OptimalDecay{0.0, 1.0});
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec.mode = OptimalDecay{1.0, -1.0};
  EXPECT_THROW(spec.validate(), std::invalid_argument);
  spec.mode = OptimalDecay{};
  spec.plan.nodes = {0.5};
  EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(SolveFilter, InactiveRowsPassNominalThrough) {
  auto spec = single_node(1.0, 0.0, 5.0, OptimalDecay{1.0, 1.0});
  spec.k_d = [](const Vec<2>&) { return Vec<1>::Constant(3.0); };
  spec.sys.input_lower = Vec<1>::Constant(-1.0);
  spec.sys.input_upper = Vec<1>::Constant(1.0);
  const auto out = solve_filter(spec, kOrigin);
  ASSERT_TRUE(out.optimal());
  EXPECT_NEAR(out.u[0], 1.0, 1e-8);
  EXPECT_NEAR(*out.omega, 1.0, 1e-8);
  EXPECT_TRUE(out.active_nodes.empty());
}

TEST(SolveFilter, MatchesEnumerationOracle) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    const double h = u(rng) + 1.0, dg = u(rng), df = u(rng);
    const bool od = trial % 2 == 0;
    auto spec = single_node(h, dg, df, od ? FilterMode{OptimalDecay{}} : FilterMode{Plain{}});
    spec.sys.input_lower = Vec<1>::Constant(-1.0);
    spec.sys.input_upper = Vec<1>::Constant(1.0);
    const auto rows = assemble_rows(spec, kOrigin);
    const auto q = build_qp(spec, kOrigin, rows);
    const auto ref = oracle::kkt_enumerate(q.hessian, q.linear, q.A_ineq, q.b_ineq, q.lb, q.ub);
    const auto out = solve_filter(spec, kOrigin);
    ASSERT_EQ(out.optimal(), ref.feasible) << trial;
    if (ref.feasible) EXPECT_LT((out.nu() - ref.nu).norm(), 1e-7) << trial;
  }
}

TEST(Experiment, OriginPassesNominalThrough) {
  const auto& e = experiment();
  const auto out = solve_filter(e.od, kOrigin);
  ASSERT_TRUE(out.optimal());
  EXPECT_NEAR(out.u[0], 1.0, 1e-8);
  EXPECT_NEAR(*out.omega, 1.0, 1e-8);
  EXPECT_LT(dense_row_margin(e.od, kOrigin, out, 400.0), 0.0);
}

TEST(Experiment, PlanHasFortyTwoNodes) {
  const auto& e = experiment();
  EXPECT_EQ(e.plan().size(), 42u);
  EXPECT_NEAR(e.plan().delta, 0.025, 1e-15);
  EXPECT_EQ(e.plan().nodes.back(), 3.0);
  const auto alphas = e.od.alpha_per_node();
  EXPECT_EQ(alphas.front().coefficient(), 0.5);
  EXPECT_EQ(alphas.back().coefficient(), 0.5);
}

TEST(Experiment, OptimalDecayRescuesAPlainInfeasibleInteriorState) {
  const auto& e = experiment();
  // brute-force search along x1 = 0.5 for a plain-infeasible interior state
  bool found = false;
  for (int k = 0; k <= 60 && !found; ++k) {
    const Vec<2> x(0.5, -1.5 + 3.0 * k / 60);
    if (membership(e.family(), x) != Membership::Interior) continue;
    if (solve_filter(e.plain, x).optimal()) continue;
    found = true;
    const auto od = solve_filter(e.od, x);
    ASSERT_TRUE(od.optimal());
    // grid over (u, omega) confirms the plain rows have no solution in the box
    const auto rows = assemble_rows(e.plain, x);
    for (int i = 0; i <= 200; ++i) {
      const double uu = -1.0 + i / 100.0;
      EXPECT_TRUE(((rows.A * Vec<1>(uu)) - rows.b).maxCoeff() > 0.0);
    }
    const auto odrows = assemble_rows(e.od, x);
    EXPECT_LE((odrows.A * od.nu() - odrows.b).maxCoeff(), 1e-9);
  }
  EXPECT_TRUE(found);
}

TEST(Experiment, OptimalDecayFeasibleWherePlainIs) {
  const auto& e = experiment();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u1(-1.2, 1.2), u2(-1.5, 1.5);
  for (int s = 0; s < 40; ++s) {
    const Vec<2> x(u1(rng), u2(rng));
    const auto ev = evaluate_nodes(e.od, x);
    const auto plain = solve_filter(e.plain, x, ev);
    if (!plain.optimal()) continue;
    EXPECT_TRUE(solve_filter(e.od, x, ev).optimal());
    // the plain input with omega = 1 is OD-feasible
    const auto rows = assemble_rows(e.od, x, ev);
    EXPECT_LE((rows.A * Eigen::Vector2d(plain.u[0], 1.0) - rows.b).maxCoeff(), 1e-9);
  }
}

TEST(Continuity, NoRowsGivesLinearModulus) {
  FilterSpec<2, 1> spec = single_node(1.0, 0.0, 100.0, OptimalDecay{});
  spec.k_d = [](const Vec<2>& x) { return Vec<1>::Constant(0.5 * std::sin(x[0]) + x[1]); };
  const auto r = continuity_probe(spec, Vec<2>(0.1, 0.2), 0.1, 40);
  EXPECT_TRUE(r.base_feasible);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.infeasible_probes, 0u);
  EXPECT_LT(r.max_change[2], r.max_change[0]);
  EXPECT_LE(r.ratio.front(), std::sqrt(1.25) + 1e-6);
}

TEST(Continuity, SingleActiveRowIsAffineProjection) {
  // row: -x1 u <= -1 + ... ; with dh = (dh_f, dh_g) state dependent
  FilterSpec<2, 1> spec;
  spec.sys.f = [](const Vec<2>&) { return Vec<2>(1.0, 0.0); };
  spec.sys.g = [](const Vec<2>&) { return Eigen::Matrix<double, 2, 1>(0.0, 1.0); };
  spec.fam.params = ParameterSet({}, {0.0});
  spec.fam.h = [](double, const Vec<2>&) { return 0.0; };
  spec.fam.grad = [](double, const Vec<2>& x) { return RowVec<2>(x[0] - 1.0, 1.0 + x[1]); };
  spec.plan.nodes = {0.0};
  spec.alpha = [](double) { return ClassKFunction::linear(1.0); };
  spec.k_d = [](const Vec<2>&) { return Vec<1>::Constant(0.0); };
  spec.mode = Plain{};
  // row: -(1 + x2) u <= x1 - 1, i.e. u >= (1 - x1) / (1 + x2); projection of 0
  const Vec<2> x(0.2, 0.1);
  const auto out = solve_filter(spec, x);
  ASSERT_TRUE(out.optimal());
  EXPECT_NEAR(out.u[0], 0.8 / 1.1, 1e-9);
  EXPECT_EQ(out.active_nodes.size(), 1u);
  const auto r = continuity_probe(spec, x, 0.05, 40);
  EXPECT_TRUE(r.passed);
  EXPECT_EQ(r.infeasible_probes, 0u);
}

TEST(Continuity, PlainBoundaryReportsInfeasibleNeighbours) {
  const auto& e = experiment();
  // walk x2 downward at x1 = 0.5 until plain turns infeasible, probe the last feasible state
  Vec<2> last(0.5, 1.5);
  bool have = false;
  for (int k = 0; k <= 120; ++k) {
    const Vec<2> x(0.5, 1.5 - 3.0 * k / 120);
    const bool ok = solve_filter(e.plain, x).optimal();
    if (ok) {
      last = x;
      have = true;
    } else if (have) {
      break;
    }
  }
  ASSERT_TRUE(have);
  const auto r = continuity_probe(e.plain, last, 0.05, 12);
  EXPECT_TRUE(r.base_feasible);
  EXPECT_GT(r.infeasible_probes, 0u);
}

TEST(Experiment, LipschitzEstimateAgreesWithDenserSampling) {
  const auto& e = experiment();
  const StateBox box{Eigen::Vector2d(-1.2, -1.2), Eigen::Vector2d(1.2, 1.2)};
  const auto rows = filter_rows(e.od);
  const auto est = estimate_lipschitz(rows, e.family().params, box, 1000, 1);
  const auto dense = estimate_lipschitz(rows, e.family().params, box, 10000, 2, 1.0);
  EXPECT_GT(est.L_a, 0.0);
  EXPECT_TRUE(std::isfinite(est.L_a) && std::isfinite(est.L_b));
  EXPECT_GE(est.L_a / 1.5, dense.L_a / 2.0);
  EXPECT_LE(est.L_a / 1.5, dense.L_a * 2.0);
  EXPECT_GE(est.L_b / 1.5, dense.L_b / 2.0);
  EXPECT_LE(est.L_b / 1.5, dense.L_b * 2.0);
}

TEST(Experiment, ReductionSoundAtInteriorStates) {
  const auto& e = experiment();
  const std::vector<Vec<2>> xs = {Vec<2>(0.0, 0.0), Vec<2>(0.3, -0.2), Vec<2>(-0.5, 0.4)};
  const auto r = reduction_check(e.od, xs, 0.05, 1000);
  EXPECT_EQ(r.tighten.states_with_premises, xs.size());
  EXPECT_TRUE(r.tighten.sound());
}
