#pragma once

// The double-integrator backup-CBF experiment: backup design, implicit family,
// 42-node plan and the two filters (plain and optimal decay).

#include <sicbf/backup.hpp>
#include <sicbf/discretize.hpp>
#include <sicbf/filter.hpp>

#include <optional>

namespace sicbf {

struct ExperimentSettings {
  // backup
  double rho = 0.0;     // <= 0 requests calibration
  double rho_hi = 0.0;  // <= 0 uses the nested limit 1 / (P^-1)_11
  double horizon = 2.0;
  double flow_step = 1e-3;
  LinearBackupDesign design;
  // filter
  double alpha_c = 0.5;
  double alpha_b = 0.5;
  double k_d = 1.0;
  double theta_d = 1.0;
  double p = 1.0;
  bool tighten_eps_star = false;
  double tighten = 0.0;
  // plan
  std::optional<std::size_t> nodes = 42;
  std::optional<double> eps_star;
  double M_star = 10.0;
  int lipschitz_samples = 1000;
  std::uint64_t lipschitz_seed = 0;
  StateBox lipschitz_box{Eigen::Vector2d(-1.2, -1.5), Eigen::Vector2d(1.2, 1.5)};
};

struct Experiment {
  DoubleIntegratorExperiment backup;
  LipschitzEstimate lipschitz;
  FilterSpec<2, 1> od;
  FilterSpec<2, 1> plain;

  const ConstraintFamily<2>& family() const { return od.fam; }
  const DiscretizationPlan& plan() const { return od.plan; }
};

inline Experiment build_experiment(const ExperimentSettings& s) {
  if (!(s.alpha_c > 0.0) || !(s.alpha_b > 0.0)) throw std::invalid_argument("alpha coefficients must be positive");
  LinearBackupDesign design = s.design;
  design.design();
  double rho = s.rho;
  if (rho <= 0.0) rho = calibrate_rho(design, s.rho_hi > 0.0 ? s.rho_hi : design.nested_rho_limit());
  Experiment exp{make_double_integrator_spec(rho, s.horizon, s.flow_step, s.design), {}, {}, {}};

  FilterSpec<2, 1> od;
  od.sys = exp.backup.spec.sys;
  od.fam = make_implicit_family(exp.backup.spec);
  const double terminal = s.horizon + 1.0;
  const auto ac = ClassKFunction::linear(s.alpha_c), ab = ClassKFunction::linear(s.alpha_b);
  od.alpha = [ac, ab, terminal](double tau) { return std::abs(tau - terminal) <= 1e-9 ? ab : ac; };
  const double kd = s.k_d;
  od.k_d = [kd](const Vec<2>&) { return Vec<1>::Constant(kd); };
  od.mode = OptimalDecay{s.p, s.theta_d};

  exp.lipschitz = estimate_lipschitz(filter_rows(od), od.fam.params, s.lipschitz_box,
                                     s.lipschitz_samples, s.lipschitz_seed);
  const auto& T = od.fam.params;
  if (s.eps_star) {
    od.plan = build_plan(T, *s.eps_star, s.M_star, exp.lipschitz.L_a, exp.lipschitz.L_b);
  } else if (s.nodes) {
    od.plan = plan_for_node_count(T, *s.nodes, s.M_star, exp.lipschitz.L_a, exp.lipschitz.L_b);
  } else {
    throw std::invalid_argument("plan needs N or eps_star");
  }
  od.tighten = s.tighten_eps_star ? od.plan.eps_star : s.tighten;
  od.validate();
  exp.od = od;
  exp.plain = od;
  exp.plain.mode = Plain{};
  exp.plain.validate();
  return exp;
}

}  // namespace sicbf
