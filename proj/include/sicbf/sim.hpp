#pragma once

// Closed-loop simulation under a filter (zero-order hold), state-space
// feasibility scans, boundary sampling and the two-sided invariance suite.

#include <sicbf/barrier.hpp>
#include <sicbf/dynamics.hpp>
#include <sicbf/filter.hpp>

#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

namespace sicbf {

constexpr double kSafetyTol = 1e-3;
constexpr double kLieEscape = 1e-3;

enum class TraceStatus { Completed, Halted };

inline const char* to_string(TraceStatus s) { return s == TraceStatus::Completed ? "completed" : "halted"; }

template <int N, int M>
struct SimulationTrace {
  std::vector<double> times;
  std::vector<Vec<N>> states;
  std::vector<Vec<M>> inputs;
  std::vector<double> omegas;  // optimal-decay mode only
  std::vector<double> H_values;
  TraceStatus status = TraceStatus::Completed;
  std::string halt_reason;
  double halt_time = std::numeric_limits<double>::quiet_NaN();

  // Exterior monitor: at samples with H < -act_tol, grad h(tau, x) F(x) over
  // the argmin set.
  std::size_t exterior_samples = 0;
  std::size_t argmin_violations = 0;
  double worst_argmin_lie = std::numeric_limits<double>::infinity();

  double min_H() const {
    double m = std::numeric_limits<double>::infinity();
    for (double h : H_values) m = std::min(m, h);
    return m;
  }
};

struct SimOptions {
  double t_end = 10.0;
  double ctrl_dt = 0.01;
  double plant_step = 1e-3;
  double H_density = 1000.0;
  Tolerances tol;
};

/// Solves the filter every ctrl_dt and holds the input while the plant is
/// integrated. Records H at each control instant; halts on an unsolvable
/// filter or a diverging flow.
template <int N, int M>
SimulationTrace<N, M> simulate_closed_loop(const FilterSpec<N, M>& spec, const Vec<N>& x0, const SimOptions& opts) {
  if (!(opts.t_end > 0.0)) throw std::invalid_argument("simulate_closed_loop: t_end must be positive");
  if (!(opts.ctrl_dt >= opts.plant_step)) throw std::invalid_argument("simulate_closed_loop: ctrl_dt < plant step");
  SimulationTrace<N, M> tr;
  const int steps = std::max(1, static_cast<int>(std::lround(opts.t_end / opts.ctrl_dt)));
  const std::vector<double> hold_grid = {0.0, opts.ctrl_dt};
  Vec<N> x = x0;
  auto halt = [&](double t, std::string reason) {
    tr.status = TraceStatus::Halted;
    tr.halt_time = t;
    tr.halt_reason = std::move(reason);
  };
  for (int k = 0; k <= steps; ++k) {
    const double t = k * opts.ctrl_dt;
    double H;
    FilterOutput<M> out;
    ParamMinimum pm;
    try {
      pm = min_over_params(spec.fam, x, opts.H_density, opts.tol);
      H = pm.value;
      out = solve_filter(spec, x);
    } catch (const FlowDivergence& e) {
      halt(t, std::string("flow divergence: ") + e.what());
      return tr;
    } catch (const FilterEvaluationError& e) {
      halt(t, e.what());
      return tr;
    }
    tr.times.push_back(t);
    tr.states.push_back(x);
    tr.H_values.push_back(H);
    if (!out.optimal()) {
      tr.inputs.push_back(Vec<M>::Constant(std::numeric_limits<double>::quiet_NaN()));
      if (spec.optimal_decay()) tr.omegas.push_back(std::numeric_limits<double>::quiet_NaN());
      halt(t, std::string("filter ") + qp::to_string(out.status));
      return tr;
    }
    tr.inputs.push_back(out.u);
    if (spec.optimal_decay()) tr.omegas.push_back(*out.omega);

    const Vec<M> u = out.u;
    const VectorField<N> F = [&spec, u](const Vec<N>& y) -> Vec<N> { return spec.sys.rate(y, u); };
    if (H < -opts.tol.act_tol) {
      ++tr.exterior_samples;
      const Vec<N> rate = F(x);
      for (const auto& e : spec.fam.evaluate(pm.argmin.taus, x)) {
        const double lie = e.gradient.dot(rate.transpose());
        tr.worst_argmin_lie = std::min(tr.worst_argmin_lie, lie);
        if (lie < -opts.tol.lie_tol) ++tr.argmin_violations;
      }
    }
    if (k == steps) break;
    try {
      x = integrate_flow<N>(F, x, hold_grid, {opts.plant_step}).back().state;
    } catch (const FlowDivergence& e) {
      halt(t + e.time(), "flow divergence");
      return tr;
    }
  }
  return tr;
}

/// Order-preserving parallel map over [0, n). Exceptions from workers are
/// rethrown after all threads have joined.
template <class Result, class Fn>
std::vector<Result> parallel_map(std::size_t n, unsigned threads, const Fn& fn) {
  std::vector<Result> out(n);
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        out[i] = fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
  return out;
}

struct GridDef {
  double x1_lo = -1.2, x1_hi = 1.2;
  double x2_lo = -1.5, x2_hi = 1.5;
  int res_x1 = 61, res_x2 = 61;

  void validate() const {
    if (res_x1 < 2 || res_x2 < 2) throw std::invalid_argument("grid resolution must be >= 2 per axis");
    if (!(x1_lo < x1_hi) || !(x2_lo < x2_hi)) throw std::invalid_argument("grid ranges must satisfy lo < hi");
  }
  std::size_t size() const { return static_cast<std::size_t>(res_x1) * static_cast<std::size_t>(res_x2); }
  // Row-major: x2 index outer, x1 index inner.
  Vec<2> cell(std::size_t k) const {
    const auto i = static_cast<int>(k / static_cast<std::size_t>(res_x1));
    const auto j = static_cast<int>(k % static_cast<std::size_t>(res_x1));
    return {x1_lo + (x1_hi - x1_lo) * j / (res_x1 - 1), x2_lo + (x2_hi - x2_lo) * i / (res_x2 - 1)};
  }
};

struct ScanCell {
  Vec<2> x = Vec<2>::Zero();
  double H = std::numeric_limits<double>::quiet_NaN();
  Membership membership = Membership::Exterior;
  bool plain_feasible = false;
  bool od_feasible = false;
  Vec<2> F = Vec<2>::Constant(std::numeric_limits<double>::quiet_NaN());  // OD closed loop
};

struct ScanGrid {
  GridDef def;
  std::vector<ScanCell> cells;
};

/// Membership plus plain/OD feasibility per cell; F is the OD closed-loop
/// field where that filter is solvable. Both specs must share family and plan.
template <int M>
ScanGrid scan_feasibility(const FilterSpec<2, M>& plain, const FilterSpec<2, M>& od, const GridDef& def,
                          unsigned threads = 1, double H_density = 1000.0, const Tolerances& tol = {}) {
  def.validate();
  if (plain.plan.nodes != od.plan.nodes) throw std::invalid_argument("scan_feasibility: specs must share the plan");
  ScanGrid grid{def, {}};
  grid.cells = parallel_map<ScanCell>(def.size(), threads, [&](std::size_t k) {
    ScanCell c;
    c.x = def.cell(k);
    try {
      c.H = min_over_params(od.fam, c.x, H_density, tol).value;
      c.membership = classify(c.H, tol);
      const auto evals = evaluate_nodes(od, c.x);
      c.plain_feasible = solve_filter(plain, c.x, evals).optimal();
      const auto out = solve_filter(od, c.x, evals);
      c.od_feasible = out.optimal();
      if (c.od_feasible) c.F = od.sys.rate(c.x, out.u);
    } catch (const FlowDivergence&) {
    } catch (const FilterEvaluationError&) {
    }
    return c;
  });
  return grid;
}

/// Uniform rejection sampling of states with H > act_tol inside a box.
template <int N>
std::vector<Vec<N>> sample_interior(const ConstraintFamily<N>& fam, const Vec<N>& lo, const Vec<N>& hi,
                                    std::size_t n, std::uint64_t seed, double H_density = 1000.0,
                                    const Tolerances& tol = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Vec<N>> out;
  for (std::size_t attempts = 0; out.size() < n; ++attempts) {
    if (attempts > 1000 * (n + 1)) throw std::runtime_error("sample_interior: interior too small to sample");
    Vec<N> x;
    for (int i = 0; i < N; ++i) x[i] = lo[i] + unit(rng) * (hi[i] - lo[i]);
    if (min_over_params(fam, x, H_density, tol).value > tol.act_tol) out.push_back(x);
  }
  return out;
}

/// Bisection along seeded random rays from an interior anchor until
/// |H| <= act_tol. Rays that never leave the set within r_max * 16 are skipped.
template <int N>
std::vector<Vec<N>> sample_boundary(const ConstraintFamily<N>& fam, const Vec<N>& anchor, std::size_t n,
                                    std::uint64_t seed, double r_max = 2.0, double H_density = 1000.0,
                                    const Tolerances& tol = {}) {
  auto H = [&](const Vec<N>& x) { return min_over_params(fam, x, H_density, tol).value; };
  if (!(H(anchor) > tol.act_tol)) throw std::invalid_argument("sample_boundary: anchor must be interior");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01;
  std::vector<Vec<N>> out;
  for (std::size_t attempts = 0; out.size() < n && attempts < 4 * n + 16; ++attempts) {
    Vec<N> dir;
    for (int i = 0; i < N; ++i) dir[i] = n01(rng);
    dir.normalize();
    double lo = 0.0, hi = r_max;
    int grow = 0;
    while (H(anchor + hi * dir) >= 0.0 && grow < 4) {
      lo = hi;
      hi *= 2.0;
      ++grow;
    }
    if (H(anchor + hi * dir) >= 0.0) continue;
    Vec<N> found = anchor + lo * dir;
    bool ok = false;
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      const Vec<N> x = anchor + mid * dir;
      const double h = H(x);
      if (std::abs(h) <= tol.act_tol) {
        found = x;
        ok = true;
        break;
      }
      (h > 0.0 ? lo : hi) = mid;
    }
    if (ok) out.push_back(found);
  }
  return out;
}

template <int N>
using TrajectorySimulator = std::function<std::vector<double>(const Vec<N>& x0, double horizon)>;

/// H along an unfiltered flow of F, sampled every `dt`.
template <int N>
TrajectorySimulator<N> flow_simulator(const ConstraintFamily<N>& fam, VectorField<N> F, double dt = 0.01,
                                      double step = 1e-3, double H_density = 1000.0) {
  return [fam, F = std::move(F), dt, step, H_density](const Vec<N>& x0, double horizon) {
    std::vector<double> Hs;
    try {
      for (const auto& p : integrate_flow<N>(F, x0, uniform_grid(horizon, dt), {step})) {
        Hs.push_back(min_over_params(fam, p.state, H_density).value);
      }
    } catch (const FlowDivergence&) {
      Hs.push_back(-std::numeric_limits<double>::infinity());
    }
    return Hs;
  };
}

/// H along a filtered (zero-order hold) trajectory. A halted trace reports
/// -inf as its last value.
template <int N, int M>
TrajectorySimulator<N> filter_simulator(const FilterSpec<N, M>& spec, SimOptions base = {}) {
  return [spec, base](const Vec<N>& x0, double horizon) {
    SimOptions o = base;
    o.t_end = horizon;
    auto tr = simulate_closed_loop(spec, x0, o);
    if (tr.status == TraceStatus::Halted) tr.H_values.push_back(-std::numeric_limits<double>::infinity());
    return tr.H_values;
  };
}

struct InvarianceSuiteReport {
  std::size_t boundary_points = 0;
  std::size_t lie_pass = 0;
  std::size_t lie_marginal = 0;  // in [-lie_escape, -lie_tol)
  std::size_t lie_fail = 0;      // below -lie_escape
  double worst_lie = std::numeric_limits<double>::infinity();
  bool predicted_invariant = false;  // no boundary point fails
  // (a) forward simulations from boundary and interior samples
  std::size_t forward_runs = 0;
  double forward_min_H = std::numeric_limits<double>::infinity();
  std::size_t forward_halted = 0;  // runs ending in -inf (halted simulation)
  double forward_min_recorded_H = std::numeric_limits<double>::infinity();  // finite samples only
  // (b) escape confirmations from failing points
  std::size_t escape_runs = 0;
  std::size_t escapes_confirmed = 0;
  bool consistent = false;  // simulations agree with the prediction
  bool skipped = false;
};

/// Two-sided check of the boundary condition. When no boundary sample fails,
/// trajectories from the boundary (and `interior`) must keep H >= -safety_tol.
/// Points failing by more than lie_escape must see H < 0 within the horizon.
template <int N>
InvarianceSuiteReport invariance_suite(const ConstraintFamily<N>& fam, const VectorField<N>& F,
                                       const std::vector<Vec<N>>& boundary, double horizon,
                                       const TrajectorySimulator<N>& simulate,
                                       const std::vector<Vec<N>>& interior = {}, double grid_density = 1000.0,
                                       const Tolerances& tol = {}, double safety_tol = kSafetyTol,
                                       double lie_escape = kLieEscape) {
  InvarianceSuiteReport rep;
  rep.boundary_points = boundary.size();
  if (boundary.empty()) {
    rep.skipped = true;
    rep.consistent = true;
    return rep;
  }
  std::vector<Vec<N>> escaping;
  for (const auto& x : boundary) {
    const auto r = check_boundary_invariance(fam, F, x, grid_density, tol);
    const double lie = r.active_empty ? std::numeric_limits<double>::infinity() : r.min_lie;
    rep.worst_lie = std::min(rep.worst_lie, lie);
    if (lie >= -tol.lie_tol) {
      ++rep.lie_pass;
    } else if (lie >= -lie_escape) {
      ++rep.lie_marginal;
    } else {
      ++rep.lie_fail;
      escaping.push_back(x);
    }
  }
  rep.predicted_invariant = rep.lie_fail == 0;
  if (rep.predicted_invariant) {
    std::vector<Vec<N>> starts = boundary;
    starts.insert(starts.end(), interior.begin(), interior.end());
    for (const auto& x : starts) {
      ++rep.forward_runs;
      bool halted = false;
      for (double h : simulate(x, horizon)) {
        rep.forward_min_H = std::min(rep.forward_min_H, h);
        if (std::isfinite(h)) {
          rep.forward_min_recorded_H = std::min(rep.forward_min_recorded_H, h);
        } else {
          halted = true;
        }
      }
      rep.forward_halted += halted;
    }
    rep.consistent = rep.forward_min_H >= -safety_tol;
  } else {
    for (const auto& x : escaping) {
      ++rep.escape_runs;
      double m = std::numeric_limits<double>::infinity();
      for (double h : simulate(x, horizon)) m = std::min(m, h);
      if (m < 0.0) ++rep.escapes_confirmed;
    }
    rep.consistent = rep.escapes_confirmed == rep.escape_runs;
  }
  return rep;
}

}  // namespace sicbf
