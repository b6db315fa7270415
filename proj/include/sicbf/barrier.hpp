#pragma once

// Safe sets cut out by a compact family of constraints,
//
//   S = { x : h(tau, x) >= 0 for all tau in T },
//
// with T a finite union of closed intervals and isolated points. Active sets,
// well-posedness, boundary (Nagumo-type) invariance and optimal-decay
// certificates are all evaluated on parameter grids with local refinement.

#include <sicbf/dynamics.hpp>
#include <sicbf/qp.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sicbf {

/// Numerical stand-ins for the exact-zero sets of the theory.
struct Tolerances {
  double act_tol = 1e-6;     // |h| <= act_tol means h = 0
  double argmin_tol = 1e-9;  // relative, for argmin membership
  double lie_tol = 1e-8;     // Lie derivative >= -lie_tol passes
  double h_floor = 1e-9;     // theta is flagged instead of computed below this
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double length() const { return hi - lo; }
};

/// Compact parameter set: disjoint closed intervals plus isolated points.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(std::vector<Interval> intervals, std::vector<double> points)
      : intervals_(std::move(intervals)), points_(std::move(points)) {
    std::sort(intervals_.begin(), intervals_.end(), [](const Interval& a, const Interval& b) { return a.lo < b.lo; });
    std::sort(points_.begin(), points_.end());
    validate();
  }

  static ParameterSet interval(double lo, double hi) { return ParameterSet({{lo, hi}}, {}); }

  const std::vector<Interval>& intervals() const { return intervals_; }
  const std::vector<double>& points() const { return points_; }

  void validate() const {
    if (intervals_.empty() && points_.empty()) throw std::invalid_argument("ParameterSet: empty");
    for (std::size_t i = 0; i < intervals_.size(); ++i) {
      const Interval& iv = intervals_[i];
      if (!std::isfinite(iv.lo) || !std::isfinite(iv.hi) || iv.lo > iv.hi) {
        throw std::invalid_argument("ParameterSet: interval must satisfy lo <= hi and be finite");
      }
      if (i > 0 && iv.lo <= intervals_[i - 1].hi) throw std::invalid_argument("ParameterSet: overlapping intervals");
    }
    for (double p : points_) {
      if (!std::isfinite(p)) throw std::invalid_argument("ParameterSet: non-finite point");
      for (const Interval& iv : intervals_) {
        if (p >= iv.lo && p <= iv.hi) throw std::invalid_argument("ParameterSet: isolated point inside an interval");
      }
    }
  }

  bool contains(double tau, double tol = 1e-12) const {
    for (const Interval& iv : intervals_) {
      if (tau >= iv.lo - tol && tau <= iv.hi + tol) return true;
    }
    return std::any_of(points_.begin(), points_.end(), [&](double p) { return std::abs(p - tau) <= tol; });
  }

  /// Evenly spaced nodes on one interval, at least `density` per unit length,
  /// endpoints included.
  static std::vector<double> interval_grid(const Interval& iv, double density) {
    if (iv.length() == 0.0) return {iv.lo};
    const int cells = std::max(1, static_cast<int>(std::ceil(iv.length() * density - 1e-9)));
    std::vector<double> g(static_cast<std::size_t>(cells) + 1);
    for (int k = 0; k <= cells; ++k) g[static_cast<std::size_t>(k)] = iv.lo + iv.length() * k / cells;
    g.back() = iv.hi;
    return g;
  }

  /// Interval grids in ascending order followed by the isolated points.
  std::vector<double> grid(double density) const {
    if (!(density > 0.0)) throw std::invalid_argument("ParameterSet::grid: density must be positive");
    std::vector<double> out;
    for (const Interval& iv : intervals_) {
      const auto g = interval_grid(iv, density);
      out.insert(out.end(), g.begin(), g.end());
    }
    out.insert(out.end(), points_.begin(), points_.end());
    return out;
  }

 private:
  std::vector<Interval> intervals_;
  std::vector<double> points_;
};

template <int N>
struct NodeEval {
  double tau = 0.0;
  double value = 0.0;
  RowVec<N> gradient = RowVec<N>::Zero();
};

/// h(tau, x) with its state gradient. Families whose evaluation at many tau
/// shares work (flow-defined constraints) install `slice_fn` / `nodes_fn`.
template <int N>
struct ConstraintFamily {
  using State = Vec<N>;
  using Slice = std::function<double(double)>;

  ParameterSet params;
  std::function<double(double, const State&)> h;
  std::function<RowVec<N>(double, const State&)> grad;
  std::function<Slice(const State&)> slice_fn;
  std::function<std::vector<NodeEval<N>>(std::span<const double>, const State&)> nodes_fn;

  /// tau -> h(tau, x) for fixed x.
  Slice slice(const State& x) const {
    if (slice_fn) return slice_fn(x);
    return [fn = h, x](double tau) { return fn(tau, x); };
  }

  std::vector<NodeEval<N>> evaluate(std::span<const double> taus, const State& x) const {
    if (nodes_fn) return nodes_fn(taus, x);
    std::vector<NodeEval<N>> out;
    out.reserve(taus.size());
    for (double t : taus) out.push_back({t, h(t, x), grad(t, x)});
    return out;
  }
};

/// Extended class-K representatives: c s, c s^3, or a monotone table
/// (piecewise linear through (0, 0), linearly extrapolated).
class ClassKFunction {
 public:
  enum class Kind { Linear, CubicOdd, Tabulated };

  static ClassKFunction linear(double c) { return ClassKFunction(Kind::Linear, c, {}, {}); }
  static ClassKFunction cubic(double c) { return ClassKFunction(Kind::CubicOdd, c, {}, {}); }
  static ClassKFunction tabulated(std::vector<double> s, std::vector<double> values) {
    return ClassKFunction(Kind::Tabulated, 1.0, std::move(s), std::move(values));
  }

  Kind kind() const { return kind_; }
  double coefficient() const { return c_; }
  const std::vector<double>& table_s() const { return s_; }
  const std::vector<double>& table_values() const { return v_; }

  double operator()(double s) const {
    switch (kind_) {
      case Kind::Linear: return c_ * s;
      case Kind::CubicOdd: return c_ * s * s * s;
      case Kind::Tabulated: break;
    }
    const auto it = std::upper_bound(s_.begin(), s_.end(), s);
    std::size_t i = static_cast<std::size_t>(std::distance(s_.begin(), it));
    i = std::clamp<std::size_t>(i, 1, s_.size() - 1);
    const double w = (s - s_[i - 1]) / (s_[i] - s_[i - 1]);
    return v_[i - 1] + w * (v_[i] - v_[i - 1]);
  }

  /// Sampled strict monotonicity on [lo, hi].
  bool sampled_increasing(double lo, double hi, int samples = 1000) const {
    double prev = (*this)(lo);
    for (int k = 1; k <= samples; ++k) {
      const double cur = (*this)(lo + (hi - lo) * k / samples);
      if (!(cur > prev)) return false;
      prev = cur;
    }
    return true;
  }

 private:
  ClassKFunction(Kind kind, double c, std::vector<double> s, std::vector<double> v)
      : kind_(kind), c_(c), s_(std::move(s)), v_(std::move(v)) {
    if (!(c_ > 0.0) || !std::isfinite(c_)) throw std::invalid_argument("ClassKFunction: coefficient must be positive");
    if (kind_ != Kind::Tabulated) return;
    if (s_.size() != v_.size() || s_.size() < 2) throw std::invalid_argument("ClassKFunction: table needs >= 2 pairs");
    bool has_origin = false;
    for (std::size_t i = 0; i < s_.size(); ++i) {
      if (i > 0 && (!(s_[i] > s_[i - 1]) || !(v_[i] > v_[i - 1]))) {
        throw std::invalid_argument("ClassKFunction: table must be strictly increasing");
      }
      if (s_[i] == 0.0) {
        if (v_[i] != 0.0) throw std::invalid_argument("ClassKFunction: table must map 0 to 0");
        has_origin = true;
      }
    }
    if (!has_origin) throw std::invalid_argument("ClassKFunction: table must contain s = 0");
  }

  Kind kind_;
  double c_;
  std::vector<double> s_, v_;
};

enum class ActiveSetKind { Act, ActEps, ArgMin };

struct ActiveSetResult {
  ActiveSetKind kind = ActiveSetKind::ArgMin;
  double eps = 0.0;
  std::vector<double> taus;
  std::vector<double> values;
};

struct ParamMinimum {
  double value = std::numeric_limits<double>::infinity();
  ActiveSetResult argmin;
};

enum class Membership { Interior, Boundary, Exterior };

inline const char* to_string(Membership m) {
  switch (m) {
    case Membership::Interior: return "interior";
    case Membership::Boundary: return "boundary";
    case Membership::Exterior: return "exterior";
  }
  return "unknown";
}

namespace detail {

struct Sample1d {
  double tau;
  double value;
};

// Golden-section search for a local minimum of fn on [a, b].
template <class Fn>
Sample1d golden_section(const Fn& fn, double a, double b, int max_iter = 80) {
  constexpr double inv_phi = 0.6180339887498949;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = fn(c), fd = fn(d);
  for (int it = 0; it < max_iter && (b - a) > 1e-13 * (1.0 + std::abs(a) + std::abs(b)); ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = fn(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = fn(d);
    }
  }
  return fc < fd ? Sample1d{c, fc} : Sample1d{d, fd};
}

// Grid values of the slice plus, per interval, a golden-section refinement of
// the best grid cell.
template <int N>
std::vector<Sample1d> scan_parameters(const ConstraintFamily<N>& fam, const Vec<N>& x, double density,
                                      std::vector<Sample1d>* refined = nullptr) {
  const auto slice = fam.slice(x);
  std::vector<Sample1d> out;
  for (const Interval& iv : fam.params.intervals()) {
    const auto g = ParameterSet::interval_grid(iv, density);
    std::size_t best = 0;
    const std::size_t first = out.size();
    for (std::size_t k = 0; k < g.size(); ++k) {
      out.push_back({g[k], slice(g[k])});
      if (out.back().value < out[first + best].value) best = k;
    }
    if (g.size() > 1) {
      const double lo = g[best == 0 ? 0 : best - 1];
      const double hi = g[std::min(best + 1, g.size() - 1)];
      const Sample1d r = golden_section(slice, lo, hi);
      if (refined) refined->push_back(r);
      out.push_back(r);
    }
  }
  for (double p : fam.params.points()) out.push_back({p, slice(p)});
  return out;
}

inline void dedupe_sorted(std::vector<double>& taus, std::vector<double>& values) {
  std::vector<std::size_t> order(taus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return taus[a] < taus[b]; });
  std::vector<double> t2, v2;
  for (std::size_t i : order) {
    if (!t2.empty() && std::abs(taus[i] - t2.back()) <= 1e-9 * (1.0 + std::abs(taus[i]))) {
      if (values[i] < v2.back()) {
        t2.back() = taus[i];
        v2.back() = values[i];
      }
      continue;
    }
    t2.push_back(taus[i]);
    v2.push_back(values[i]);
  }
  taus = std::move(t2);
  values = std::move(v2);
}

}  // namespace detail

/// H(x) = min over T of h(., x): grid search, golden-section refinement of the
/// best cell in each interval, and the argmin set within argmin_tol.
template <int N>
ParamMinimum min_over_params(const ConstraintFamily<N>& fam, const Vec<N>& x, double grid_density = 1000.0,
                             const Tolerances& tol = {}) {
  const auto samples = detail::scan_parameters(fam, x, grid_density);
  ParamMinimum out;
  for (const auto& s : samples) out.value = std::min(out.value, s.value);
  out.argmin.kind = ActiveSetKind::ArgMin;
  out.argmin.eps = tol.argmin_tol;
  const double cutoff = out.value + tol.argmin_tol * std::max(1.0, std::abs(out.value));
  for (const auto& s : samples) {
    if (s.value <= cutoff) {
      out.argmin.taus.push_back(s.tau);
      out.argmin.values.push_back(s.value);
    }
  }
  detail::dedupe_sorted(out.argmin.taus, out.argmin.values);
  return out;
}

/// Act(x) (|h| <= act_tol) or Act_eps(x) (h <= eps) on the refined grid.
template <int N>
ActiveSetResult active_set(const ConstraintFamily<N>& fam, const Vec<N>& x, ActiveSetKind kind, double eps,
                           double grid_density = 1000.0, const Tolerances& tol = {}) {
  ActiveSetResult out;
  out.kind = kind;
  out.eps = kind == ActiveSetKind::Act ? tol.act_tol : eps;
  if (kind == ActiveSetKind::ArgMin) return min_over_params(fam, x, grid_density, tol).argmin;
  for (const auto& s : detail::scan_parameters(fam, x, grid_density)) {
    const bool in = kind == ActiveSetKind::Act ? std::abs(s.value) <= tol.act_tol : s.value <= eps;
    if (in) {
      out.taus.push_back(s.tau);
      out.values.push_back(s.value);
    }
  }
  detail::dedupe_sorted(out.taus, out.values);
  return out;
}

inline Membership classify(double H, const Tolerances& tol = {}) {
  if (H > tol.act_tol) return Membership::Interior;
  if (H < -tol.act_tol) return Membership::Exterior;
  return Membership::Boundary;
}

template <int N>
Membership membership(const ConstraintFamily<N>& fam, const Vec<N>& x, double grid_density = 1000.0,
                      const Tolerances& tol = {}) {
  return classify(min_over_params(fam, x, grid_density, tol).value, tol);
}

template <int N>
struct WellPosednessReport {
  bool feasible = false;
  Vec<N> witness = Vec<N>::Zero();
  double slack = 0.0;
  std::size_t sampled = 0;
};

/// Searches for v with |v|_inf <= 1 maximizing min_j grad h(tau_j, x) v over
/// the sampled Act_eps(x). A positive optimal slack is a common ascent direction.
template <int N>
WellPosednessReport<N> check_well_posedness(const ConstraintFamily<N>& fam, const Vec<N>& x, double eps,
                                            double grid_density = 1000.0, const Tolerances& tol = {}) {
  const ActiveSetResult act = active_set(fam, x, ActiveSetKind::ActEps, eps, grid_density, tol);
  const auto evals = fam.evaluate(act.taus, x);
  Eigen::MatrixXd A(static_cast<Eigen::Index>(evals.size()), N);
  for (std::size_t j = 0; j < evals.size(); ++j) A.row(static_cast<Eigen::Index>(j)) = -evals[j].gradient;
  const auto lp = qp::feasibility_lp(A, Eigen::VectorXd::Zero(A.rows()), Eigen::VectorXd::Constant(N, -1.0),
                                     Eigen::VectorXd::Ones(N));
  WellPosednessReport<N> out;
  out.feasible = lp.feasible;
  out.witness = lp.witness;
  out.slack = lp.slack;
  out.sampled = evals.size();
  return out;
}

struct BoundaryInvarianceReport {
  bool passed = true;
  bool active_empty = true;
  double min_lie = std::numeric_limits<double>::infinity();
  double tau_at_min = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> active_taus;
};

/// Evaluates grad h(tau, x) F(x) over the sampled Act(x); passes when the
/// minimum is >= -lie_tol.
template <int N>
BoundaryInvarianceReport check_boundary_invariance(const ConstraintFamily<N>& fam, const VectorField<N>& F,
                                                   const Vec<N>& x, double grid_density = 1000.0,
                                                   const Tolerances& tol = {}) {
  BoundaryInvarianceReport out;
  const ActiveSetResult act = active_set(fam, x, ActiveSetKind::Act, tol.act_tol, grid_density, tol);
  out.active_taus = act.taus;
  out.active_empty = act.taus.empty();
  if (out.active_empty) return out;
  const Vec<N> rate = F(x);
  for (const auto& e : fam.evaluate(act.taus, x)) {
    const double lie = e.gradient.dot(rate.transpose());
    if (lie < out.min_lie) {
      out.min_lie = lie;
      out.tau_at_min = e.tau;
    }
  }
  out.passed = out.min_lie >= -tol.lie_tol;
  return out;
}

struct OdbfReport {
  std::vector<double> taus;
  std::vector<double> theta;    // +inf where capped
  std::vector<double> residual;  // lie + theta alpha(h)
  std::vector<bool> capped;
  double max_theta = 0.0;        // over uncapped entries
  bool any_capped = false;
  std::size_t violations = 0;
  bool holds = true;
};

/// Builds theta(tau, x) = ReLU(-grad h F) / alpha(h) (zero on the active set)
/// at every grid tau and checks grad h F >= -theta alpha(h).
template <int N>
OdbfReport check_odbf_certificate(const ConstraintFamily<N>& fam, const VectorField<N>& F, const Vec<N>& x,
                                  const ClassKFunction& alpha, double grid_density = 1000.0,
                                  const Tolerances& tol = {}, double violation_tol = 1e-12) {
  const auto taus = fam.params.grid(grid_density);
  const Vec<N> rate = F(x);
  OdbfReport out;
  for (const auto& e : fam.evaluate(taus, x)) {
    const double lie = e.gradient.dot(rate.transpose());
    double theta = 0.0;
    bool capped = false;
    if (std::abs(e.value) > tol.act_tol) {
      if (e.value > 0.0 && e.value < tol.h_floor && lie < 0.0) {
        capped = true;
        theta = std::numeric_limits<double>::infinity();
      } else {
        theta = std::max(0.0, -lie) / alpha(e.value);
      }
    }
    const double residual = capped ? 0.0 : lie + theta * alpha(e.value);
    out.taus.push_back(e.tau);
    out.theta.push_back(theta);
    out.capped.push_back(capped);
    out.residual.push_back(residual);
    if (capped) {
      out.any_capped = true;
    } else {
      out.max_theta = std::max(out.max_theta, theta);
      if (residual < -violation_tol * std::max(1.0, std::abs(lie))) ++out.violations;
    }
  }
  out.holds = out.violations == 0;
  return out;
}

/// Worst relative error of grad against central differences of h in x over
/// (tau, x) samples; the denominator is max(|fd|, floor).
template <int N>
double family_gradient_error(const ConstraintFamily<N>& fam, const std::vector<std::pair<double, Vec<N>>>& samples,
                             double fd_step = 1e-5, double floor = 1e-6) {
  double worst = 0.0;
  for (const auto& [tau, x] : samples) {
    RowVec<N> fd;
    for (int j = 0; j < N; ++j) {
      Vec<N> xp = x, xm = x;
      xp[j] += fd_step;
      xm[j] -= fd_step;
      fd[j] = (fam.h(tau, xp) - fam.h(tau, xm)) / (2.0 * fd_step);
    }
    worst = std::max(worst, (fam.grad(tau, x) - fd).norm() / std::max(fd.norm(), floor));
  }
  return worst;
}

/// Largest jump of h(., x) between neighbouring grid nodes at each density in
/// `densities`; a continuous family shows a decreasing sequence.
template <int N>
std::vector<double> tau_continuity_profile(const ConstraintFamily<N>& fam, const Vec<N>& x,
                                           const std::vector<double>& densities) {
  const auto slice = fam.slice(x);
  std::vector<double> out;
  for (double d : densities) {
    double jump = 0.0;
    for (const Interval& iv : fam.params.intervals()) {
      const auto g = ParameterSet::interval_grid(iv, d);
      for (std::size_t k = 1; k < g.size(); ++k) jump = std::max(jump, std::abs(slice(g[k]) - slice(g[k - 1])));
    }
    out.push_back(jump);
  }
  return out;
}

}  // namespace sicbf
