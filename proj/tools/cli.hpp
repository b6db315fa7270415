#pragma once

// Config ingestion and the scan / simulate / verify commands of the sicbf CLI.

#include <sicbf/experiment.hpp>
#include <sicbf/sim.hpp>

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

namespace sicbf::cli {

using json = nlohmann::json;

constexpr int kFormatVersion = 1;

enum ExitCode { kOk = 0, kVerifyFailed = 1, kConfigError = 2, kInternalError = 3 };

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Config {
  std::uint64_t seed = 0;
  // system
  std::string system_name = "double_integrator";
  Eigen::Matrix2d A = (Eigen::Matrix2d() << 0.0, 1.0, 0.0, 0.0).finished();
  Eigen::Vector2d B = Eigen::Vector2d(0.0, 1.0);
  double input_bound = 1.0;
  // backup
  std::optional<double> rho;  // empty = calibrate
  std::optional<double> rho_hi;
  double horizon = 2.0;
  double flow_step = 1e-3;
  Eigen::Matrix2d Qw = Eigen::Matrix2d::Identity();
  double Rw = 1.0;
  // filter
  bool optimal_decay = true;
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
  Eigen::Vector2d lipschitz_lo = Eigen::Vector2d(-1.2, -1.5);
  Eigen::Vector2d lipschitz_hi = Eigen::Vector2d(1.2, 1.5);
  double coarsen = 1.0;
  // scan
  GridDef grid;
  // sim
  std::vector<Vec<2>> x0;
  std::size_t random_ics = 0;
  double t_end = 10.0;
  double ctrl_dt = 0.01;
  double plant_step = 1e-3;
  // verify
  std::size_t boundary_samples = 20;
  std::size_t interior_samples = 5;
  double verify_horizon = 3.0;
  std::size_t reduction_states = 3;
  double reduction_radius = 0.05;
  int reduction_lipschitz_samples = 200;
  int dense_factor = 20;
  double wellposed_eps = 1e-3;
};

namespace detail {

inline std::size_t line_of(const std::string& text, std::size_t offset) {
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(
                                                                     std::min(offset, text.size())), '\n'));
}

// Line of the last key of `path`, found by following the keys in textual order.
inline std::size_t locate(const std::string& text, const std::vector<std::string>& path) {
  std::size_t pos = 0;
  for (const auto& key : path) {
    const auto hit = text.find("\"" + key + "\"", pos);
    if (hit == std::string::npos) break;
    pos = hit + 1;
  }
  return pos == 0 ? 0 : line_of(text, pos - 1);
}

class Reader {
 public:
  Reader(const std::string& text, const std::string& source) : text_(text), source_(source) {}

  [[noreturn]] void fail(const std::vector<std::string>& path, const std::string& msg) const {
    std::string dotted;
    for (const auto& k : path) dotted += (dotted.empty() ? "" : ".") + k;
    const std::size_t line = locate(text_, path);
    throw ConfigError(source_ + ":" + (line ? std::to_string(line) : std::string("?")) + ": " +
                      (dotted.empty() ? "" : dotted + ": ") + msg);
  }

  const json& object(const json& j, const std::vector<std::string>& path, const std::set<std::string>& allowed) const {
    if (!j.is_object()) fail(path, "expected an object");
    for (const auto& [k, v] : j.items()) {
      if (!allowed.count(k)) {
        auto p = path;
        p.push_back(k);
        fail(p, "unknown key");
      }
    }
    return j;
  }

  double number(const json& j, const std::vector<std::string>& path) const {
    if (!j.is_number()) fail(path, "expected a number");
    const double v = j.get<double>();
    if (!std::isfinite(v)) fail(path, "must be finite");
    return v;
  }

  double positive(const json& j, const std::vector<std::string>& path) const {
    const double v = number(j, path);
    if (!(v > 0.0)) fail(path, "must be > 0");
    return v;
  }

  double nonnegative(const json& j, const std::vector<std::string>& path) const {
    const double v = number(j, path);
    if (!(v >= 0.0)) fail(path, "must be >= 0");
    return v;
  }

  std::uint64_t count(const json& j, const std::vector<std::string>& path) const {
    if (!j.is_number_integer() || j.get<long long>() < 0) fail(path, "expected a nonnegative integer");
    return j.get<std::uint64_t>();
  }

  std::vector<double> vector(const json& j, const std::vector<std::string>& path, std::size_t n) const {
    if (!j.is_array() || j.size() != n) fail(path, "expected an array of " + std::to_string(n) + " numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < n; ++i) {
      auto p = path;
      p.push_back(std::to_string(i));
      out.push_back(number(j[i], p));
    }
    return out;
  }

  Eigen::Matrix2d matrix2(const json& j, const std::vector<std::string>& path) const {
    if (!j.is_array() || j.size() != 2) fail(path, "expected a 2x2 array");
    Eigen::Matrix2d m;
    for (int r = 0; r < 2; ++r) {
      const auto row = vector(j[static_cast<std::size_t>(r)], path, 2);
      m(r, 0) = row[0];
      m(r, 1) = row[1];
    }
    return m;
  }

  std::pair<double, double> range(const json& j, const std::vector<std::string>& path) const {
    const auto v = vector(j, path, 2);
    if (!(v[0] < v[1])) fail(path, "range must satisfy lo < hi");
    return {v[0], v[1]};
  }

 private:
  const std::string& text_;
  std::string source_;
};

inline json matrix_json(const Eigen::Matrix2d& m) { return json::array({{m(0, 0), m(0, 1)}, {m(1, 0), m(1, 1)}}); }

}  // namespace detail

/// Parses and validates a config document. Unknown keys, type errors and
/// out-of-range values raise ConfigError with "source:line: path: message".
inline Config parse_config(const std::string& text, const std::string& source = "config") {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ":" + std::to_string(detail::line_of(text, e.byte == 0 ? 0 : e.byte - 1)) +
                      ": invalid JSON: " + e.what());
  }
  const detail::Reader rd(text, source);
  Config c;
  rd.object(root, {}, {"format_version", "seed", "system", "backup", "filter", "plan", "scan", "sim", "verify",
                       "resolved"});
  if (root.contains("format_version") && root["format_version"] != kFormatVersion) {
    rd.fail({"format_version"}, "unsupported version (expected " + std::to_string(kFormatVersion) + ")");
  }
  if (root.contains("seed")) c.seed = rd.count(root["seed"], {"seed"});

  if (root.contains("system")) {
    const auto& s = rd.object(root["system"], {"system"}, {"name", "A", "B", "input_bound"});
    if (s.contains("name")) {
      if (!s["name"].is_string()) rd.fail({"system", "name"}, "expected a string");
      c.system_name = s["name"].get<std::string>();
      if (c.system_name != "double_integrator" && c.system_name != "linear") {
        rd.fail({"system", "name"}, "unknown system (double_integrator | linear)");
      }
    }
    if (c.system_name == "linear") {
      if (!s.contains("A") || !s.contains("B")) rd.fail({"system"}, "linear system needs A and B");
      c.A = rd.matrix2(s["A"], {"system", "A"});
      const auto b = rd.vector(s["B"], {"system", "B"}, 2);
      c.B = Eigen::Vector2d(b[0], b[1]);
    } else if (s.contains("A") || s.contains("B")) {
      rd.fail({"system"}, "A and B are only accepted with name \"linear\"");
    }
    if (s.contains("input_bound")) c.input_bound = rd.positive(s["input_bound"], {"system", "input_bound"});
  }

  if (root.contains("backup")) {
    const auto& b = rd.object(root["backup"], {"backup"}, {"rho", "rho_hi", "horizon", "flow_step", "Q", "R"});
    if (b.contains("rho")) {
      if (b["rho"] == "auto") {
        c.rho.reset();
      } else {
        c.rho = rd.positive(b["rho"], {"backup", "rho"});
      }
    }
    if (b.contains("rho_hi")) c.rho_hi = rd.positive(b["rho_hi"], {"backup", "rho_hi"});
    if (b.contains("horizon")) c.horizon = rd.positive(b["horizon"], {"backup", "horizon"});
    if (b.contains("flow_step")) c.flow_step = rd.positive(b["flow_step"], {"backup", "flow_step"});
    if (b.contains("Q")) c.Qw = rd.matrix2(b["Q"], {"backup", "Q"});
    if (b.contains("R")) c.Rw = rd.positive(b["R"], {"backup", "R"});
  }

  if (root.contains("filter")) {
    const auto& f =
        rd.object(root["filter"], {"filter"}, {"mode", "alpha_c", "alpha_b", "k_d", "theta_d", "p", "tighten"});
    if (f.contains("mode")) {
      if (f["mode"] == "optimal_decay") {
        c.optimal_decay = true;
      } else if (f["mode"] == "plain") {
        c.optimal_decay = false;
      } else {
        rd.fail({"filter", "mode"}, "expected \"optimal_decay\" or \"plain\"");
      }
    }
    if (f.contains("alpha_c")) c.alpha_c = rd.positive(f["alpha_c"], {"filter", "alpha_c"});
    if (f.contains("alpha_b")) c.alpha_b = rd.positive(f["alpha_b"], {"filter", "alpha_b"});
    if (f.contains("k_d")) c.k_d = rd.number(f["k_d"], {"filter", "k_d"});
    if (f.contains("theta_d")) c.theta_d = rd.nonnegative(f["theta_d"], {"filter", "theta_d"});
    if (f.contains("p")) c.p = rd.positive(f["p"], {"filter", "p"});
    if (f.contains("tighten")) {
      if (f["tighten"] == "eps_star") {
        c.tighten_eps_star = true;
      } else {
        c.tighten_eps_star = false;
        c.tighten = rd.nonnegative(f["tighten"], {"filter", "tighten"});
      }
    }
  }

  if (root.contains("plan")) {
    const auto& p = rd.object(root["plan"], {"plan"}, {"nodes", "eps_star", "M_star", "lipschitz_samples",
                                                       "lipschitz_seed", "lipschitz_box", "coarsen"});
    if (p.contains("nodes") && p.contains("eps_star")) rd.fail({"plan", "eps_star"}, "give either nodes or eps_star");
    if (p.contains("nodes")) {
      c.nodes = rd.count(p["nodes"], {"plan", "nodes"});
      c.eps_star.reset();
    }
    if (p.contains("eps_star")) {
      c.eps_star = rd.positive(p["eps_star"], {"plan", "eps_star"});
      c.nodes.reset();
    }
    if (p.contains("M_star")) c.M_star = rd.positive(p["M_star"], {"plan", "M_star"});
    if (p.contains("lipschitz_samples")) {
      c.lipschitz_samples = static_cast<int>(rd.count(p["lipschitz_samples"], {"plan", "lipschitz_samples"}));
      if (c.lipschitz_samples < 2) rd.fail({"plan", "lipschitz_samples"}, "must be >= 2");
    }
    if (p.contains("lipschitz_seed")) c.lipschitz_seed = rd.count(p["lipschitz_seed"], {"plan", "lipschitz_seed"});
    if (p.contains("lipschitz_box")) {
      const auto& box = p["lipschitz_box"];
      if (!box.is_array() || box.size() != 2) rd.fail({"plan", "lipschitz_box"}, "expected [[x1lo, x1hi], [x2lo, x2hi]]");
      const auto r1 = rd.range(box[0], {"plan", "lipschitz_box"});
      const auto r2 = rd.range(box[1], {"plan", "lipschitz_box"});
      c.lipschitz_lo = Eigen::Vector2d(r1.first, r2.first);
      c.lipschitz_hi = Eigen::Vector2d(r1.second, r2.second);
    }
    if (p.contains("coarsen")) {
      c.coarsen = rd.number(p["coarsen"], {"plan", "coarsen"});
      if (!(c.coarsen >= 1.0)) rd.fail({"plan", "coarsen"}, "must be >= 1");
    }
  }

  if (root.contains("scan")) {
    const auto& s = rd.object(root["scan"], {"scan"}, {"x1_range", "x2_range", "resolution"});
    if (s.contains("x1_range")) std::tie(c.grid.x1_lo, c.grid.x1_hi) = rd.range(s["x1_range"], {"scan", "x1_range"});
    if (s.contains("x2_range")) std::tie(c.grid.x2_lo, c.grid.x2_hi) = rd.range(s["x2_range"], {"scan", "x2_range"});
    if (s.contains("resolution")) {
      const auto& r = s["resolution"];
      if (!r.is_array() || r.size() != 2) rd.fail({"scan", "resolution"}, "expected [n_x1, n_x2]");
      c.grid.res_x1 = static_cast<int>(rd.count(r[0], {"scan", "resolution"}));
      c.grid.res_x2 = static_cast<int>(rd.count(r[1], {"scan", "resolution"}));
      if (c.grid.res_x1 < 2 || c.grid.res_x2 < 2) rd.fail({"scan", "resolution"}, "must be >= 2 per axis");
    }
  }

  if (root.contains("sim")) {
    const auto& s = rd.object(root["sim"], {"sim"}, {"x0", "random_ics", "t_end", "ctrl_dt", "plant_step"});
    if (s.contains("x0")) {
      if (!s["x0"].is_array()) rd.fail({"sim", "x0"}, "expected a list of [x1, x2]");
      for (const auto& x : s["x0"]) {
        const auto v = rd.vector(x, {"sim", "x0"}, 2);
        c.x0.emplace_back(v[0], v[1]);
      }
    }
    if (s.contains("random_ics")) c.random_ics = rd.count(s["random_ics"], {"sim", "random_ics"});
    if (s.contains("t_end")) c.t_end = rd.positive(s["t_end"], {"sim", "t_end"});
    if (s.contains("ctrl_dt")) c.ctrl_dt = rd.positive(s["ctrl_dt"], {"sim", "ctrl_dt"});
    if (s.contains("plant_step")) c.plant_step = rd.positive(s["plant_step"], {"sim", "plant_step"});
    if (c.ctrl_dt < c.plant_step) rd.fail({"sim", "ctrl_dt"}, "must be >= plant_step");
  }

  if (root.contains("verify")) {
    const auto& v = rd.object(root["verify"], {"verify"},
                              {"boundary_samples", "interior_samples", "horizon", "reduction_states",
                               "reduction_radius", "reduction_lipschitz_samples", "dense_factor", "wellposed_eps"});
    if (v.contains("boundary_samples")) c.boundary_samples = rd.count(v["boundary_samples"], {"verify", "boundary_samples"});
    if (v.contains("interior_samples")) c.interior_samples = rd.count(v["interior_samples"], {"verify", "interior_samples"});
    if (v.contains("horizon")) c.verify_horizon = rd.positive(v["horizon"], {"verify", "horizon"});
    if (v.contains("reduction_states")) c.reduction_states = rd.count(v["reduction_states"], {"verify", "reduction_states"});
    if (v.contains("reduction_radius")) c.reduction_radius = rd.positive(v["reduction_radius"], {"verify", "reduction_radius"});
    if (v.contains("reduction_lipschitz_samples")) {
      c.reduction_lipschitz_samples =
          static_cast<int>(rd.count(v["reduction_lipschitz_samples"], {"verify", "reduction_lipschitz_samples"}));
      if (c.reduction_lipschitz_samples < 2) rd.fail({"verify", "reduction_lipschitz_samples"}, "must be >= 2");
    }
    if (v.contains("dense_factor")) {
      c.dense_factor = static_cast<int>(rd.count(v["dense_factor"], {"verify", "dense_factor"}));
      if (c.dense_factor < 1) rd.fail({"verify", "dense_factor"}, "must be >= 1");
    }
    if (v.contains("wellposed_eps")) c.wellposed_eps = rd.positive(v["wellposed_eps"], {"verify", "wellposed_eps"});
  }
  return c;
}

inline Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open config");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

/// Fully explicit config document; parse_config(to_json(c)) == c.
inline json to_json(const Config& c) {
  json j;
  j["format_version"] = kFormatVersion;
  j["seed"] = c.seed;
  j["system"]["name"] = c.system_name;
  if (c.system_name == "linear") {
    j["system"]["A"] = detail::matrix_json(c.A);
    j["system"]["B"] = {c.B[0], c.B[1]};
  }
  j["system"]["input_bound"] = c.input_bound;
  j["backup"]["rho"] = c.rho ? json(*c.rho) : json("auto");
  if (c.rho_hi) j["backup"]["rho_hi"] = *c.rho_hi;
  j["backup"]["horizon"] = c.horizon;
  j["backup"]["flow_step"] = c.flow_step;
  j["backup"]["Q"] = detail::matrix_json(c.Qw);
  j["backup"]["R"] = c.Rw;
  j["filter"] = {{"mode", c.optimal_decay ? "optimal_decay" : "plain"},
                 {"alpha_c", c.alpha_c},
                 {"alpha_b", c.alpha_b},
                 {"k_d", c.k_d},
                 {"theta_d", c.theta_d},
                 {"p", c.p},
                 {"tighten", c.tighten_eps_star ? json("eps_star") : json(c.tighten)}};
  if (c.nodes) j["plan"]["nodes"] = *c.nodes;
  if (c.eps_star) j["plan"]["eps_star"] = *c.eps_star;
  j["plan"]["M_star"] = c.M_star;
  j["plan"]["lipschitz_samples"] = c.lipschitz_samples;
  j["plan"]["lipschitz_seed"] = c.lipschitz_seed;
  j["plan"]["lipschitz_box"] = {{c.lipschitz_lo[0], c.lipschitz_hi[0]}, {c.lipschitz_lo[1], c.lipschitz_hi[1]}};
  j["plan"]["coarsen"] = c.coarsen;
  j["scan"] = {{"x1_range", {c.grid.x1_lo, c.grid.x1_hi}},
               {"x2_range", {c.grid.x2_lo, c.grid.x2_hi}},
               {"resolution", {c.grid.res_x1, c.grid.res_x2}}};
  json x0 = json::array();
  for (const auto& x : c.x0) x0.push_back({x[0], x[1]});
  j["sim"] = {{"x0", x0}, {"random_ics", c.random_ics}, {"t_end", c.t_end}, {"ctrl_dt", c.ctrl_dt},
              {"plant_step", c.plant_step}};
  j["verify"] = {{"boundary_samples", c.boundary_samples},
                 {"interior_samples", c.interior_samples},
                 {"horizon", c.verify_horizon},
                 {"reduction_states", c.reduction_states},
                 {"reduction_radius", c.reduction_radius},
                 {"reduction_lipschitz_samples", c.reduction_lipschitz_samples},
                 {"dense_factor", c.dense_factor},
                 {"wellposed_eps", c.wellposed_eps}};
  return j;
}

inline ExperimentSettings settings_from(const Config& c) {
  ExperimentSettings s;
  s.rho = c.rho.value_or(0.0);
  s.rho_hi = c.rho_hi.value_or(0.0);
  s.horizon = c.horizon;
  s.flow_step = c.flow_step;
  s.design.A = c.A;
  s.design.B = c.B;
  s.design.Qw = c.Qw;
  s.design.Rw = c.Rw;
  s.design.input_bound = c.input_bound;
  s.alpha_c = c.alpha_c;
  s.alpha_b = c.alpha_b;
  s.k_d = c.k_d;
  s.theta_d = c.theta_d;
  s.p = c.p;
  s.tighten_eps_star = c.tighten_eps_star;
  s.tighten = c.tighten;
  s.nodes = c.nodes;
  s.eps_star = c.eps_star;
  s.M_star = c.M_star;
  s.lipschitz_samples = c.lipschitz_samples;
  s.lipschitz_seed = c.lipschitz_seed;
  s.lipschitz_box = StateBox{c.lipschitz_lo, c.lipschitz_hi};
  return s;
}

/// Builds the experiment; bad design data (non-stabilizable system, backup
/// set not nested) is reported as a config error.
inline Experiment build(const Config& c) {
  try {
    Experiment e = build_experiment(settings_from(c));
    if (c.coarsen > 1.0) {
      const auto plan = coarsened(e.od.plan, e.od.fam.params, c.coarsen);
      e.od.plan = plan;
      e.plain.plan = plan;
    }
    return e;
  } catch (const LqrError& e) {
    throw ConfigError(std::string("backup design: ") + e.what());
  } catch (const BackupSpecError& e) {
    throw ConfigError(std::string("backup design: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("experiment: ") + e.what());
  }
}

inline json resolved_json(const Experiment& e) {
  const auto& plan = e.plan();
  return {{"rho", e.backup.rho},
          {"P", detail::matrix_json(e.backup.design.P)},
          {"K", {e.backup.design.K[0], e.backup.design.K[1]}},
          {"plan",
           {{"nodes", plan.nodes},
            {"delta", plan.delta},
            {"eps_star", plan.eps_star},
            {"M_star", plan.M_star},
            {"L_a", plan.L_a},
            {"L_b", plan.L_b}}},
          {"tolerances",
           {{"act_tol", Tolerances{}.act_tol},
            {"lie_tol", Tolerances{}.lie_tol},
            {"feas_tol", qp::QpSettings{}.feas_tol},
            {"safety_tol", kSafetyTol},
            {"lie_escape", kLieEscape}}}};
}

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Writes via a sibling temp file and rename.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << content;
    out.flush();
    if (!out) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string scan_csv(const ScanGrid& g) {
  std::string out = "x1,x2,membership,plain_feasible,od_feasible,Fx1,Fx2\n";
  for (const auto& c : g.cells) {
    out += fmt(c.x[0]) + "," + fmt(c.x[1]) + "," + to_string(c.membership) + "," + (c.plain_feasible ? "1" : "0") +
           "," + (c.od_feasible ? "1" : "0") + "," + fmt(c.F[0]) + "," + fmt(c.F[1]) + "\n";
  }
  return out;
}

inline std::string trace_csv(const SimulationTrace<2, 1>& tr) {
  std::string out = "t,x1,x2,u,omega,H\n";
  for (std::size_t k = 0; k < tr.times.size(); ++k) {
    const double w = k < tr.omegas.size() ? tr.omegas[k] : std::numeric_limits<double>::quiet_NaN();
    out += fmt(tr.times[k]) + "," + fmt(tr.states[k][0]) + "," + fmt(tr.states[k][1]) + "," + fmt(tr.inputs[k][0]) +
           "," + fmt(w) + "," + fmt(tr.H_values[k]) + "\n";
  }
  return out;
}

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline int cmd_scan(const Config& c, const std::filesystem::path& out, unsigned threads) {
  const Experiment e = build(c);
  const ScanGrid g = scan_feasibility(e.plain, e.od, c.grid, threads);
  std::size_t interior = 0, plain_bad = 0, od_bad = 0;
  for (const auto& cell : g.cells) {
    if (cell.membership != Membership::Interior) continue;
    ++interior;
    plain_bad += !cell.plain_feasible;
    od_bad += !cell.od_feasible;
  }
  json meta = to_json(c);
  meta["resolved"] = resolved_json(e);
  meta["resolved"]["scan_counts"] = {{"cells", g.cells.size()},
                                     {"interior", interior},
                                     {"interior_plain_infeasible", plain_bad},
                                     {"interior_od_infeasible", od_bad}};
  std::filesystem::create_directories(out);
  write_atomic(out / "scan.csv", scan_csv(g));
  write_atomic(out / "scan_meta.json", meta.dump(2) + "\n");
  return kOk;
}

inline std::vector<Vec<2>> initial_conditions(const Config& c, const Experiment& e) {
  std::vector<Vec<2>> ics = c.x0;
  if (c.random_ics > 0) {
    const auto more = sample_interior<2>(e.family(), Vec<2>(c.grid.x1_lo, c.grid.x2_lo),
                                         Vec<2>(c.grid.x1_hi, c.grid.x2_hi), c.random_ics, c.seed);
    ics.insert(ics.end(), more.begin(), more.end());
  }
  return ics;
}

inline SimOptions sim_options(const Config& c) {
  SimOptions o;
  o.t_end = c.t_end;
  o.ctrl_dt = c.ctrl_dt;
  o.plant_step = c.plant_step;
  return o;
}

inline int cmd_simulate(const Config& c, const std::filesystem::path& out, unsigned threads) {
  const Experiment e = build(c);
  const auto ics = initial_conditions(c, e);
  if (ics.empty()) throw ConfigError("sim: no initial conditions (set sim.x0 or sim.random_ics)");
  const auto& spec = c.optimal_decay ? e.od : e.plain;
  const SimOptions opts = sim_options(c);
  const auto traces = parallel_map<SimulationTrace<2, 1>>(
      ics.size(), threads, [&](std::size_t i) { return simulate_closed_loop(spec, ics[i], opts); });

  std::filesystem::create_directories(out);
  json list = json::array();
  double min_H = std::numeric_limits<double>::infinity();
  std::size_t halted = 0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& tr = traces[i];
    write_atomic(out / ("trace_" + std::to_string(i) + ".csv"), trace_csv(tr));
    json t = {{"index", i},
              {"x0", {ics[i][0], ics[i][1]}},
              {"status", to_string(tr.status)},
              {"min_H", finite_or_null(tr.min_H())},
              {"samples", tr.times.size()}};
    if (tr.status == TraceStatus::Halted) {
      ++halted;
      t["halt_reason"] = tr.halt_reason;
      t["halt_time"] = tr.halt_time;
    }
    min_H = std::min(min_H, tr.min_H());
    list.push_back(t);
  }
  json summary = {{"format_version", kFormatVersion},
                  {"mode", c.optimal_decay ? "optimal_decay" : "plain"},
                  {"traces", list},
                  {"min_H", finite_or_null(min_H)},
                  {"safety_tol", kSafetyTol},
                  {"completed", traces.size() - halted},
                  {"halted", halted}};
  write_atomic(out / "summary.json", summary.dump(2) + "\n");
  return kOk;
}

struct VerifyResult {
  json report;
  bool passed = false;
};

inline VerifyResult run_verify(const Config& c) {
  const Experiment e = build(c);
  const auto& fam = e.family();
  const FilterSpec<2, 1> od = e.od;
  const Vec<2> anchor = Vec<2>::Zero();
  const auto boundary = sample_boundary<2>(fam, anchor, c.boundary_samples, c.seed);
  const auto interior = sample_interior<2>(fam, Vec<2>(c.grid.x1_lo, c.grid.x2_lo), Vec<2>(c.grid.x1_hi, c.grid.x2_hi),
                                           std::max(c.interior_samples, c.reduction_states), c.seed + 1);
  json suites;
  bool ok = true;

  // invariance: boundary condition under the OD closed loop, checked both ways
  {
    const VectorField<2> F = [od](const Vec<2>& x) -> Vec<2> {
      const auto out = solve_filter(od, x);
      if (!out.optimal()) return Vec<2>::Constant(std::numeric_limits<double>::quiet_NaN());
      return od.sys.rate(x, out.u);
    };
    SimOptions so = sim_options(c);
    const std::vector<Vec<2>> fwd(interior.begin(), interior.begin() + static_cast<std::ptrdiff_t>(c.interior_samples));
    const auto rep = invariance_suite<2>(fam, F, boundary, c.verify_horizon, filter_simulator(od, so), fwd);
    const bool pass = rep.skipped || rep.consistent;
    ok = ok && pass;
    suites["invariance"] = {{"status", rep.skipped ? "skipped" : (pass ? "pass" : "fail")},
                            {"boundary_points", rep.boundary_points},
                            {"lie_pass", rep.lie_pass},
                            {"lie_marginal", rep.lie_marginal},
                            {"lie_fail", rep.lie_fail},
                            {"worst_lie", finite_or_null(rep.worst_lie)},
                            {"predicted_invariant", rep.predicted_invariant},
                            {"forward_runs", rep.forward_runs},
                            {"forward_min_H", finite_or_null(rep.forward_min_H)},
                            {"forward_halted", rep.forward_halted},
                            {"forward_min_recorded_H", finite_or_null(rep.forward_min_recorded_H)},
                            {"escape_runs", rep.escape_runs},
                            {"escapes_confirmed", rep.escapes_confirmed}};
  }

  // tighten: reduction at sampled states with localized plans, plus the tent
  // adversary against the plan's own margin
  {
    const std::vector<Vec<2>> states(interior.begin(),
                                     interior.begin() + static_cast<std::ptrdiff_t>(c.reduction_states));
    const auto red = reduction_check(od, states, c.reduction_radius, c.reduction_lipschitz_samples, c.dense_factor,
                                     c.seed);
    const auto& plan = od.plan;
    const int dim = od.decision_dim();
    Eigen::VectorXd nu_adv = Eigen::VectorXd::Zero(dim);
    nu_adv[0] = plan.M_star;
    const auto tent = tighten_and_check(plan, fam.params, tent_function(plan), tent_row(plan, dim),
                                        [nu_adv](const Eigen::VectorXd&) { return nu_adv; },
                                        {Eigen::VectorXd::Zero(2)}, c.dense_factor, 1e-9);
    const bool vacuous = !states.empty() && red.tighten.states_with_premises == 0;
    const bool pass = red.tighten.sound() && tent.sound() && !vacuous;
    ok = ok && pass;
    const auto dense = dense_grid(plan, fam.params, c.dense_factor);
    suites["tighten"] = {{"status", pass ? "pass" : "fail"},
                         {"states", states.size()},
                         {"states_with_premises", red.tighten.states_with_premises},
                         {"infeasible", red.infeasible},
                         {"local_eps_star", red.eps_star},
                         {"norm_failures", red.tighten.norm_failures.size()},
                         {"node_failures", red.tighten.node_failures.size()},
                         {"dense_violations", red.tighten.dense_violations.size()},
                         {"worst_dense", finite_or_null(red.tighten.worst_dense)},
                         {"tent_dense_violations", tent.dense_violations.size()},
                         {"tent_worst_dense", finite_or_null(tent.worst_dense)},
                         {"covering_radius", covering_radius(plan, dense)},
                         {"delta", plan.delta},
                         {"coarsen", c.coarsen}};
  }

  // well-posedness at the boundary samples
  {
    std::size_t feasible = 0;
    double worst = std::numeric_limits<double>::infinity();
    for (const auto& x : boundary) {
      const auto w = check_well_posedness(fam, x, c.wellposed_eps);
      feasible += w.feasible;
      worst = std::min(worst, w.slack);
    }
    const bool skipped = boundary.empty();
    const bool pass = skipped || feasible == boundary.size();
    ok = ok && pass;
    suites["well_posedness"] = {{"status", skipped ? "skipped" : (pass ? "pass" : "fail")},
                                {"points", boundary.size()},
                                {"feasible", feasible},
                                {"worst_slack", finite_or_null(worst)}};
  }

  VerifyResult r;
  r.passed = ok;
  r.report = {{"format_version", kFormatVersion}, {"passed", ok}, {"suites", suites}};
  return r;
}

inline int cmd_verify(const Config& c, const std::filesystem::path& out) {
  const auto r = run_verify(c);
  std::filesystem::create_directories(out);
  write_atomic(out / "verify.json", r.report.dump(2) + "\n");
  return r.passed ? kOk : kVerifyFailed;
}

}  // namespace sicbf::cli
