#include "cli.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <unistd.h>

using namespace sicbf;
using sicbf::cli::Config;
using sicbf::cli::ConfigError;
using sicbf::cli::parse_config;

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string error_of(const std::string& text) {
  try {
    parse_config(text, "cfg.json");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

class CliRun : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("sicbf_cli_" + std::to_string(::getpid()) + "_" +
                                        ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& text) {
    std::ofstream(dir_ / name) << text;
    return dir_ / name;
  }

  int run(const std::string& args) {
    const std::string cmd = std::string(SICBF_CLI) + " " + args + " > " + (dir_ / "stdout.txt").string() + " 2> " +
                            (dir_ / "stderr.txt").string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  fs::path dir_;
};

}  // namespace

TEST(Config, DefaultsAreThePaperConstants) {
  const Config c = parse_config("{}");
  EXPECT_EQ(c.horizon, 2.0);
  EXPECT_EQ(c.nodes, std::optional<std::size_t>(42));
  EXPECT_EQ(c.alpha_c, 0.5);
  EXPECT_EQ(c.alpha_b, 0.5);
  EXPECT_EQ(c.k_d, 1.0);
  EXPECT_EQ(c.theta_d, 1.0);
  EXPECT_EQ(c.input_bound, 1.0);
  EXPECT_TRUE(c.optimal_decay);
  EXPECT_EQ(c.tighten, 0.0);
  EXPECT_FALSE(c.rho.has_value());
  EXPECT_EQ(c.grid.res_x1, 61);
  EXPECT_EQ(c.grid.res_x2, 61);
  EXPECT_EQ(c.t_end, 10.0);
  EXPECT_EQ(c.ctrl_dt, 0.01);
}

TEST(Config, RoundTripThroughJson) {
  const std::string text = R"({"seed": 7, "backup": {"rho": 1.1, "horizon": 1.5},
    "filter": {"mode": "plain", "tighten": "eps_star", "k_d": -0.25},
    "plan": {"eps_star": 0.3, "coarsen": 2},
    "scan": {"x1_range": [-1, 1], "resolution": [3, 4]},
    "sim": {"x0": [[0.1, 0.2], [0.3, -0.4]], "random_ics": 2}})";
  const Config a = parse_config(text);
  const auto j = cli::to_json(a);
  const Config b = parse_config(j.dump());
  EXPECT_EQ(cli::to_json(b), j);
  EXPECT_EQ(b.seed, 7u);
  EXPECT_EQ(b.rho, std::optional<double>(1.1));
  EXPECT_FALSE(b.optimal_decay);
  EXPECT_TRUE(b.tighten_eps_star);
  EXPECT_FALSE(b.nodes.has_value());
  EXPECT_EQ(b.eps_star, std::optional<double>(0.3));
  ASSERT_EQ(b.x0.size(), 2u);
  EXPECT_EQ(b.x0[1], Vec<2>(0.3, -0.4));
  EXPECT_EQ(b.grid.res_x2, 4);
}

TEST(Config, MetadataBlockIsAccepted) {
  EXPECT_NO_THROW(parse_config(R"({"format_version": 1, "resolved": {"rho": 1.0}})"));
  EXPECT_NE(error_of(R"({"format_version": 2})").find("format_version"), std::string::npos);
}

TEST(Config, UnknownKeyReportsLineAndPath) {
  const std::string msg = error_of("{\n  \"filter\": {\n    \"alpah\": 1\n  }\n}\n");
  EXPECT_NE(msg.find("cfg.json:3:"), std::string::npos) << msg;
  EXPECT_NE(msg.find("filter.alpah"), std::string::npos) << msg;
  EXPECT_NE(error_of(R"({"extra": 1})").find("unknown key"), std::string::npos);
}

TEST(Config, SyntaxErrorReportsLine) {
  const std::string msg = error_of("{\n  \"seed\": 1,\n  ,\n}\n");
  EXPECT_NE(msg.find("cfg.json:3:"), std::string::npos) << msg;
}

TEST(Config, RangeAndTypeChecks) {
  EXPECT_FALSE(error_of(R"({"filter": {"alpha_c": 0}})").empty());
  EXPECT_FALSE(error_of(R"({"filter": {"alpha_b": -1}})").empty());
  EXPECT_FALSE(error_of(R"({"filter": {"mode": "fast"}})").empty());
  EXPECT_FALSE(error_of(R"({"filter": {"tighten": -0.1}})").empty());
  EXPECT_FALSE(error_of(R"({"plan": {"nodes": 42, "eps_star": 0.1}})").empty());
  EXPECT_FALSE(error_of(R"({"plan": {"coarsen": 0.5}})").empty());
  EXPECT_FALSE(error_of(R"({"scan": {"resolution": [1, 5]}})").empty());
  EXPECT_FALSE(error_of(R"({"scan": {"x1_range": [1, -1]}})").empty());
  EXPECT_FALSE(error_of(R"({"sim": {"x0": [[0, 0, 0]]}})").empty());
  EXPECT_FALSE(error_of(R"({"sim": {"ctrl_dt": 1e-4}})").empty());
  EXPECT_FALSE(error_of(R"({"seed": -3})").empty());
  EXPECT_FALSE(error_of(R"({"system": {"name": "pendulum"}})").empty());
  EXPECT_FALSE(error_of(R"({"system": {"A": [[0, 1], [0, 0]]}})").empty());
  EXPECT_FALSE(error_of(R"({"backup": {"rho": 0}})").empty());
  EXPECT_FALSE(error_of("[1, 2]").empty());
}

TEST(Config, UnstabilizableSystemIsAConfigError) {
  const Config c = parse_config(R"({"system": {"name": "linear", "A": [[1, 0], [0, 1]], "B": [0, 1]}})");
  EXPECT_THROW(cli::build(c), ConfigError);
}

TEST(Csv, NumbersRoundTrip) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-17, 1e300}) EXPECT_EQ(std::stod(cli::fmt(v)), v);
  EXPECT_EQ(cli::fmt(std::numeric_limits<double>::quiet_NaN()), "nan");
}

TEST_F(CliRun, SmokeScanWritesFourRowsAndMeta) {
  const auto cfg = write("smoke.json", R"({"scan": {"resolution": [2, 2]}})");
  ASSERT_EQ(run("scan --config " + cfg.string() + " --out " + (dir_ / "a").string()), 0);
  const std::string csv = slurp(dir_ / "a" / "scan.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "x1,x2,membership,plain_feasible,od_feasible,Fx1,Fx2");
  const auto meta = nlohmann::json::parse(slurp(dir_ / "a" / "scan_meta.json"));
  EXPECT_EQ(meta["format_version"], 1);
  EXPECT_GT(meta["resolved"]["rho"].get<double>(), 0.0);
  EXPECT_EQ(meta["resolved"]["plan"]["nodes"].size(), 42u);
  EXPECT_FALSE(fs::exists(dir_ / "a" / "scan.csv.tmp"));
}

TEST_F(CliRun, MetaReingestionAndThreadsGiveIdenticalCsv) {
  const auto cfg = write("c.json", R"({"scan": {"resolution": [5, 4]}})");
  ASSERT_EQ(run("scan --config " + cfg.string() + " --threads 1 --out " + (dir_ / "a").string()), 0);
  ASSERT_EQ(run("scan --config " + (dir_ / "a" / "scan_meta.json").string() + " --threads 3 --out " +
                (dir_ / "b").string()),
            0);
  EXPECT_EQ(slurp(dir_ / "a" / "scan.csv"), slurp(dir_ / "b" / "scan.csv"));
  EXPECT_EQ(slurp(dir_ / "a" / "scan_meta.json"), slurp(dir_ / "b" / "scan_meta.json"));
}

TEST_F(CliRun, ConfigErrorExitsTwo) {
  const auto cfg = write("bad.json", R"({"filter": {"alpha_c": -0.5}})");
  EXPECT_EQ(run("scan --config " + cfg.string() + " --out " + dir_.string()), 2);
  EXPECT_NE(slurp(dir_ / "stderr.txt").find("alpha_c"), std::string::npos);
  EXPECT_EQ(run("scan --config " + (dir_ / "missing.json").string()), 2);
  EXPECT_EQ(run("scan --out " + dir_.string()), 2);
  EXPECT_EQ(run("launch --config " + cfg.string()), 2);
}

TEST_F(CliRun, OriginTraceHasConstantH) {
  const auto cfg = write("s.json", R"({"filter": {"k_d": 0}, "sim": {"x0": [[0, 0]], "t_end": 0.3}})");
  ASSERT_EQ(run("simulate --config " + cfg.string() + " --out " + dir_.string()), 0);
  std::istringstream csv(slurp(dir_ / "trace_0.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "t,x1,x2,u,omega,H");
  int rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    EXPECT_EQ(line.substr(line.rfind(',') + 1), "1");
  }
  EXPECT_EQ(rows, 31);
  const auto summary = nlohmann::json::parse(slurp(dir_ / "summary.json"));
  EXPECT_EQ(summary["format_version"], 1);
  EXPECT_EQ(summary["min_H"], 1.0);
  EXPECT_EQ(summary["traces"][0]["status"], "completed");
}

TEST_F(CliRun, HaltedTraceIsReported) {
  const auto cfg =
      write("s.json", R"({"filter": {"mode": "plain"}, "sim": {"x0": [[0, 0], [1.1, 1.2]], "t_end": 0.1}})");
  ASSERT_EQ(run("simulate --config " + cfg.string() + " --out " + dir_.string()), 0);
  const auto summary = nlohmann::json::parse(slurp(dir_ / "summary.json"));
  EXPECT_EQ(summary["halted"], 1);
  EXPECT_EQ(summary["completed"], 1);
  const auto& t = summary["traces"][1];
  EXPECT_EQ(t["status"], "halted");
  EXPECT_EQ(t["halt_time"], 0.0);
  EXPECT_NE(t["halt_reason"].get<std::string>().find("infeasible"), std::string::npos);
}

TEST_F(CliRun, SeedFlagSelectsRandomInitialConditions) {
  const auto cfg = write("s.json", R"({"sim": {"random_ics": 2, "t_end": 0.02}})");
  ASSERT_EQ(run("simulate --config " + cfg.string() + " --seed 5 --out " + (dir_ / "a").string()), 0);
  ASSERT_EQ(run("simulate --config " + cfg.string() + " --seed 5 --out " + (dir_ / "b").string()), 0);
  ASSERT_EQ(run("simulate --config " + cfg.string() + " --seed 6 --out " + (dir_ / "c").string()), 0);
  EXPECT_EQ(slurp(dir_ / "a" / "trace_1.csv"), slurp(dir_ / "b" / "trace_1.csv"));
  EXPECT_NE(slurp(dir_ / "a" / "trace_1.csv"), slurp(dir_ / "c" / "trace_1.csv"));
}

TEST_F(CliRun, VerifySkipsWithoutBoundarySamples) {
  const auto cfg = write("v.json", R"({"verify": {"boundary_samples": 0, "reduction_states": 1}})");
  ASSERT_EQ(run("verify --config " + cfg.string() + " --out " + dir_.string()), 0);
  const auto rep = nlohmann::json::parse(slurp(dir_ / "verify.json"));
  EXPECT_EQ(rep["format_version"], 1);
  EXPECT_EQ(rep["suites"]["invariance"]["status"], "skipped");
  EXPECT_EQ(rep["suites"]["well_posedness"]["status"], "skipped");
  EXPECT_EQ(rep["suites"]["tighten"]["status"], "pass");
  EXPECT_EQ(rep["passed"], true);
}

TEST_F(CliRun, CoarsenedPlanFailsTightenSuite) {
  const auto cfg =
      write("v.json", R"({"plan": {"coarsen": 2}, "verify": {"boundary_samples": 0, "reduction_states": 1}})");
  EXPECT_EQ(run("verify --config " + cfg.string() + " --out " + dir_.string()), 1);
  const auto rep = nlohmann::json::parse(slurp(dir_ / "verify.json"));
  EXPECT_EQ(rep["suites"]["tighten"]["status"], "fail");
  EXPECT_GT(rep["suites"]["tighten"]["tent_dense_violations"].get<int>(), 0);
  EXPECT_EQ(rep["passed"], false);
}
