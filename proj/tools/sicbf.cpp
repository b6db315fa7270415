#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <thread>

namespace {

unsigned resolve_threads(int flag) {
  if (flag > 0) return static_cast<unsigned>(flag);
  if (const char* env = std::getenv("SICBF_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
    std::cerr << "sicbf: ignoring invalid SICBF_THREADS=" << env << "\n";
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

}  // namespace

int main(int argc, char** argv) {
  namespace cli = sicbf::cli;
  CLI::App app{"Safety filtering with infinitely many parametric constraints"};
  app.require_subcommand(1);
  std::string config_path, out_dir = ".";
  int threads = 0;
  std::optional<std::uint64_t> seed;
  for (auto* sub : {app.add_subcommand("scan", "feasibility / vector-field scan (scan.csv, scan_meta.json)"),
                    app.add_subcommand("simulate", "closed-loop traces (trace_<i>.csv, summary.json)"),
                    app.add_subcommand("verify", "invariance, tightening and well-posedness suites (verify.json)")}) {
    sub->add_option("--config", config_path, "JSON config")->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--threads", threads, "worker threads (fallback: SICBF_THREADS)");
    sub->add_option("--seed", seed, "overrides the config seed");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cli::kOk : cli::kConfigError;
  }
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    cli::Config cfg = cli::load_config(config_path);
    if (seed) cfg.seed = *seed;
    const unsigned n = resolve_threads(threads);
    if (cmd == "scan") return cli::cmd_scan(cfg, out_dir, n);
    if (cmd == "simulate") return cli::cmd_simulate(cfg, out_dir, n);
    return cli::cmd_verify(cfg, out_dir);
  } catch (const cli::ConfigError& e) {
    std::cerr << "sicbf: config error: " << e.what() << "\n";
    return cli::kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "sicbf: internal error: " << e.what() << "\n";
    return cli::kInternalError;
  }
}
