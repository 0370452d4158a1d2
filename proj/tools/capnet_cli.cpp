// Scenario runner CLI: builds the configured topology, runs its measurement
// legs and writes CSV/JSON reports. Exit status is nonzero when an assertion
// embedded in the config's [assert] section fails.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "capnet/harness.hpp"

namespace {

using namespace capnet;

struct CommonFlags {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> profile;
};

ScenarioConfig load_config(const CommonFlags& flags) {
  ScenarioConfig cfg = parse_config_file(flags.config_path);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.out_dir) cfg.out.dir = *flags.out_dir;
  if (flags.profile) {
    if (*flags.profile == "ci") cfg.profile = Profile::ci;
    else if (*flags.profile == "full") cfg.profile = Profile::full;
    else throw std::runtime_error("profile must be ci or full");
  }
  return cfg;
}

void print_bandwidth(const RunReport& report) {
  for (const auto& leg : report.bandwidth_legs) {
    std::printf("  bw %-14s server %8.1f Mbit/s (eff %5.1f%%)%s  client %8.1f Mbit/s\n",
                leg.name.c_str(), leg.server.achieved_mbps,
                leg.server.efficiency() * 100.0,
                leg.server.partial ? " [partial]" : "",
                leg.client.achieved_mbps);
  }
  for (const auto& leg : report.latency_legs) {
    std::printf(
        "  lat %-13s median %8.0f ns  p25 %8.0f  p75 %8.0f  mean %8.0f  "
        "removed %llu/%llu%s\n",
        leg.name.c_str(), leg.report.median_ns, leg.report.p25_ns,
        leg.report.p75_ns, leg.report.mean_ns,
        static_cast<unsigned long long>(leg.report.removed_count),
        static_cast<unsigned long long>(leg.report.raw_count),
        leg.report.degenerate_box ? " [degenerate box]" : "");
  }
  for (const auto& f : report.faults) {
    std::printf("  fault: %s\n", fault_record_to_json(f).c_str());
  }
  for (const auto& e : report.errors) {
    std::printf("  error: %s\n", e.c_str());
  }
}

int finish(const ScenarioConfig& cfg, std::vector<RunReport> runs) {
  for (auto& report : runs) {
    report.assert_failures = evaluate_asserts(cfg, runs);
    break;  // assertions are global over the run set; store once
  }
  std::vector<std::string> failures = evaluate_asserts(cfg, runs);
  for (const auto& report : runs) {
    std::printf("%s%s\n", report.scenario.c_str(),
                report.complete() ? "" : " [INCOMPLETE]");
    print_bandwidth(report);
    write_report_files(report, cfg.out);
  }
  if (!failures.empty()) {
    std::printf("embedded assertions FAILED:\n");
    for (const auto& f : failures) std::printf("  %s\n", f.c_str());
    return 1;
  }
  bool any_error = false;
  for (const auto& report : runs) {
    any_error = any_error || !report.errors.empty() || !report.complete();
  }
  return any_error ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capability-compartmentalized network stack scenario runner"};
  app.require_subcommand(1);

  CommonFlags flags;

  auto add_common = [&](CLI::App* cmd, bool needs_config = true) {
    if (needs_config) {
      cmd->add_option("config", flags.config_path, "scenario config file")
          ->required();
    }
    cmd->add_option("--seed", flags.seed, "override config seed");
    cmd->add_option("--out", flags.out_dir, "override output directory");
    cmd->add_option("--profile", flags.profile, "ci or full");
  };

  CLI::App* run_cmd = app.add_subcommand("run", "run one scenario");
  add_common(run_cmd);
  CLI::App* matrix_cmd =
      app.add_subcommand("matrix", "run every scenario in order");
  add_common(matrix_cmd);
  CLI::App* fault_cmd = app.add_subcommand(
      "fault-demo", "containment demonstration: clean pass, then injection");
  add_common(fault_cmd);
  std::string report_dir;
  CLI::App* report_cmd = app.add_subcommand(
      "report", "re-summarize raw nanosecond dumps in a directory");
  report_cmd->add_option("dir", report_dir, "directory of .ns files")
      ->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run_cmd->parsed()) {
      ScenarioConfig cfg = load_config(flags);
      return finish(cfg, {run_scenario(cfg)});
    }
    if (matrix_cmd->parsed()) {
      ScenarioConfig cfg = load_config(flags);
      return finish(cfg, run_matrix(cfg));
    }
    if (fault_cmd->parsed()) {
      ScenarioConfig cfg = load_config(flags);
      cfg.scenario = ScenarioKind::fault_demo;
      FaultDemoReport fd = run_fault_demo(cfg);
      std::printf("fault-demo: faulted=%d sibling %.1f -> %.1f Mbit/s "
                  "(delta %.2f%%) %s\n",
                  fd.faulted_compartments, fd.sibling_clean_mbps,
                  fd.sibling_injected_mbps, fd.relative_delta * 100.0,
                  fd.contained ? "CONTAINED" : "NOT CONTAINED");
      for (const auto& f : fd.injected.faults) {
        std::printf("  fault: %s\n", fault_record_to_json(f).c_str());
      }
      if (!cfg.out.dir.empty()) {
        write_report_files(fd.clean, cfg.out);
        write_report_files(fd.injected, cfg.out);
      }
      return fd.contained ? 0 : 1;
    }
    if (report_cmd->parsed()) {
      auto reports = resummarize_directory(report_dir);
      for (const auto& r : reports) {
        std::printf(
            "%-40s median %10.0f ns  p25 %10.0f  p75 %10.0f  mean %10.0f  "
            "removed %llu/%llu%s\n",
            r.scenario.c_str(), r.median_ns, r.p25_ns, r.p75_ns, r.mean_ns,
            static_cast<unsigned long long>(r.removed_count),
            static_cast<unsigned long long>(r.raw_count),
            r.degenerate_box ? " [degenerate box]" : "");
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
