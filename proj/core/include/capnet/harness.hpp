#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "capnet/bench.hpp"
#include "capnet/intravisor.hpp"

/// Scenario composer and experiment runner: builds the baseline and
/// compartmentalized topologies from a config file, runs bandwidth and
/// latency legs, performs the fault containment demonstration and writes
/// CSV/JSON reports.
namespace capnet {

enum class ScenarioKind {
  baseline_dual,
  baseline_single,
  s1,
  s2_uncontended,
  s2_contended,
  fault_demo,
};

const char* to_string(ScenarioKind kind);
std::optional<ScenarioKind> scenario_from_string(const std::string& name);

enum class Profile { ci, full };

struct WireSettings {
  double rate_mbps = 100.0;
  uint64_t latency_ns = 10'000;
  double loss = 0.0;
  std::string kind = "inproc";  // or "datagram"
  std::string datagram_host = "127.0.0.1";
  uint16_t datagram_port_a = 47801;
  uint16_t datagram_port_b = 47802;
};

struct BenchSettings {
  uint64_t transfer_mib = 16;
  uint64_t warmup_mib = 4;
  size_t chunk_bytes = 32 * 1024;
  uint64_t iterations = 100'000;
  size_t payload_bytes = 1024;
  uint64_t gap_ns = 0;
  /// Wire rate for latency legs (0 = same as the wire rate); they are
  /// overhead measurements, not throughput ones, so a faster drain keeps
  /// runtimes short.
  double latency_leg_rate_mbps = 0.0;
  uint64_t leg_timeout_s = 300;
};

struct OutputSettings {
  std::string dir;
  bool raw_dump = false;
  bool write_csv = true;
  bool write_json = true;
};

struct ScenarioConfig {
  ScenarioKind scenario = ScenarioKind::s1;
  uint64_t arena_mib = 64;
  uint32_t granule = 32;
  uint64_t compartment_mib = 8;
  uint64_t seed = 1;
  Profile profile = Profile::ci;
  WireSettings wire;
  BenchSettings bench;
  OutputSettings out;
  std::map<std::string, double> asserts;

  /// Iterations adjusted for the profile (full scale is 10x the ci figure
  /// unless the config named an explicit count).
  uint64_t effective_iterations() const;
  void validate() const;  // throws std::runtime_error with precise messages
};

ScenarioConfig parse_config_text(const std::string& text,
                                 const std::string& origin = "<memory>");
ScenarioConfig parse_config_file(const std::string& path);

struct EnvironmentFingerprint {
  std::string host;
  std::string compiler;
  std::string build_type;
  uint64_t clock_resolution_ns = 0;
  std::string started_at;
};

EnvironmentFingerprint fingerprint_environment();

struct BandwidthLeg {
  std::string scenario;
  std::string name;
  BandwidthResult server;
  BandwidthResult client;
  uint64_t data_path_trampolines = 0;  // delta across the leg
  bool checksum_ok = true;
};

struct LatencyLeg {
  std::string scenario;
  std::string name;
  LatencyReport report;
  uint64_t attempts = 0;
  uint64_t blocked = 0;
  uint64_t clock_trampolines = 0;      // observed in the timed region
  uint64_t expected_clock_trampolines = 0;
  uint64_t data_path_trampolines = 0;  // baseline purity check
  std::vector<int64_t> raw_samples;    // kept only when raw_dump is on
};

struct RunReport {
  std::string scenario;
  std::string config_echo;
  EnvironmentFingerprint env;
  std::vector<BandwidthLeg> bandwidth_legs;
  std::vector<LatencyLeg> latency_legs;
  std::vector<FaultRecord> faults;
  std::vector<std::string> errors;
  std::vector<std::string> assert_failures;
  /// Leg names the config promised, used for the completeness self-check.
  std::vector<std::string> expected_legs;

  bool complete() const;
};

/// Runs every leg of one scenario; failures of individual legs are recorded
/// and the remaining legs still run.
RunReport run_scenario(const ScenarioConfig& config);

/// All scenarios, one report each, in a fixed order.
std::vector<RunReport> run_matrix(const ScenarioConfig& config);

struct FaultDemoReport {
  RunReport clean;
  RunReport injected;
  double sibling_clean_mbps = 0.0;
  double sibling_injected_mbps = 0.0;
  double relative_delta = 0.0;
  int faulted_compartments = 0;
  bool contained = false;  // exactly one fault, sibling within tolerance
};

/// Two passes over the fault topology: injection-free, then with the
/// injected out-of-bounds access; compares the surviving pair's throughput.
FaultDemoReport run_fault_demo(const ScenarioConfig& config,
                               double tolerance = 0.05);

/// Re-summarizes raw nanosecond dumps (one value per line) found in a
/// directory; returns one report per file.
std::vector<LatencyReport> resummarize_directory(const std::string& dir);

// Report serialization.
std::string report_to_json(const RunReport& report);
std::string fault_demo_to_json(const FaultDemoReport& report);
std::string report_to_csv(const RunReport& report);
void write_report_files(const RunReport& report, const OutputSettings& out);
std::string fault_record_to_json(const FaultRecord& record);

/// Evaluates the [assert] section against a finished report; returns the
/// failure descriptions (empty means every embedded assertion held).
std::vector<std::string> evaluate_asserts(const ScenarioConfig& config,
                                          const std::vector<RunReport>& runs);

/// Topology introspection for tests: builds the scenario, summarizes it and
/// tears it down without running legs.
struct TopologySummary {
  int compartments = 0;
  int ports = 0;
  int wires = 0;
  std::vector<std::pair<uint64_t, uint64_t>> ddc_ranges;  // base, length
  bool mutex_shared = false;
};

TopologySummary build_summary(const ScenarioConfig& config);

}  // namespace capnet
