#include "capnet/harness.hpp"

#include <unistd.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "scenario.hpp"

namespace capnet {

namespace {

using nlohmann::json;

constexpr uint32_t kBwListenId = 10;
constexpr uint32_t kLatListenId = 20;

uint64_t steady_now_ns() {
  return static_cast<uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(
          std::chrono::steady_clock::now().time_since_epoch())
          .count());
}

SliceRef ref_of(BandwidthClientSlice* s) {
  return SliceRef{[s] { return s->step(); }, [s] { return s->done(); }};
}
SliceRef ref_of(BandwidthServerSlice* s) {
  return SliceRef{[s] { return s->step(); }, [s] { return s->done(); }};
}
SliceRef ref_of(LatencyClientSlice* s) {
  return SliceRef{[s] { return s->step(); }, [s] { return s->done(); }};
}

std::string config_echo_string(const ScenarioConfig& cfg) {
  std::ostringstream os;
  os << "scenario=" << to_string(cfg.scenario) << " seed=" << cfg.seed
     << " profile=" << (cfg.profile == Profile::ci ? "ci" : "full")
     << " arena_mib=" << cfg.arena_mib << " granule=" << cfg.granule
     << " compartment_mib=" << cfg.compartment_mib
     << " wire.rate_mbps=" << cfg.wire.rate_mbps
     << " wire.latency_ns=" << cfg.wire.latency_ns
     << " wire.loss=" << cfg.wire.loss << " wire.kind=" << cfg.wire.kind
     << " bench.transfer_mib=" << cfg.bench.transfer_mib
     << " bench.chunk=" << cfg.bench.chunk_bytes
     << " bench.iterations=" << cfg.effective_iterations()
     << " bench.payload=" << cfg.bench.payload_bytes
     << " bench.gap_ns=" << cfg.bench.gap_ns;
  return os.str();
}

BandwidthSliceConfig bw_slice_config(const ScenarioConfig& cfg,
                                     double rate_mbps, Endpoint remote,
                                     uint32_t listen_id) {
  BandwidthSliceConfig bc;
  bc.remote = remote;
  bc.listen_id = listen_id;
  bc.transfer_bytes = cfg.bench.transfer_mib << 20;
  bc.warmup_bytes = cfg.bench.warmup_mib << 20;
  bc.chunk = cfg.bench.chunk_bytes;
  bc.theoretical_mbps = rate_mbps;
  bc.deadline_ns = steady_now_ns() + cfg.bench.leg_timeout_s * 1'000'000'000ull;
  bc.checksum = true;
  return bc;
}

LatencySliceConfig lat_slice_config(const ScenarioConfig& cfg, Endpoint remote,
                                    const std::string& tag) {
  LatencySliceConfig lc;
  lc.remote = remote;
  lc.iterations = cfg.effective_iterations();
  lc.payload = cfg.bench.payload_bytes;
  lc.gap_ns = cfg.bench.gap_ns;
  lc.warmup = std::min<uint64_t>(1000, lc.iterations / 10 + 1);
  lc.deadline_ns = steady_now_ns() + cfg.bench.leg_timeout_s * 1'000'000'000ull;
  lc.tag = tag;
  return lc;
}

// Two full stacks wired together, one direction of iperf-style traffic.
BandwidthLeg run_pair_bandwidth_leg(const ScenarioConfig& cfg,
                                    SideFlavor flavor,
                                    const std::string& scenario,
                                    const std::string& leg_name,
                                    bool reverse) {
  Topology topo(cfg, cfg.wire.rate_mbps);
  StackSide& c1 = topo.add_stack_side(scenario + "/c1", 1, flavor);
  StackSide& c2 = topo.add_stack_side(scenario + "/c2", 2, flavor);
  topo.connect(c1, c2);
  StackSide& cs = reverse ? c2 : c1;
  StackSide& ss = reverse ? c1 : c2;

  BandwidthSliceConfig bc = bw_slice_config(
      cfg, topo.wire_rate_mbps(), Endpoint{ss.port, kBwListenId}, kBwListenId);
  BandwidthClientSlice client(topo.make_api(cs), bc);
  BandwidthServerSlice server(topo.make_api(ss), bc);
  topo.set_side_slices(cs, {ref_of(&client)});
  topo.set_side_slices(ss, {ref_of(&server)});

  uint64_t calls0 = topo.global_service_calls();
  topo.start();
  bool ok = topo.await({[&] { return client.done(); },
                        [&] { return server.done(); }},
                       cfg.bench.leg_timeout_s * 1'000'000'000ull);
  topo.stop();

  BandwidthLeg leg;
  leg.scenario = scenario;
  leg.name = leg_name;
  leg.server = server.result();
  leg.client = client.result();
  if (!ok) {
    leg.server.partial = true;
    leg.client.partial = true;
  }
  leg.checksum_ok = client.checksum() == server.checksum() &&
                    server.bytes() == bc.transfer_bytes + bc.warmup_bytes;
  leg.data_path_trampolines = topo.global_service_calls() - calls0;
  return leg;
}

double latency_rate(const ScenarioConfig& cfg) {
  return cfg.bench.latency_leg_rate_mbps > 0 ? cfg.bench.latency_leg_rate_mbps
                                             : cfg.wire.rate_mbps;
}

LatencyLeg run_pair_latency_leg(const ScenarioConfig& cfg, SideFlavor flavor,
                                const std::string& scenario,
                                const std::string& leg_name, bool reverse) {
  Topology topo(cfg, latency_rate(cfg));
  StackSide& c1 = topo.add_stack_side(scenario + "/c1", 1, flavor);
  StackSide& c2 = topo.add_stack_side(scenario + "/c2", 2, flavor);
  topo.connect(c1, c2);
  StackSide& cs = reverse ? c2 : c1;
  StackSide& ss = reverse ? c1 : c2;

  LatencySliceConfig lc = lat_slice_config(
      cfg, Endpoint{ss.port, kLatListenId}, scenario + "/" + leg_name);
  LatencyClientSlice client(topo.make_api(cs), lc);
  BandwidthSliceConfig sink = bw_slice_config(
      cfg, topo.wire_rate_mbps(), Endpoint{}, kLatListenId);
  sink.checksum = false;
  BandwidthServerSlice server(topo.make_api(ss), sink);
  topo.set_side_slices(cs, {ref_of(&client)});
  topo.set_side_slices(ss, {ref_of(&server)});

  uint64_t calls0 = topo.global_service_calls();
  topo.start();
  topo.await({[&] { return client.done(); }},
             cfg.bench.leg_timeout_s * 1'000'000'000ull);
  topo.stop();

  LatencyOutput out = client.take_output();
  LatencyLeg leg;
  leg.scenario = scenario;
  leg.name = leg_name;
  leg.report = out.report;
  leg.attempts = out.attempts;
  leg.blocked = out.blocked;
  leg.clock_trampolines = out.clock_calls_observed;
  leg.expected_clock_trampolines =
      flavor == SideFlavor::checked ? 2 * out.attempts : 0;
  leg.data_path_trampolines = topo.global_service_calls() - calls0;
  if (cfg.out.raw_dump) leg.raw_samples = std::move(out.raw_samples);
  return leg;
}

struct S2Parts {
  StackSide* peer = nullptr;
  StackSide* stack = nullptr;
  std::vector<AppSide*> apps;
};

S2Parts build_s2(Topology& topo, int app_count) {
  S2Parts parts;
  parts.stack = &topo.add_stack_side("stack_cvm", 1, SideFlavor::checked,
                                     /*publish_entries=*/true,
                                     /*shared_coordination=*/true);
  parts.peer = &topo.add_stack_side("peer_cvm", 2, SideFlavor::checked);
  topo.connect(*parts.stack, *parts.peer);
  for (int i = 0; i < app_count; ++i) {
    parts.apps.push_back(
        &topo.add_app_side("app_cvm" + std::to_string(i + 1), *parts.stack));
  }
  topo.set_loop_only_body(*parts.stack);
  return parts;
}

std::vector<BandwidthLeg> run_s2_bandwidth_legs(const ScenarioConfig& cfg,
                                                const std::string& scenario,
                                                int app_count, bool reverse) {
  Topology topo(cfg, cfg.wire.rate_mbps);
  S2Parts parts = build_s2(topo, app_count);

  std::vector<std::unique_ptr<BandwidthClientSlice>> clients;
  std::vector<std::unique_ptr<BandwidthServerSlice>> servers;
  std::vector<SliceRef> peer_slices;
  std::vector<std::function<bool()>> done;

  for (int i = 0; i < app_count; ++i) {
    uint32_t listen_id = kBwListenId + static_cast<uint32_t>(i);
    BandwidthSliceConfig bc =
        bw_slice_config(cfg, topo.wire_rate_mbps(),
                        Endpoint{parts.peer->port, listen_id}, listen_id);
    if (!reverse) {
      // App compartments write through the sealed entries; the peer serves.
      clients.push_back(std::make_unique<BandwidthClientSlice>(
          topo.make_remote_api(*parts.apps[i], *parts.stack), bc));
      servers.push_back(std::make_unique<BandwidthServerSlice>(
          topo.make_api(*parts.peer), bc));
      topo.set_app_driver(*parts.apps[i], ref_of(clients.back().get()),
                          /*baton_member=*/true);
      peer_slices.push_back(ref_of(servers.back().get()));
    } else {
      // The peer writes; the app accepts and reads through the entries.
      bc.remote = Endpoint{parts.stack->port, listen_id};
      clients.push_back(std::make_unique<BandwidthClientSlice>(
          topo.make_api(*parts.peer), bc));
      servers.push_back(std::make_unique<BandwidthServerSlice>(
          topo.make_remote_api(*parts.apps[i], *parts.stack), bc));
      topo.set_app_driver(*parts.apps[i], ref_of(servers.back().get()),
                          /*baton_member=*/true);
      peer_slices.push_back(ref_of(clients.back().get()));
    }
    BandwidthClientSlice* c = clients.back().get();
    BandwidthServerSlice* s = servers.back().get();
    done.push_back([c] { return c->done(); });
    done.push_back([s] { return s->done(); });
  }
  topo.set_side_slices(*parts.peer, peer_slices);

  topo.start();
  bool ok = topo.await(done, cfg.bench.leg_timeout_s * 1'000'000'000ull);
  topo.stop();

  std::vector<BandwidthLeg> legs;
  for (int i = 0; i < app_count; ++i) {
    BandwidthLeg leg;
    leg.scenario = scenario;
    leg.name = app_count > 1 ? "app" + std::to_string(i + 1)
                             : (reverse ? "peer_to_app" : "app_to_peer");
    leg.server = servers[static_cast<size_t>(i)]->result();
    leg.client = clients[static_cast<size_t>(i)]->result();
    if (!ok) {
      leg.server.partial = true;
      leg.client.partial = true;
    }
    leg.checksum_ok = clients[static_cast<size_t>(i)]->checksum() ==
                      servers[static_cast<size_t>(i)]->checksum();
    legs.push_back(std::move(leg));
  }
  return legs;
}

LatencyLeg run_s2_latency_leg(const ScenarioConfig& cfg,
                              const std::string& scenario, int app_count) {
  Topology topo(cfg, latency_rate(cfg));
  S2Parts parts = build_s2(topo, app_count);

  std::vector<std::unique_ptr<LatencyClientSlice>> clients;
  std::vector<std::unique_ptr<BandwidthServerSlice>> sinks;
  std::vector<SliceRef> peer_slices;
  std::vector<std::function<bool()>> done;

  for (int i = 0; i < app_count; ++i) {
    uint32_t listen_id = kLatListenId + static_cast<uint32_t>(i);
    LatencySliceConfig lc =
        lat_slice_config(cfg, Endpoint{parts.peer->port, listen_id},
                         scenario + "/app" + std::to_string(i + 1));
    if (app_count > 1) lc.gap_ns = 0;  // tight loop writers when contended
    clients.push_back(std::make_unique<LatencyClientSlice>(
        topo.make_remote_api(*parts.apps[i], *parts.stack), lc));
    BandwidthSliceConfig sink = bw_slice_config(
        cfg, topo.wire_rate_mbps(), Endpoint{}, listen_id);
    sink.checksum = false;
    sinks.push_back(std::make_unique<BandwidthServerSlice>(
        topo.make_api(*parts.peer), sink));
    topo.set_app_driver(*parts.apps[i], ref_of(clients.back().get()),
                        /*baton_member=*/false);
    peer_slices.push_back(ref_of(sinks.back().get()));
    LatencyClientSlice* c = clients.back().get();
    done.push_back([c] { return c->done(); });
  }
  topo.set_side_slices(*parts.peer, peer_slices);

  topo.start();
  topo.await(done, cfg.bench.leg_timeout_s * 1'000'000'000ull);
  topo.stop();

  std::vector<int64_t> merged;
  uint64_t attempts = 0, blocked = 0, observed = 0;
  for (auto& c : clients) {
    LatencyOutput out = c->take_output();
    merged.insert(merged.end(), out.raw_samples.begin(),
                  out.raw_samples.end());
    attempts += out.attempts;
    blocked += out.blocked;
    observed += out.clock_calls_observed;
  }
  LatencyLeg leg;
  leg.scenario = scenario;
  leg.name = app_count > 1 ? "contended" : "app";
  if (!merged.empty()) {
    leg.report = filtered_report(merged, scenario + "/" + leg.name);
  }
  leg.attempts = attempts;
  leg.blocked = blocked;
  leg.clock_trampolines = observed;
  leg.expected_clock_trampolines = 2 * attempts;
  if (cfg.out.raw_dump) leg.raw_samples = std::move(merged);
  return leg;
}

void append_error(RunReport& report, const std::string& leg,
                  const std::exception& e) {
  report.errors.push_back(leg + ": " + e.what());
}

}  // namespace

uint64_t measure_clock_resolution_ns() {
  uint64_t best = UINT64_MAX;
  for (int i = 0; i < 1000; ++i) {
    uint64_t a = steady_now_ns();
    uint64_t b = steady_now_ns();
    while (b == a) b = steady_now_ns();
    best = std::min(best, b - a);
  }
  return best == UINT64_MAX ? 0 : best;
}

EnvironmentFingerprint fingerprint_environment() {
  EnvironmentFingerprint env;
  char host[256] = {};
  if (gethostname(host, sizeof host - 1) == 0) env.host = host;
  env.compiler = __VERSION__;
#ifdef NDEBUG
  env.build_type = "release";
#else
  env.build_type = "debug";
#endif
  env.clock_resolution_ns = measure_clock_resolution_ns();
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[64];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  env.started_at = buf;
  return env;
}

bool RunReport::complete() const {
  std::vector<std::string> seen;
  for (const auto& leg : bandwidth_legs) seen.push_back("bw/" + leg.name);
  for (const auto& leg : latency_legs) seen.push_back("lat/" + leg.name);
  if (seen.size() != expected_legs.size()) return false;
  for (const auto& name : expected_legs) {
    if (std::count(seen.begin(), seen.end(), name) != 1) return false;
  }
  return true;
}

RunReport run_scenario(const ScenarioConfig& config) {
  config.validate();
  RunReport report;
  report.scenario = to_string(config.scenario);
  report.config_echo = config_echo_string(config);
  report.env = fingerprint_environment();

  auto guarded = [&](const std::string& leg, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      append_error(report, leg, e);
    }
  };

  switch (config.scenario) {
    case ScenarioKind::baseline_dual:
    case ScenarioKind::s1: {
      SideFlavor flavor = config.scenario == ScenarioKind::s1
                              ? SideFlavor::checked
                              : SideFlavor::direct;
      std::string name = to_string(config.scenario);
      report.expected_legs = {"bw/c1_to_c2", "bw/c2_to_c1", "lat/c1",
                              "lat/c2"};
      guarded("bw/c1_to_c2", [&] {
        report.bandwidth_legs.push_back(
            run_pair_bandwidth_leg(config, flavor, name, "c1_to_c2", false));
      });
      guarded("bw/c2_to_c1", [&] {
        report.bandwidth_legs.push_back(
            run_pair_bandwidth_leg(config, flavor, name, "c2_to_c1", true));
      });
      guarded("lat/c1", [&] {
        report.latency_legs.push_back(
            run_pair_latency_leg(config, flavor, name, "c1", false));
      });
      guarded("lat/c2", [&] {
        report.latency_legs.push_back(
            run_pair_latency_leg(config, flavor, name, "c2", true));
      });
      break;
    }
    case ScenarioKind::baseline_single: {
      report.expected_legs = {"bw/a_to_b", "bw/b_to_a"};
      guarded("bw/a_to_b", [&] {
        report.bandwidth_legs.push_back(run_pair_bandwidth_leg(
            config, SideFlavor::direct, "baseline_single", "a_to_b", false));
      });
      guarded("bw/b_to_a", [&] {
        report.bandwidth_legs.push_back(run_pair_bandwidth_leg(
            config, SideFlavor::direct, "baseline_single", "b_to_a", true));
      });
      break;
    }
    case ScenarioKind::s2_uncontended: {
      report.expected_legs = {"bw/app_to_peer", "bw/peer_to_app", "lat/app"};
      guarded("bw/app_to_peer", [&] {
        auto legs = run_s2_bandwidth_legs(config, "s2_uncontended", 1, false);
        report.bandwidth_legs.insert(report.bandwidth_legs.end(),
                                     legs.begin(), legs.end());
      });
      guarded("bw/peer_to_app", [&] {
        auto legs = run_s2_bandwidth_legs(config, "s2_uncontended", 1, true);
        report.bandwidth_legs.insert(report.bandwidth_legs.end(),
                                     legs.begin(), legs.end());
      });
      guarded("lat/app", [&] {
        report.latency_legs.push_back(
            run_s2_latency_leg(config, "s2_uncontended", 1));
      });
      break;
    }
    case ScenarioKind::s2_contended: {
      report.expected_legs = {"bw/app1", "bw/app2", "lat/contended"};
      guarded("bw/contended", [&] {
        auto legs = run_s2_bandwidth_legs(config, "s2_contended", 2, false);
        report.bandwidth_legs.insert(report.bandwidth_legs.end(),
                                     legs.begin(), legs.end());
      });
      guarded("lat/contended", [&] {
        report.latency_legs.push_back(
            run_s2_latency_leg(config, "s2_contended", 2));
      });
      break;
    }
    case ScenarioKind::fault_demo: {
      FaultDemoReport fd = run_fault_demo(config);
      report = fd.injected;
      break;
    }
  }
  return report;
}

std::vector<RunReport> run_matrix(const ScenarioConfig& config) {
  std::vector<RunReport> out;
  for (ScenarioKind kind :
       {ScenarioKind::baseline_dual, ScenarioKind::baseline_single,
        ScenarioKind::s1, ScenarioKind::s2_uncontended,
        ScenarioKind::s2_contended, ScenarioKind::fault_demo}) {
    ScenarioConfig c = config;
    c.scenario = kind;
    out.push_back(run_scenario(c));
  }
  return out;
}

namespace {

struct FaultPass {
  RunReport report;
  double measured_server_mbps = 0.0;
  int faulted = 0;
};

FaultPass run_fault_pass(const ScenarioConfig& cfg, bool inject) {
  FaultPass pass;
  pass.report.scenario = "fault_demo";
  pass.report.config_echo = config_echo_string(cfg);
  pass.report.env = fingerprint_environment();
  pass.report.expected_legs = {"bw/measured", "bw/victim"};

  Topology topo(cfg, cfg.wire.rate_mbps);
  StackSide& c1 = topo.add_stack_side("fault/c1", 1, SideFlavor::checked);
  StackSide& c2 = topo.add_stack_side("fault/c2", 2, SideFlavor::checked);
  StackSide& c3 = topo.add_stack_side("fault/c3", 3, SideFlavor::checked);
  StackSide& c4 = topo.add_stack_side("fault/c4", 4, SideFlavor::checked);
  topo.connect(c1, c2);
  topo.connect(c3, c4);

  BandwidthSliceConfig measured = bw_slice_config(
      cfg, topo.wire_rate_mbps(), Endpoint{c2.port, kBwListenId}, kBwListenId);
  BandwidthSliceConfig victim = bw_slice_config(
      cfg, topo.wire_rate_mbps(), Endpoint{c4.port, kBwListenId}, kBwListenId);

  BandwidthClientSlice measured_client(topo.make_api(c1), measured);
  BandwidthServerSlice measured_server(topo.make_api(c2), measured);
  BandwidthClientSlice victim_client(topo.make_api(c3), victim);
  BandwidthServerSlice victim_server(topo.make_api(c4), victim);
  topo.set_side_slices(c1, {ref_of(&measured_client)});
  topo.set_side_slices(c2, {ref_of(&measured_server)});
  topo.set_side_slices(c3, {ref_of(&victim_client)});
  topo.set_side_slices(c4, {ref_of(&victim_server)});

  topo.start();
  if (inject) {
    // Let the victim pair carry some traffic before the bad access fires.
    uint64_t threshold = std::max<uint64_t>(victim.transfer_bytes / 10, 64 * 1024);
    uint64_t deadline =
        steady_now_ns() + cfg.bench.leg_timeout_s * 1'000'000'000ull / 2;
    while (victim_server.bytes() < threshold && steady_now_ns() < deadline) {
      std::this_thread::sleep_for(std::chrono::milliseconds(1));
    }
    topo.iv().inject_fault(c3.comp_id, FaultKind::out_of_bounds, 1);
    topo.iv().wait_for_status(c3.comp_id, CompartmentStatus::faulted,
                              std::chrono::seconds(10));
  }
  std::vector<std::function<bool()>> done = {
      [&] { return measured_client.done(); },
      [&] { return measured_server.done(); }};
  if (!inject) {
    // The sacrificial pair only completes on a clean pass; after an
    // injection its server never sees end-of-stream and is cut off here.
    done.push_back([&] { return victim_client.done(); });
    done.push_back([&] { return victim_server.done(); });
  }
  topo.await(done, cfg.bench.leg_timeout_s * 1'000'000'000ull);
  topo.stop();

  BandwidthLeg measured_leg;
  measured_leg.scenario = "fault_demo";
  measured_leg.name = "measured";
  measured_leg.server = measured_server.result();
  measured_leg.client = measured_client.result();
  measured_leg.checksum_ok =
      measured_client.checksum() == measured_server.checksum();
  BandwidthLeg victim_leg;
  victim_leg.scenario = "fault_demo";
  victim_leg.name = "victim";
  victim_leg.server = victim_server.result();
  victim_leg.client = victim_client.result();
  if (inject) {
    victim_leg.server.partial = true;  // peer died mid-stream
    victim_leg.client.partial = true;
  }
  victim_leg.checksum_ok = !inject && victim_client.checksum() ==
                                          victim_server.checksum();
  pass.report.bandwidth_legs = {measured_leg, victim_leg};
  pass.report.faults = topo.iv().fault_records();
  pass.measured_server_mbps = measured_leg.server.achieved_mbps;
  for (int i = 0; i < topo.iv().compartment_count(); ++i) {
    if (topo.iv().status(i) == CompartmentStatus::faulted) pass.faulted++;
  }
  return pass;
}

}  // namespace

FaultDemoReport run_fault_demo(const ScenarioConfig& config, double tolerance) {
  config.validate();
  FaultDemoReport out;
  FaultPass clean = run_fault_pass(config, false);
  FaultPass injected = run_fault_pass(config, true);
  out.clean = std::move(clean.report);
  out.injected = std::move(injected.report);
  out.sibling_clean_mbps = clean.measured_server_mbps;
  out.sibling_injected_mbps = injected.measured_server_mbps;
  if (out.sibling_clean_mbps > 0) {
    out.relative_delta =
        std::abs(out.sibling_injected_mbps - out.sibling_clean_mbps) /
        out.sibling_clean_mbps;
  }
  out.faulted_compartments = injected.faulted;
  out.contained = injected.faulted == 1 && clean.faulted == 0 &&
                  out.relative_delta <= tolerance;
  return out;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

json bw_to_json(const BandwidthResult& r) {
  return json{{"role", r.role},
              {"achieved_mbps", r.achieved_mbps},
              {"theoretical_mbps", r.theoretical_mbps},
              {"efficiency", r.efficiency()},
              {"duration_s", r.duration_s},
              {"bytes", r.bytes},
              {"partial", r.partial}};
}

json lat_to_json(const LatencyReport& r) {
  return json{{"scenario", r.scenario},
              {"raw_count", r.raw_count},
              {"removed_count", r.removed_count},
              {"mean_ns", r.mean_ns},
              {"stddev_ns", r.stddev_ns},
              {"median_ns", r.median_ns},
              {"p25_ns", r.p25_ns},
              {"p75_ns", r.p75_ns},
              {"min_ns", r.min_ns},
              {"max_ns", r.max_ns},
              {"degenerate_box", r.degenerate_box}};
}

json report_to_json_obj(const RunReport& report) {
  json j;
  j["scenario"] = report.scenario;
  j["config"] = report.config_echo;
  j["environment"] = {{"host", report.env.host},
                      {"compiler", report.env.compiler},
                      {"build_type", report.env.build_type},
                      {"clock_resolution_ns", report.env.clock_resolution_ns},
                      {"started_at", report.env.started_at}};
  j["complete"] = report.complete();
  j["bandwidth_legs"] = json::array();
  for (const auto& leg : report.bandwidth_legs) {
    j["bandwidth_legs"].push_back(
        {{"name", leg.name},
         {"server", bw_to_json(leg.server)},
         {"client", bw_to_json(leg.client)},
         {"data_path_trampolines", leg.data_path_trampolines},
         {"checksum_ok", leg.checksum_ok}});
  }
  j["latency_legs"] = json::array();
  for (const auto& leg : report.latency_legs) {
    j["latency_legs"].push_back(
        {{"name", leg.name},
         {"report", lat_to_json(leg.report)},
         {"attempts", leg.attempts},
         {"blocked", leg.blocked},
         {"clock_trampolines", leg.clock_trampolines},
         {"expected_clock_trampolines", leg.expected_clock_trampolines},
         {"data_path_trampolines", leg.data_path_trampolines}});
  }
  j["faults"] = json::array();
  for (const auto& f : report.faults) {
    j["faults"].push_back(json::parse(fault_record_to_json(f)));
  }
  j["errors"] = report.errors;
  j["assert_failures"] = report.assert_failures;
  return j;
}

}  // namespace

std::string fault_record_to_json(const FaultRecord& record) {
  json j{{"compartment_id", record.compartment_id},
         {"fault_kind", to_string(record.kind)},
         {"address", record.address},
         {"base", record.base},
         {"length", record.length},
         {"service_context", record.service_context},
         {"timestamp_ns", record.timestamp_ns}};
  return j.dump();
}

std::string report_to_json(const RunReport& report) {
  return report_to_json_obj(report).dump(2);
}

std::string fault_demo_to_json(const FaultDemoReport& report) {
  json j;
  j["clean"] = report_to_json_obj(report.clean);
  j["injected"] = report_to_json_obj(report.injected);
  j["sibling_clean_mbps"] = report.sibling_clean_mbps;
  j["sibling_injected_mbps"] = report.sibling_injected_mbps;
  j["relative_delta"] = report.relative_delta;
  j["faulted_compartments"] = report.faulted_compartments;
  j["contained"] = report.contained;
  return j.dump(2);
}

std::string report_to_csv(const RunReport& report) {
  std::ostringstream os;
  os << "scenario,leg,role,metric,value\n";
  auto bw_rows = [&](const std::string& leg, const BandwidthResult& r) {
    os << report.scenario << "," << leg << "," << r.role << ",achieved_mbps,"
       << r.achieved_mbps << "\n";
    os << report.scenario << "," << leg << "," << r.role << ",efficiency,"
       << r.efficiency() << "\n";
    os << report.scenario << "," << leg << "," << r.role << ",bytes,"
       << r.bytes << "\n";
    os << report.scenario << "," << leg << "," << r.role << ",duration_s,"
       << r.duration_s << "\n";
  };
  for (const auto& leg : report.bandwidth_legs) {
    bw_rows(leg.name, leg.server);
    bw_rows(leg.name, leg.client);
  }
  for (const auto& leg : report.latency_legs) {
    auto row = [&](const char* metric, double value) {
      os << report.scenario << "," << leg.name << ",latency," << metric << ","
         << value << "\n";
    };
    row("median_ns", leg.report.median_ns);
    row("mean_ns", leg.report.mean_ns);
    row("p25_ns", leg.report.p25_ns);
    row("p75_ns", leg.report.p75_ns);
    row("stddev_ns", leg.report.stddev_ns);
    row("min_ns", static_cast<double>(leg.report.min_ns));
    row("max_ns", static_cast<double>(leg.report.max_ns));
    row("raw_count", static_cast<double>(leg.report.raw_count));
    row("removed_count", static_cast<double>(leg.report.removed_count));
  }
  return os.str();
}

void write_report_files(const RunReport& report, const OutputSettings& out) {
  if (out.dir.empty()) return;
  namespace fs = std::filesystem;
  fs::create_directories(out.dir);
  std::string stem = report.scenario;
  if (out.write_json) {
    std::ofstream f(fs::path(out.dir) / (stem + ".json"));
    f << report_to_json(report) << "\n";
  }
  if (out.write_csv) {
    std::ofstream f(fs::path(out.dir) / (stem + ".csv"));
    f << report_to_csv(report);
  }
  if (!report.faults.empty()) {
    std::ofstream f(fs::path(out.dir) / (stem + ".faults.jsonl"),
                    std::ios::app);
    for (const auto& rec : report.faults) {
      f << fault_record_to_json(rec) << "\n";
    }
  }
  if (out.raw_dump) {
    fs::create_directories(fs::path(out.dir) / "raw");
    for (const auto& leg : report.latency_legs) {
      if (leg.raw_samples.empty()) continue;
      std::ofstream f(fs::path(out.dir) / "raw" /
                      (stem + "." + leg.name + ".ns"));
      for (int64_t v : leg.raw_samples) f << v << "\n";
    }
  }
}

std::vector<LatencyReport> resummarize_directory(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<LatencyReport> out;
  if (!fs::exists(dir)) throw std::runtime_error("no such directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ns") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    std::ifstream f(path);
    std::vector<int64_t> samples;
    int64_t v;
    while (f >> v) samples.push_back(v);
    if (samples.empty()) continue;
    out.push_back(filtered_report(samples, path.filename().string()));
  }
  return out;
}

std::vector<std::string> evaluate_asserts(const ScenarioConfig& config,
                                          const std::vector<RunReport>& runs) {
  std::vector<std::string> failures;
  auto find_latency = [&](const std::string& scenario) -> const LatencyLeg* {
    for (const auto& run : runs) {
      for (const auto& leg : run.latency_legs) {
        if (run.scenario == scenario) return &leg;
      }
    }
    return nullptr;
  };

  for (const auto& [key, value] : config.asserts) {
    if (key == "min_server_efficiency") {
      for (const auto& run : runs) {
        for (const auto& leg : run.bandwidth_legs) {
          if (leg.server.partial) continue;
          if (leg.server.efficiency() < value) {
            std::ostringstream os;
            os << "min_server_efficiency: " << run.scenario << "/" << leg.name
               << " efficiency " << leg.server.efficiency() << " < " << value;
            failures.push_back(os.str());
          }
        }
      }
    } else if (key == "require_checksum") {
      if (value != 0) {
        for (const auto& run : runs) {
          for (const auto& leg : run.bandwidth_legs) {
            if (!leg.server.partial && !leg.checksum_ok) {
              failures.push_back("require_checksum: " + run.scenario + "/" +
                                 leg.name + " mismatch");
            }
          }
        }
      }
    } else if (key == "baseline_zero_trampolines") {
      if (value != 0) {
        for (const auto& run : runs) {
          if (run.scenario.rfind("baseline", 0) != 0) continue;
          for (const auto& leg : run.bandwidth_legs) {
            if (leg.data_path_trampolines != 0) {
              failures.push_back("baseline_zero_trampolines: " + run.scenario +
                                 "/" + leg.name);
            }
          }
          for (const auto& leg : run.latency_legs) {
            if (leg.data_path_trampolines != 0) {
              failures.push_back("baseline_zero_trampolines: " + run.scenario +
                                 "/" + leg.name);
            }
          }
        }
      }
    } else if (key == "latency_ordering") {
      if (value != 0) {
        const LatencyLeg* base = find_latency("baseline_dual");
        const LatencyLeg* s1 = find_latency("s1");
        const LatencyLeg* s2u = find_latency("s2_uncontended");
        const LatencyLeg* s2c = find_latency("s2_contended");
        if (!base || !s1 || !s2u || !s2c) {
          failures.push_back("latency_ordering: missing legs");
        } else {
          double b = base->report.median_ns;
          double m1 = s1->report.median_ns;
          double m2 = s2u->report.median_ns;
          double m3 = s2c->report.median_ns;
          if (!(b <= m1 && m1 <= m2 && m2 < m3)) {
            std::ostringstream os;
            os << "latency_ordering: medians " << b << " / " << m1 << " / "
               << m2 << " / " << m3;
            failures.push_back(os.str());
          }
        }
      }
    } else if (key == "contended_ratio_min") {
      const LatencyLeg* s2u = find_latency("s2_uncontended");
      const LatencyLeg* s2c = find_latency("s2_contended");
      if (!s2u || !s2c || s2u->report.median_ns <= 0 ||
          s2c->report.median_ns < value * s2u->report.median_ns) {
        failures.push_back("contended_ratio_min: ratio below " +
                           std::to_string(value));
      }
    } else {
      failures.push_back("unknown assert key: " + key);
    }
  }
  return failures;
}

TopologySummary build_summary(const ScenarioConfig& config) {
  config.validate();
  TopologySummary summary;
  Topology topo(config, config.wire.rate_mbps);
  switch (config.scenario) {
    case ScenarioKind::baseline_dual:
    case ScenarioKind::baseline_single:
    case ScenarioKind::s1: {
      SideFlavor flavor = config.scenario == ScenarioKind::s1
                              ? SideFlavor::checked
                              : SideFlavor::direct;
      StackSide& a = topo.add_stack_side("c1", 1, flavor);
      StackSide& b = topo.add_stack_side("c2", 2, flavor);
      topo.connect(a, b);
      summary.ports = 2;
      summary.wires = 1;
      break;
    }
    case ScenarioKind::s2_uncontended: {
      build_s2(topo, 1);
      summary.ports = 2;
      summary.wires = 1;
      summary.mutex_shared = true;
      break;
    }
    case ScenarioKind::s2_contended: {
      build_s2(topo, 2);
      summary.ports = 2;
      summary.wires = 1;
      summary.mutex_shared = true;
      break;
    }
    case ScenarioKind::fault_demo: {
      StackSide& a = topo.add_stack_side("c1", 1, SideFlavor::checked);
      StackSide& b = topo.add_stack_side("c2", 2, SideFlavor::checked);
      StackSide& c = topo.add_stack_side("c3", 3, SideFlavor::checked);
      StackSide& d = topo.add_stack_side("c4", 4, SideFlavor::checked);
      topo.connect(a, b);
      topo.connect(c, d);
      summary.ports = 4;
      summary.wires = 2;
      break;
    }
  }
  summary.compartments = topo.iv().compartment_count();
  for (int i = 0; i < summary.compartments; ++i) {
    const Capability& ddc = topo.iv().compartment(i).ddc();
    summary.ddc_ranges.emplace_back(ddc.base, ddc.length);
  }
  return summary;
}

}  // namespace capnet
