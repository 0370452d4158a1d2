#pragma once

// Internal topology plumbing shared by harness.cpp and the tests that poke
// at scenario construction. Not installed.

#include <condition_variable>
#include <memory>
#include <mutex>
#include <vector>

#include "capnet/bench.hpp"
#include "capnet/harness.hpp"
#include "capnet/netstack.hpp"
#include "capnet/wire.hpp"

namespace capnet {

// Data-path flavor of one stack side.
enum class SideFlavor {
  direct,   // baseline: span API, host clock, no trampolines
  checked,  // compartmentalized: capability API, trampoline clock and attach
};

struct StackSide {
  std::string name;
  SideFlavor flavor = SideFlavor::direct;
  int comp_id = -1;
  uint16_t port = 0;
  std::unique_ptr<VirtualNic> nic;
  std::unique_ptr<StackInstance> stack;
  Capability mutex_block;
  Capability progress_block;
  Capability payload_buf;  // prepared write buffer for checked flavors
};

struct AppSide {
  std::string name;
  int comp_id = -1;
  int stack_comp = -1;
  std::vector<Capability> entries;
  Capability progress_block;
  Capability payload_buf;
  Capability read_buf;
};

struct SliceRef {
  std::function<bool()> step;
  std::function<bool()> done;
};

/// Rotation token for stack-loop threads. Hosts that multiplex vCPUs stall
/// a second busy thread in tens-of-millisecond chunks, so only the baton
/// holder polls while the other members block; the wire's burst capacity
/// bridges the handoff gaps. Members are real threads throughout, the baton
/// only schedules their polling.
class TurnBaton {
 public:
  int add_member();
  void await_turn(int id);
  void pass(int id);
  void retire(int id);
  void shutdown();

 private:
  bool may_run(int id) const;
  void advance_from(int id);

  mutable std::mutex m_;
  std::condition_variable cv_;
  std::vector<bool> active_;
  int turn_ = 0;
  bool shutdown_ = false;
};

/// RAII membership so a faulting compartment retires on unwind.
class BatonTurn {
 public:
  BatonTurn(TurnBaton& baton, int id) : baton_(baton), id_(id) {}
  ~BatonTurn() { baton_.retire(id_); }
  void await() { baton_.await_turn(id_); }
  void pass() { baton_.pass(id_); }

 private:
  TurnBaton& baton_;
  int id_;
};

class Topology {
 public:
  explicit Topology(const ScenarioConfig& cfg, double wire_rate_mbps);
  ~Topology();

  Arena& arena() { return *arena_; }
  Intravisor& iv() { return *iv_; }

  // Builders; call before start().
  StackSide& add_stack_side(const std::string& name, uint16_t port,
                            SideFlavor flavor, bool publish_entries = false,
                            bool shared_coordination = false);
  AppSide& add_app_side(const std::string& name, StackSide& stack_side);
  void connect(StackSide& a, StackSide& b);
  void set_side_slices(StackSide& side, std::vector<SliceRef> slices);
  /// Dedicated pump loop for a stack compartment that serves cross
  /// compartment callers only (scenario 2): takes the mutex only when rings
  /// or timers actually have work.
  void set_loop_only_body(StackSide& side);
  /// App compartment driver. Bandwidth-style slices join the turn baton so
  /// only one vCPU is ever busy; latency slices free-run because genuine
  /// mutex contention between app threads is what those legs measure.
  void set_app_driver(AppSide& app, SliceRef slice, bool baton_member);

  SocketApi make_api(StackSide& side);        // direct or checked
  SocketApi make_remote_api(AppSide& app, StackSide& stack_side);

  void start();
  // Polls the given done-flags; returns false on deadline.
  bool await(const std::vector<std::function<bool()>>& done,
             uint64_t timeout_ns);
  void stop();

  uint64_t global_service_calls() const;
  double wire_rate_mbps() const { return wire_rate_mbps_; }
  /// Pin stack loop threads onto one shared core (bandwidth legs).
  void set_pin_loops(bool pin) { pin_loops_ = pin; }
  const ScenarioConfig& cfg() const { return cfg_; }
  std::vector<Wire*> wires();

 private:
  friend TopologySummary build_summary(const ScenarioConfig&);

  ScenarioConfig cfg_;
  double wire_rate_mbps_;
  std::unique_ptr<Arena> arena_;
  std::unique_ptr<Intravisor> iv_;
  std::vector<std::unique_ptr<StackSide>> stack_sides_;
  std::vector<std::unique_ptr<AppSide>> app_sides_;
  std::vector<std::unique_ptr<Wire>> wires_;
  std::vector<std::unique_ptr<DatagramWire>> udp_wires_;
  std::shared_ptr<TurnBaton> baton_ = std::make_shared<TurnBaton>();
  bool started_ = false;
  bool stopped_ = false;
  bool pin_loops_ = false;
};

}  // namespace capnet
