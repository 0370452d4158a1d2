#pragma once

#include <array>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "capnet/capmem.hpp"

/// Compartment supervisor. Owns the arena authority, carves compartment
/// regions, distributes capabilities, and mediates every host-service access
/// through a trampoline table. Compartments run as threads of this process;
/// capability faults raised by compartment code are contained here and never
/// take the process down.
namespace capnet {

class Intravisor;
class Compartment;
class CapMutex;

/// Closed set of host services reachable through the trampoline table.
enum class ServiceId : uint32_t {
  clock_read = 0,
  sync_wait,
  sync_wake,
  wire_attach,
  log_write,
  exit_notify,
  nop,
};
inline constexpr size_t kServiceCount = 7;

const char* to_string(ServiceId sid);

/// Scalars plus capability arguments crossing a trampoline or entry gate.
struct CallArgs {
  std::array<uint64_t, 4> scalars{};
  std::vector<Capability> caps;
};

/// Negative status codes returned by trampolines, cross-compartment calls
/// and the socket API. Zero and positive values are operation results.
namespace status {
inline constexpr int64_t ok = 0;
inline constexpr int64_t would_block = -11;
inline constexpr int64_t in_progress = -12;
inline constexpr int64_t refused = -13;
inline constexpr int64_t bad_fd = -14;
inline constexpr int64_t bad_state = -15;
inline constexpr int64_t addr_in_use = -16;
inline constexpr int64_t msg_too_big = -17;
inline constexpr int64_t unknown_service = -100;
inline constexpr int64_t unknown_compartment = -101;
inline constexpr int64_t unknown_entry = -102;
inline constexpr int64_t bad_entry_otype = -103;
inline constexpr int64_t not_authorized = -104;
inline constexpr int64_t callee_faulted = -105;
inline constexpr int64_t handler_error = -106;
}  // namespace status

/// Snapshot of the executing context saved around every mediated transition
/// and restored on return, except the designated return-value slot gpr[0].
struct RegisterState {
  std::array<uint64_t, 8> gpr{};
  Capability ddc;
  Capability entry;
  uint64_t return_token = 0;
};

enum class CompartmentStatus : uint8_t { ready, running, faulted, exited };

const char* to_string(CompartmentStatus st);

/// Structured record of a contained capability fault.
struct FaultRecord {
  int compartment_id = -1;
  FaultKind kind = FaultKind::out_of_bounds;
  uint64_t address = 0;
  uint64_t base = 0;
  uint64_t length = 0;
  std::string service_context;
  uint64_t timestamp_ns = 0;
};

/// A deliberately bad access a compartment performs at its next callback
/// poll, used by the fault containment demonstrations.
struct InjectionSpec {
  FaultKind kind = FaultKind::out_of_bounds;
  uint64_t offset = 1;
};

using CompartmentBody = std::function<void(Compartment&)>;
using EntryFn = std::function<int64_t(Compartment& callee, CallArgs&)>;
/// Runs before the domain transition with the caller attributed; throws
/// CapFault to reject semantically bad capability arguments.
using EntryValidator = std::function<void(Compartment& caller, const CallArgs&)>;

struct EntrySpec {
  std::string name;
  EntryFn fn;
  EntryValidator validate;
};

struct CreateSpec {
  std::string name;
  uint64_t size = 0;
  CompartmentBody body;
  std::vector<EntrySpec> entries;
  /// Publishes this many sealed entry capabilities at creation when the
  /// entry functions themselves are bound later via set_entries (they often
  /// close over objects allocated from the new compartment's region).
  size_t entry_slots = 0;
  /// Capabilities to shared regions this compartment may use.
  std::vector<Capability> grants;
  /// Sealed entry capabilities of other compartments, distributed here.
  std::vector<Capability> granted_entries;
};

/// One isolated execution context. Compartment code receives a reference to
/// its own Compartment and nothing else; every capability it can use derives
/// from ddc(), grants() or granted_entries().
class Compartment {
 public:
  int id() const { return id_; }
  const std::string& name() const { return name_; }
  CompartmentStatus status() const { return status_.load(std::memory_order_acquire); }
  const Capability& ddc() const { return ddc_; }
  const std::vector<Capability>& grants() const { return grants_; }
  const std::vector<Capability>& granted_entries() const { return granted_entries_; }
  Arena& arena();

  /// Bump-allocates a granule-aligned region inside this compartment's DDC.
  Capability alloc(uint64_t size, Perms perms);

  /// True when `cap` lies within this compartment's DDC or one of its
  /// granted regions; the gate check for capability arguments.
  bool authorizes(const Capability& cap) const;

  int64_t trampoline(ServiceId sid, CallArgs& args);
  int64_t cross_call(int callee_id, const Capability& sealed_entry,
                     CallArgs& args);

  /// Monotonic nanoseconds via the clock_read trampoline.
  uint64_t clock_ns();
  int64_t sync_wait(const Capability& word, uint32_t expected,
                    uint64_t timeout_ns);
  int64_t sync_wake(const Capability& word, uint32_t count);

  bool stop_requested() const { return stop_.load(std::memory_order_acquire); }

  /// Executes a pending injected access, if armed. Called by compartment
  /// loops at callback boundaries; the access goes through capmem and the
  /// resulting fault propagates like any other.
  void run_pending_injection();

  uint64_t service_count(ServiceId sid) const;
  uint64_t cross_call_count() const {
    return cross_calls_.load(std::memory_order_relaxed);
  }
  const RegisterState& saved_state() const { return saved_state_; }
  /// Snapshot of the calling thread's live register state; lets compartment
  /// code observe that mediated transitions restore everything but the
  /// return-value slot.
  RegisterState current_register_state() const;

 private:
  friend class Intravisor;
  Compartment(Intravisor& iv, int id, std::string name, Capability ddc);

  Intravisor& iv_;
  int id_;
  std::string name_;
  Capability ddc_;
  std::vector<Capability> grants_;
  std::vector<Capability> granted_entries_;
  std::vector<EntrySpec> entry_specs_;
  std::vector<Capability> published_entries_;
  CompartmentBody body_;

  std::atomic<CompartmentStatus> status_{CompartmentStatus::ready};
  std::atomic<bool> stop_{false};
  std::atomic<bool> done_{false};
  std::thread thread_;
  std::thread::id thread_id_;

  std::atomic<uint64_t> alloc_cursor_{0};
  std::array<std::atomic<uint64_t>, kServiceCount> service_counts_{};
  std::atomic<uint64_t> cross_calls_{0};

  RegisterState saved_state_;

  std::atomic<bool> injection_armed_{false};
  InjectionSpec injection_{};
};

/// Trampoline proxy table: service handlers plus per-service call counters
/// and a measured per-call cost slot filled by the overhead benchmark.
class TrampolineTable {
 public:
  using Handler = std::function<int64_t(Compartment& caller, CallArgs&)>;

  void install(ServiceId sid, Handler handler);
  bool installed(ServiceId sid) const;
  uint64_t count(ServiceId sid) const;
  void set_measured_cost_ns(ServiceId sid, uint64_t ns);
  uint64_t measured_cost_ns(ServiceId sid) const;

 private:
  friend class Intravisor;
  struct Entry {
    Handler handler;
    std::atomic<uint64_t> calls{0};
    std::atomic<uint64_t> cost_ns{0};
  };
  std::array<Entry, kServiceCount> entries_;
};

/// Futex-analog blocking primitive keyed by arena address. WAIT blocks while
/// the word still holds the expected value; spurious wakeups are permitted
/// and callers revalidate.
class SyncTable {
 public:
  int64_t wait(Arena& arena, const Capability& word, uint32_t expected,
               uint64_t timeout_ns);
  int64_t wake(Arena& arena, const Capability& word, uint32_t count);

 private:
  struct Slot {
    std::mutex m;
    std::condition_variable cv;
    int waiters = 0;
  };
  std::shared_ptr<Slot> slot_for(uint64_t address);

  std::mutex m_;
  std::map<uint64_t, std::shared_ptr<Slot>> slots_;
};

class Intravisor {
 public:
  explicit Intravisor(Arena& arena);
  ~Intravisor();

  Intravisor(const Intravisor&) = delete;
  Intravisor& operator=(const Intravisor&) = delete;

  Arena& arena() { return arena_; }

  /// Carves a region outside any compartment DDC and returns full authority
  /// over it; the harness derives per-compartment grant capabilities from it.
  Capability create_shared_region(uint64_t size, Perms perms,
                                  const std::string& name);

  int create_compartment(CreateSpec spec);
  /// Late binding for bodies and entry functions that close over objects
  /// allocated inside the new compartment; only valid before start().
  void set_body(int id, CompartmentBody body);
  void set_entries(int id, std::vector<EntrySpec> entries);
  Compartment& compartment(int id);
  const Compartment& compartment(int id) const;
  int compartment_count() const { return static_cast<int>(compartments_.size()); }
  /// Sealed entry capabilities published for a compartment at creation.
  const std::vector<Capability>& entry_caps(int id) const;

  void start(int id);
  void start_all();
  void request_stop(int id);
  void request_stop_all();
  /// Joins every compartment thread; returns ids that failed to stop in time.
  std::vector<int> join_all(std::chrono::nanoseconds timeout);

  CompartmentStatus status(int id) const;
  bool wait_for_status(int id, CompartmentStatus st,
                       std::chrono::nanoseconds timeout) const;

  TrampolineTable& services() { return table_; }
  SyncTable& sync() { return sync_; }
  uint64_t service_count(ServiceId sid) const { return table_.count(sid); }

  /// Marks the compartment faulted, records the report, releases any
  /// registry-tracked locks it held and leaves every other compartment
  /// running.
  void handle_fault(int id, const CapFault& fault, std::string_view context);
  std::vector<FaultRecord> fault_records() const;
  void set_fault_sink(std::function<void(const FaultRecord&)> sink);

  /// Arms an injected bad access in the target compartment.
  void inject_fault(int id, FaultKind kind, uint64_t offset);

  /// Lock registry used for fault cleanup.
  void lock_acquired(CapMutex* lock, int holder_id);
  void lock_released(CapMutex* lock);

  uint64_t free_bytes() const;
  uint64_t now_ns() const;

  int64_t trampoline_invoke(Compartment& caller, ServiceId sid,
                            CallArgs& args);
  int64_t cross_compartment_call(Compartment& caller, int callee_id,
                                 const Capability& sealed_entry,
                                 CallArgs& args);

 private:
  friend class Compartment;

  uint64_t carve(uint64_t size, const char* what);
  uint32_t entry_otype(int compartment_id) const;
  void thread_main(Compartment& c);
  void install_core_services();

  Arena& arena_;
  Capability root_;
  Capability seal_authority_;
  std::atomic<uint64_t> carve_cursor_{0};

  std::vector<std::unique_ptr<Compartment>> compartments_;
  std::vector<std::pair<std::string, Capability>> shared_regions_;

  TrampolineTable table_;
  SyncTable sync_;

  mutable std::mutex faults_m_;
  std::vector<FaultRecord> fault_records_;
  std::function<void(const FaultRecord&)> fault_sink_;

  std::mutex locks_m_;
  std::map<CapMutex*, int> held_locks_;

  std::mutex log_m_;
  std::vector<std::string> log_lines_;

  std::atomic<uint64_t> token_seq_{0};
};

}  // namespace capnet
