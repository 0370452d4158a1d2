#include "capnet/intravisor.hpp"

#include <chrono>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "capnet/cap_mutex.hpp"

namespace capnet {

namespace {

// Entry otypes start above zero so a zero otype never matches a gate.
constexpr uint32_t kEntryOtypeBase = 0x100;

thread_local RegisterState* tl_active_state = nullptr;

RegisterState& active_state(const Capability& fallback_ddc) {
  if (tl_active_state) return *tl_active_state;
  thread_local RegisterState scratch;
  scratch.ddc = fallback_ddc;
  return scratch;
}

uint64_t steady_now_ns() {
  return static_cast<uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(
          std::chrono::steady_clock::now().time_since_epoch())
          .count());
}

bool within(const Capability& cap, const Capability& region) {
  return cap.base >= region.base && cap.top() <= region.top() &&
         cap.perms.subset_of(region.perms);
}

}  // namespace

const char* to_string(ServiceId sid) {
  switch (sid) {
    case ServiceId::clock_read: return "clock_read";
    case ServiceId::sync_wait: return "sync_wait";
    case ServiceId::sync_wake: return "sync_wake";
    case ServiceId::wire_attach: return "wire_attach";
    case ServiceId::log_write: return "log_write";
    case ServiceId::exit_notify: return "exit_notify";
    case ServiceId::nop: return "nop";
  }
  return "unknown";
}

const char* to_string(CompartmentStatus st) {
  switch (st) {
    case CompartmentStatus::ready: return "READY";
    case CompartmentStatus::running: return "RUNNING";
    case CompartmentStatus::faulted: return "FAULTED";
    case CompartmentStatus::exited: return "EXITED";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Compartment

Compartment::Compartment(Intravisor& iv, int id, std::string name,
                         Capability ddc)
    : iv_(iv), id_(id), name_(std::move(name)), ddc_(ddc) {}

Arena& Compartment::arena() { return iv_.arena(); }

Capability Compartment::alloc(uint64_t size, Perms perms) {
  uint32_t granule = iv_.arena().granule();
  uint64_t aligned = (size + granule - 1) / granule * granule;
  uint64_t offset = alloc_cursor_.fetch_add(aligned, std::memory_order_relaxed);
  if (offset + aligned > ddc_.length) {
    throw std::runtime_error("compartment " + name_ +
                             ": allocation exceeds DDC region");
  }
  return restrict_cap(ddc_, ddc_.base + offset, size, perms);
}

bool Compartment::authorizes(const Capability& cap) const {
  if (!cap.tag || cap.sealed()) return false;
  if (within(cap, ddc_)) return true;
  for (const Capability& g : grants_) {
    if (within(cap, g)) return true;
  }
  return false;
}

int64_t Compartment::trampoline(ServiceId sid, CallArgs& args) {
  return iv_.trampoline_invoke(*this, sid, args);
}

int64_t Compartment::cross_call(int callee_id, const Capability& sealed_entry,
                                CallArgs& args) {
  return iv_.cross_compartment_call(*this, callee_id, sealed_entry, args);
}

uint64_t Compartment::clock_ns() {
  CallArgs args;
  return static_cast<uint64_t>(trampoline(ServiceId::clock_read, args));
}

int64_t Compartment::sync_wait(const Capability& word, uint32_t expected,
                               uint64_t timeout_ns) {
  CallArgs args;
  args.scalars[0] = expected;
  args.scalars[1] = timeout_ns;
  args.caps.push_back(word);
  return trampoline(ServiceId::sync_wait, args);
}

int64_t Compartment::sync_wake(const Capability& word, uint32_t count) {
  CallArgs args;
  args.scalars[0] = count;
  args.caps.push_back(word);
  return trampoline(ServiceId::sync_wake, args);
}

uint64_t Compartment::service_count(ServiceId sid) const {
  return service_counts_[static_cast<size_t>(sid)].load(
      std::memory_order_relaxed);
}

RegisterState Compartment::current_register_state() const {
  return active_state(ddc_);
}

void Compartment::run_pending_injection() {
  if (!injection_armed_.load(std::memory_order_acquire)) return;
  injection_armed_.store(false, std::memory_order_release);
  const InjectionSpec spec = injection_;
  Arena& a = arena();
  uint8_t byte = 0xee;
  switch (spec.kind) {
    case FaultKind::out_of_bounds: {
      Capability past_end = set_address(ddc_, ddc_.top() + spec.offset);
      store(a, past_end, std::span<const uint8_t>(&byte, 1));
      break;
    }
    case FaultKind::permission: {
      Capability read_only =
          restrict_cap(ddc_, ddc_.base, a.granule(), Perms{Perm::load});
      store(a, read_only, std::span<const uint8_t>(&byte, 1));
      break;
    }
    case FaultKind::tag_invalid: {
      Capability slot = restrict_cap(ddc_, ddc_.base, a.granule(),
                                     Perms{Perm::load, Perm::load_cap});
      Capability forged = load_capability(a, slot);
      load(a, forged, std::span<uint8_t>(&byte, 1));
      break;
    }
    case FaultKind::sealed: {
      if (granted_entries_.empty()) {
        throw std::runtime_error("sealed injection needs a granted entry");
      }
      load(a, granted_entries_.front(), std::span<uint8_t>(&byte, 1));
      break;
    }
    default:
      throw std::runtime_error("unsupported injection kind");
  }
}

// ---------------------------------------------------------------------------
// TrampolineTable

void TrampolineTable::install(ServiceId sid, Handler handler) {
  entries_[static_cast<size_t>(sid)].handler = std::move(handler);
}

bool TrampolineTable::installed(ServiceId sid) const {
  return static_cast<bool>(entries_[static_cast<size_t>(sid)].handler);
}

uint64_t TrampolineTable::count(ServiceId sid) const {
  return entries_[static_cast<size_t>(sid)].calls.load(
      std::memory_order_relaxed);
}

void TrampolineTable::set_measured_cost_ns(ServiceId sid, uint64_t ns) {
  entries_[static_cast<size_t>(sid)].cost_ns.store(ns,
                                                   std::memory_order_relaxed);
}

uint64_t TrampolineTable::measured_cost_ns(ServiceId sid) const {
  return entries_[static_cast<size_t>(sid)].cost_ns.load(
      std::memory_order_relaxed);
}

// ---------------------------------------------------------------------------
// SyncTable

std::shared_ptr<SyncTable::Slot> SyncTable::slot_for(uint64_t address) {
  std::lock_guard<std::mutex> g(m_);
  auto& slot = slots_[address];
  if (!slot) slot = std::make_shared<Slot>();
  return slot;
}

int64_t SyncTable::wait(Arena& arena, const Capability& word,
                        uint32_t expected, uint64_t timeout_ns) {
  auto slot = slot_for(word.address);
  std::unique_lock<std::mutex> lk(slot->m);
  if (atomic_load_u32(arena, word) != expected) return 0;
  slot->waiters++;
  if (timeout_ns == 0) {
    slot->cv.wait(lk);
  } else {
    slot->cv.wait_for(lk, std::chrono::nanoseconds(timeout_ns));
  }
  slot->waiters--;
  return 0;
}

int64_t SyncTable::wake(Arena& arena, const Capability& word, uint32_t count) {
  (void)arena;
  auto slot = slot_for(word.address);
  std::lock_guard<std::mutex> g(slot->m);
  int woken = static_cast<int>(
      std::min<uint64_t>(static_cast<uint64_t>(slot->waiters), count));
  if (woken <= 0) return 0;
  if (woken == slot->waiters) {
    slot->cv.notify_all();
  } else {
    for (int i = 0; i < woken; ++i) slot->cv.notify_one();
  }
  return woken;
}

// ---------------------------------------------------------------------------
// Intravisor

Intravisor::Intravisor(Arena& arena)
    : arena_(arena), root_(root_capability(arena)) {
  uint64_t otype_space = std::min<uint64_t>(arena_.size(), 1u << 20);
  seal_authority_ =
      restrict_cap(root_, 0, otype_space, Perms{Perm::seal, Perm::unseal});
  install_core_services();
}

Intravisor::~Intravisor() {
  request_stop_all();
  for (auto& c : compartments_) {
    if (c->thread_.joinable()) c->thread_.join();
  }
}

void Intravisor::install_core_services() {
  table_.install(ServiceId::clock_read, [](Compartment&, CallArgs&) {
    return static_cast<int64_t>(steady_now_ns());
  });
  table_.install(ServiceId::nop,
                 [](Compartment&, CallArgs&) { return int64_t{0}; });
  table_.install(ServiceId::sync_wait, [this](Compartment&, CallArgs& args) {
    if (args.caps.empty()) return status::handler_error;
    return sync_.wait(arena_, args.caps[0],
                      static_cast<uint32_t>(args.scalars[0]), args.scalars[1]);
  });
  table_.install(ServiceId::sync_wake, [this](Compartment&, CallArgs& args) {
    if (args.caps.empty()) return status::handler_error;
    return sync_.wake(arena_, args.caps[0],
                      static_cast<uint32_t>(args.scalars[0]));
  });
  table_.install(ServiceId::log_write, [this](Compartment& c, CallArgs& args) {
    if (args.caps.empty()) return status::handler_error;
    size_t len = static_cast<size_t>(args.scalars[0]);
    std::string line(len, '\0');
    load(arena_, args.caps[0],
         std::span<uint8_t>(reinterpret_cast<uint8_t*>(line.data()), len));
    std::lock_guard<std::mutex> g(log_m_);
    log_lines_.push_back("[" + c.name() + "] " + line);
    return int64_t{0};
  });
  table_.install(ServiceId::exit_notify, [](Compartment&, CallArgs&) {
    return int64_t{0};
  });
}

uint64_t Intravisor::carve(uint64_t size, const char* what) {
  uint32_t granule = arena_.granule();
  uint64_t aligned = (size + granule - 1) / granule * granule;
  uint64_t offset = carve_cursor_.fetch_add(aligned, std::memory_order_relaxed);
  if (offset + aligned > arena_.size()) {
    std::ostringstream os;
    os << "arena exhausted carving " << size << " bytes for " << what << " ("
       << offset << " already assigned of " << arena_.size() << ")";
    throw std::runtime_error(os.str());
  }
  return offset;
}

uint64_t Intravisor::free_bytes() const {
  uint64_t used = carve_cursor_.load(std::memory_order_relaxed);
  return used > arena_.size() ? 0 : arena_.size() - used;
}

uint64_t Intravisor::now_ns() const { return steady_now_ns(); }

uint32_t Intravisor::entry_otype(int compartment_id) const {
  return kEntryOtypeBase + static_cast<uint32_t>(compartment_id);
}

Capability Intravisor::create_shared_region(uint64_t size, Perms perms,
                                            const std::string& name) {
  uint64_t offset = carve(size, name.c_str());
  Capability cap = restrict_cap(root_, offset, size, perms);
  shared_regions_.emplace_back(name, cap);
  return cap;
}

int Intravisor::create_compartment(CreateSpec spec) {
  for (size_t i = 0; i < spec.grants.size(); ++i) {
    for (size_t j = i + 1; j < spec.grants.size(); ++j) {
      const Capability& a = spec.grants[i];
      const Capability& b = spec.grants[j];
      if (a.base < b.top() && b.base < a.top()) {
        throw std::runtime_error("overlapping grant descriptors for " +
                                 spec.name);
      }
    }
  }

  uint64_t offset = carve(spec.size, spec.name.c_str());
  Capability ddc = restrict_cap(
      root_, offset, spec.size,
      Perms{Perm::load, Perm::store, Perm::load_cap, Perm::store_cap});

  int id = static_cast<int>(compartments_.size());
  auto comp = std::unique_ptr<Compartment>(
      new Compartment(*this, id, spec.name, ddc));
  comp->grants_ = std::move(spec.grants);
  comp->granted_entries_ = std::move(spec.granted_entries);
  comp->body_ = std::move(spec.body);
  comp->entry_specs_ = std::move(spec.entries);
  if (comp->entry_specs_.empty() && spec.entry_slots > 0) {
    comp->entry_specs_.resize(spec.entry_slots);
  }

  if (!comp->entry_specs_.empty()) {
    uint64_t n = comp->entry_specs_.size();
    uint64_t entry_base = carve(n, "entry table");
    Capability table =
        restrict_cap(root_, entry_base, n, Perms{Perm::execute});
    uint32_t otype = entry_otype(id);
    if (!seal_authority_.covers(otype, 1)) {
      throw std::runtime_error("otype space exhausted; arena too small");
    }
    for (uint64_t i = 0; i < n; ++i) {
      Capability slot = set_address(table, entry_base + i);
      comp->published_entries_.push_back(seal(slot, seal_authority_, otype));
    }
  }

  compartments_.push_back(std::move(comp));
  return id;
}

void Intravisor::set_body(int id, CompartmentBody body) {
  Compartment& c = compartment(id);
  if (c.thread_.joinable()) {
    throw std::runtime_error("cannot set body after start");
  }
  c.body_ = std::move(body);
}

void Intravisor::set_entries(int id, std::vector<EntrySpec> entries) {
  Compartment& c = compartment(id);
  if (c.thread_.joinable()) {
    throw std::runtime_error("cannot set entries after start");
  }
  if (entries.size() != c.entry_specs_.size()) {
    throw std::runtime_error("entry count differs from published slots");
  }
  c.entry_specs_ = std::move(entries);
}

Compartment& Intravisor::compartment(int id) {
  if (id < 0 || id >= static_cast<int>(compartments_.size())) {
    throw std::out_of_range("unknown compartment id");
  }
  return *compartments_[static_cast<size_t>(id)];
}

const Compartment& Intravisor::compartment(int id) const {
  if (id < 0 || id >= static_cast<int>(compartments_.size())) {
    throw std::out_of_range("unknown compartment id");
  }
  return *compartments_[static_cast<size_t>(id)];
}

const std::vector<Capability>& Intravisor::entry_caps(int id) const {
  return compartment(id).published_entries_;
}

void Intravisor::thread_main(Compartment& c) {
  RegisterState state;
  state.ddc = c.ddc_;
  tl_active_state = &state;
  c.thread_id_ = std::this_thread::get_id();
  c.status_.store(CompartmentStatus::running, std::memory_order_release);
  try {
    if (c.body_) c.body_(c);
    CompartmentStatus expected = CompartmentStatus::running;
    c.status_.compare_exchange_strong(expected, CompartmentStatus::exited);
  } catch (const CapFault& fault) {
    handle_fault(c.id_, fault, "compartment body");
  } catch (const std::exception& e) {
    std::lock_guard<std::mutex> g(log_m_);
    log_lines_.push_back("[" + c.name_ + "] host exception: " + e.what());
    CompartmentStatus expected = CompartmentStatus::running;
    c.status_.compare_exchange_strong(expected, CompartmentStatus::exited);
  }
  tl_active_state = nullptr;
  c.done_.store(true, std::memory_order_release);
}

void Intravisor::start(int id) {
  Compartment& c = compartment(id);
  if (c.thread_.joinable()) throw std::runtime_error("compartment already started");
  c.thread_ = std::thread([this, &c] { thread_main(c); });
}

void Intravisor::start_all() {
  for (auto& c : compartments_) {
    if (!c->thread_.joinable() && c->body_) start(c->id_);
  }
}

void Intravisor::request_stop(int id) {
  compartment(id).stop_.store(true, std::memory_order_release);
}

void Intravisor::request_stop_all() {
  for (auto& c : compartments_) c->stop_.store(true, std::memory_order_release);
}

std::vector<int> Intravisor::join_all(std::chrono::nanoseconds timeout) {
  std::vector<int> stragglers;
  auto deadline = std::chrono::steady_clock::now() + timeout;
  for (auto& c : compartments_) {
    if (!c->thread_.joinable()) continue;
    while (!c->done_.load(std::memory_order_acquire) &&
           std::chrono::steady_clock::now() < deadline) {
      std::this_thread::sleep_for(std::chrono::microseconds(200));
    }
    if (c->done_.load(std::memory_order_acquire)) {
      c->thread_.join();
    } else {
      stragglers.push_back(c->id_);
    }
  }
  return stragglers;
}

CompartmentStatus Intravisor::status(int id) const {
  return compartment(id).status();
}

bool Intravisor::wait_for_status(int id, CompartmentStatus st,
                                 std::chrono::nanoseconds timeout) const {
  auto deadline = std::chrono::steady_clock::now() + timeout;
  while (std::chrono::steady_clock::now() < deadline) {
    if (status(id) == st) return true;
    std::this_thread::sleep_for(std::chrono::microseconds(100));
  }
  return status(id) == st;
}

void Intravisor::handle_fault(int id, const CapFault& fault,
                              std::string_view context) {
  Compartment& c = compartment(id);
  const Capability& cap = fault.capability();
  FaultRecord rec;
  rec.compartment_id = id;
  rec.kind = fault.kind();
  rec.address = cap.address;
  rec.base = cap.base;
  rec.length = cap.length;
  rec.service_context = std::string(context) + ": " + fault.detail();
  rec.timestamp_ns = now_ns();

  std::function<void(const FaultRecord&)> sink;
  {
    std::lock_guard<std::mutex> g(faults_m_);
    fault_records_.push_back(rec);
    sink = fault_sink_;
  }
  c.status_.store(CompartmentStatus::faulted, std::memory_order_release);
  c.stop_.store(true, std::memory_order_release);

  // Hand off any lock still attributed to the dead compartment.
  std::vector<CapMutex*> to_release;
  {
    std::lock_guard<std::mutex> g(locks_m_);
    for (auto& [lock, holder] : held_locks_) {
      if (holder == id) to_release.push_back(lock);
    }
    for (CapMutex* lock : to_release) held_locks_.erase(lock);
  }
  for (CapMutex* lock : to_release) lock->force_release();

  if (sink) sink(rec);
}

std::vector<FaultRecord> Intravisor::fault_records() const {
  std::lock_guard<std::mutex> g(faults_m_);
  return fault_records_;
}

void Intravisor::set_fault_sink(std::function<void(const FaultRecord&)> sink) {
  std::lock_guard<std::mutex> g(faults_m_);
  fault_sink_ = std::move(sink);
}

void Intravisor::inject_fault(int id, FaultKind kind, uint64_t offset) {
  Compartment& c = compartment(id);
  if (kind == FaultKind::sealed && c.granted_entries_.empty()) {
    throw std::runtime_error("sealed injection needs a granted entry");
  }
  c.injection_ = InjectionSpec{kind, offset};
  c.injection_armed_.store(true, std::memory_order_release);
}

void Intravisor::lock_acquired(CapMutex* lock, int holder_id) {
  std::lock_guard<std::mutex> g(locks_m_);
  held_locks_[lock] = holder_id;
}

void Intravisor::lock_released(CapMutex* lock) {
  std::lock_guard<std::mutex> g(locks_m_);
  held_locks_.erase(lock);
}

int64_t Intravisor::trampoline_invoke(Compartment& caller, ServiceId sid,
                                      CallArgs& args) {
  auto& entry = table_.entries_[static_cast<size_t>(sid)];
  if (!entry.handler) return status::unknown_service;
  for (const Capability& cap : args.caps) {
    if (!caller.authorizes(cap)) return status::not_authorized;
  }

  RegisterState& active = active_state(caller.ddc_);
  RegisterState saved = active;
  // Pass through the service id and arguments, then run with supervisor
  // authority.
  active.gpr[0] = static_cast<uint64_t>(sid);
  for (size_t i = 0; i < args.scalars.size(); ++i) {
    active.gpr[i + 1] = args.scalars[i];
  }
  active.ddc = root_;
  active.return_token = token_seq_.fetch_add(1, std::memory_order_relaxed);
  if (std::this_thread::get_id() == caller.thread_id_) {
    caller.saved_state_ = saved;
  }

  int64_t result;
  try {
    result = entry.handler(caller, args);
  } catch (const CapFault&) {
    active = saved;
    return status::handler_error;
  }

  active = saved;
  active.gpr[0] = static_cast<uint64_t>(result);
  entry.calls.fetch_add(1, std::memory_order_relaxed);
  caller.service_counts_[static_cast<size_t>(sid)].fetch_add(
      1, std::memory_order_relaxed);
  return result;
}

int64_t Intravisor::cross_compartment_call(Compartment& caller, int callee_id,
                                           const Capability& sealed_entry,
                                           CallArgs& args) {
  if (callee_id < 0 || callee_id >= static_cast<int>(compartments_.size())) {
    return status::unknown_compartment;
  }
  Compartment& callee = *compartments_[static_cast<size_t>(callee_id)];
  if (callee.status() == CompartmentStatus::faulted) {
    return status::callee_faulted;
  }

  Capability entry;
  try {
    entry = unseal(sealed_entry, seal_authority_, entry_otype(callee_id));
  } catch (const CapFault&) {
    return status::bad_entry_otype;
  }
  uint64_t index = entry.address - entry.base;
  if (index >= callee.entry_specs_.size()) return status::unknown_entry;
  if (!callee.entry_specs_[index].fn) return status::unknown_entry;

  for (const Capability& cap : args.caps) {
    if (!caller.authorizes(cap)) return status::not_authorized;
  }
  EntrySpec& spec = callee.entry_specs_[index];
  // Semantic argument checks run before the transition and fault the caller.
  if (spec.validate) spec.validate(caller, args);

  RegisterState& active = active_state(caller.ddc_);
  RegisterState saved = active;
  active.ddc = callee.ddc_;
  active.entry = entry;
  active.return_token = token_seq_.fetch_add(1, std::memory_order_relaxed);
  if (std::this_thread::get_id() == caller.thread_id_) {
    caller.saved_state_ = saved;
  }

  int64_t result;
  try {
    result = spec.fn(callee, args);
  } catch (const CapFault& fault) {
    handle_fault(callee_id, fault, "entry " + spec.name);
    result = status::callee_faulted;
  } catch (...) {
    active = saved;
    throw;
  }

  active = saved;
  active.gpr[0] = static_cast<uint64_t>(result);
  caller.cross_calls_.fetch_add(1, std::memory_order_relaxed);
  return result;
}

}  // namespace capnet
