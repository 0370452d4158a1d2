#include "scenario.hpp"

#include <pthread.h>
#include <sched.h>

#include <chrono>
#include <cstring>
#include <thread>

namespace capnet {

namespace {

uint64_t steady_now_ns() {
  return static_cast<uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(
          std::chrono::steady_clock::now().time_since_epoch())
          .count());
}

void relax_briefly() {
  for (int i = 0; i < 64; ++i) {
#if defined(__x86_64__) || defined(__i386__)
    __builtin_ia32_pause();
#else
    std::this_thread::yield();
#endif
  }
}

CapMutex::SyncOps host_sync_ops() {
  // Plain-thread flavor: the park is a yield, not a sleep, because timer
  // sleeps on this class of host round up to a millisecond and would stall
  // the loop behind any briefly contended ticket.
  CapMutex::SyncOps ops;
  ops.wait = [](const Capability&, uint32_t, uint64_t) {
    std::this_thread::yield();
  };
  ops.wake = [](const Capability&, uint32_t) {};
  return ops;
}

CapMutex::SyncOps compartment_sync_ops(Compartment& c) {
  CapMutex::SyncOps ops;
  ops.wait = [&c](const Capability& word, uint32_t expected,
                  uint64_t timeout_ns) {
    c.sync_wait(word, expected, timeout_ns);
  };
  ops.wake = [&c](const Capability& word, uint32_t count) {
    c.sync_wake(word, count);
  };
  return ops;
}

}  // namespace

Topology::Topology(const ScenarioConfig& cfg, double wire_rate_mbps)
    : cfg_(cfg), wire_rate_mbps_(wire_rate_mbps) {
  arena_ = std::make_unique<Arena>(cfg_.arena_mib << 20, cfg_.granule);
  iv_ = std::make_unique<Intravisor>(*arena_);
  iv_->services().install(
      ServiceId::wire_attach,
      [this](Compartment& caller, CallArgs& args) -> int64_t {
        if (args.caps.empty()) return status::handler_error;
        uint16_t port = static_cast<uint16_t>(args.scalars[0]);
        for (auto& side : stack_sides_) {
          if (side->port == port && side->nic) {
            try {
              side->nic->attach(caller.id(), args.caps[0]);
              return status::ok;
            } catch (const std::exception&) {
              return status::handler_error;
            }
          }
        }
        return status::handler_error;
      });
}

Topology::~Topology() { stop(); }

StackSide& Topology::add_stack_side(const std::string& name, uint16_t port,
                                    SideFlavor flavor, bool publish_entries,
                                    bool shared_coordination) {
  stack_sides_.push_back(std::make_unique<StackSide>());
  StackSide& side = *stack_sides_.back();
  side.name = name;
  side.flavor = flavor;
  side.port = port;

  // Ring and queue sizing scales with the wire rate so transient scheduler
  // stalls (tens of milliseconds on a busy host) never drain the pipeline:
  // roughly 60 ms of line rate end to end, floored at the defaults.
  NicOptions nic_options;
  StackOptions stack_options;
  uint64_t elastic_bytes = static_cast<uint64_t>(
      wire_rate_mbps_ * 1e6 / 8.0 * 0.060);
  uint32_t want_ring = static_cast<uint32_t>(
      elastic_bytes / nic_options.mtu + 1);
  while (nic_options.ring_capacity < want_ring &&
         nic_options.ring_capacity < 16384) {
    nic_options.ring_capacity *= 2;
  }
  stack_options.queue_capacity =
      std::max<size_t>(stack_options.queue_capacity, elastic_bytes);
  side.nic = std::make_unique<VirtualNic>(*arena_, std::vector<uint16_t>{port},
                                          nic_options);

  CreateSpec spec;
  spec.name = name;
  spec.size = cfg_.compartment_mib << 20;
  if (publish_entries) {
    spec.entry_slots = static_cast<size_t>(ApiEntry::count);
  }
  if (shared_coordination) {
    side.mutex_block = iv_->create_shared_region(
        64, Perms{Perm::load, Perm::store}, name + ".mutex");
    side.progress_block = iv_->create_shared_region(
        64, Perms{Perm::load, Perm::store}, name + ".progress");
    spec.grants = {side.mutex_block, side.progress_block};
  }
  side.comp_id = iv_->create_compartment(std::move(spec));
  Compartment& comp = iv_->compartment(side.comp_id);

  if (!shared_coordination) {
    side.mutex_block = comp.alloc(64, Perms{Perm::load, Perm::store});
    side.progress_block = comp.alloc(64, Perms{Perm::load, Perm::store});
  }

  // Rings at the front of the pool, segment staging in its tail: descriptor
  // buffers and submitted frames must all lie inside the attached pool.
  uint64_t ring_bytes = 2ull * nic_options.ring_capacity * nic_options.mtu;
  uint64_t staging_bytes = (stack_options.tx_burst + 4) * nic_options.mtu;
  Capability pool =
      comp.alloc(ring_bytes + staging_bytes, Perms{Perm::load, Perm::store});
  Capability staging = restrict_cap(pool, pool.base + ring_bytes,
                                    staging_bytes,
                                    Perms{Perm::load, Perm::store});

  if (flavor == SideFlavor::direct) {
    side.nic->attach(side.comp_id, pool);
  } else {
    // Boot-time device attach goes through the proxy table like any other
    // host access from a compartment.
    CallArgs args;
    args.scalars[0] = port;
    args.caps.push_back(pool);
    int64_t rc = comp.trampoline(ServiceId::wire_attach, args);
    if (rc != status::ok) {
      throw std::runtime_error(name + ": wire_attach service failed");
    }
  }

  StackInstance::TimeSource time_source;
  CapMutex::SyncOps sync_ops;
  if (flavor == SideFlavor::direct) {
    time_source = [] { return steady_now_ns(); };
    sync_ops = host_sync_ops();
  } else {
    time_source = [&comp] { return comp.clock_ns(); };
    sync_ops = compartment_sync_ops(comp);
  }

  side.stack = std::make_unique<StackInstance>(
      *arena_, *side.nic, port, staging, side.mutex_block, side.progress_block,
      sync_ops, time_source, stack_options,
      flavor == SideFlavor::checked ? iv_.get() : nullptr, side.comp_id);

  if (publish_entries) {
    iv_->set_entries(side.comp_id, side.stack->make_api_entries());
  }
  if (flavor == SideFlavor::checked) {
    side.payload_buf = comp.alloc(256 * 1024, Perms{Perm::load, Perm::store});
  }
  return side;
}

AppSide& Topology::add_app_side(const std::string& name,
                                StackSide& stack_side) {
  auto app = std::make_unique<AppSide>();
  app->name = name;
  app->stack_comp = stack_side.comp_id;
  app->entries = iv_->entry_caps(stack_side.comp_id);
  CreateSpec spec;
  spec.name = name;
  spec.size = cfg_.compartment_mib << 20;
  spec.grants = {stack_side.progress_block};
  spec.granted_entries = app->entries;
  app->comp_id = iv_->create_compartment(std::move(spec));
  Compartment& comp = iv_->compartment(app->comp_id);
  app->progress_block = stack_side.progress_block;
  app->payload_buf = comp.alloc(256 * 1024, Perms{Perm::load, Perm::store});
  app->read_buf = comp.alloc(256 * 1024, Perms{Perm::load, Perm::store});
  app_sides_.push_back(std::move(app));
  return *app_sides_.back();
}

void Topology::connect(StackSide& a, StackSide& b) {
  WireConfig wc;
  wc.rate_mbps = wire_rate_mbps_;
  wc.latency_ns = cfg_.wire.latency_ns;
  wc.loss_probability = cfg_.wire.loss;
  wc.seed = cfg_.seed + wires_.size() + 1;
  if (cfg_.wire.kind == "datagram") {
    udp_wires_.push_back(std::make_unique<DatagramWire>(
        a.nic->port(a.port), cfg_.wire.datagram_host,
        cfg_.wire.datagram_port_a, cfg_.wire.datagram_host,
        cfg_.wire.datagram_port_b, wc));
    udp_wires_.push_back(std::make_unique<DatagramWire>(
        b.nic->port(b.port), cfg_.wire.datagram_host,
        cfg_.wire.datagram_port_b, cfg_.wire.datagram_host,
        cfg_.wire.datagram_port_a, wc));
  } else {
    wires_.push_back(
        std::make_unique<Wire>(a.nic->port(a.port), b.nic->port(b.port), wc));
  }
}

std::vector<Wire*> Topology::wires() {
  std::vector<Wire*> out;
  for (auto& w : wires_) out.push_back(w.get());
  return out;
}

int TurnBaton::add_member() {
  std::lock_guard<std::mutex> g(m_);
  active_.push_back(true);
  return static_cast<int>(active_.size()) - 1;
}

bool TurnBaton::may_run(int id) const {
  if (shutdown_ || turn_ == id) return true;
  for (size_t i = 0; i < active_.size(); ++i) {
    if (static_cast<int>(i) != id && active_[i]) return false;
  }
  return true;  // everyone else retired
}

void TurnBaton::await_turn(int id) {
  std::unique_lock<std::mutex> lk(m_);
  cv_.wait(lk, [&] { return may_run(id); });
}

void TurnBaton::advance_from(int id) {
  int n = static_cast<int>(active_.size());
  for (int k = 1; k <= n; ++k) {
    int next = (id + k) % n;
    if (active_[next]) {
      turn_ = next;
      return;
    }
  }
}

void TurnBaton::pass(int id) {
  std::lock_guard<std::mutex> g(m_);
  if (turn_ == id) advance_from(id);
  cv_.notify_all();
}

void TurnBaton::retire(int id) {
  std::lock_guard<std::mutex> g(m_);
  if (id < static_cast<int>(active_.size())) active_[id] = false;
  if (turn_ == id) advance_from(id);
  cv_.notify_all();
}

void TurnBaton::shutdown() {
  std::lock_guard<std::mutex> g(m_);
  shutdown_ = true;
  cv_.notify_all();
}

namespace {
constexpr uint64_t kBatonBurstNs = 400'000;
}

void Topology::set_side_slices(StackSide& side, std::vector<SliceRef> slices) {
  StackInstance* stack = side.stack.get();
  std::shared_ptr<TurnBaton> baton = baton_;
  int member = baton->add_member();
  iv_->set_body(side.comp_id, [stack, slices, baton, member](Compartment& ctx) {
    stack->set_user_callback([&ctx, slices](StackInstance&) {
      ctx.run_pending_injection();
      for (const SliceRef& s : slices) {
        if (!s.done()) s.step();
      }
    });
    BatonTurn turn(*baton, member);
    while (!ctx.stop_requested()) {
      turn.await();
      if (ctx.stop_requested()) break;
      uint64_t t0 = steady_now_ns();
      do {
        stack->main_loop_iteration();
      } while (!ctx.stop_requested() && steady_now_ns() - t0 < kBatonBurstNs);
      turn.pass();
    }
  });
}

void Topology::set_loop_only_body(StackSide& side) {
  StackInstance* stack = side.stack.get();
  Compartment& comp = iv_->compartment(side.comp_id);
  std::shared_ptr<TurnBaton> baton = baton_;
  int member = baton->add_member();
  iv_->set_body(side.comp_id, [stack, &comp, baton, member](Compartment& ctx) {
    BatonTurn turn(*baton, member);
    while (!ctx.stop_requested()) {
      turn.await();
      if (ctx.stop_requested()) break;
      uint64_t t0 = steady_now_ns();
      do {
        uint64_t now = comp.clock_ns();
        stack->pump_wire(now);
        if (stack->has_pending_work(now)) {
          stack->main_loop_iteration();
        } else {
          relax_briefly();
        }
      } while (!ctx.stop_requested() && steady_now_ns() - t0 < kBatonBurstNs);
      turn.pass();
    }
  });
}

void Topology::set_app_driver(AppSide& app, SliceRef slice,
                              bool baton_member) {
  Capability progress = app.progress_block;
  if (baton_member) {
    std::shared_ptr<TurnBaton> baton = baton_;
    int member = baton->add_member();
    iv_->set_body(app.comp_id, [slice, baton, member](Compartment& ctx) {
      BatonTurn turn(*baton, member);
      while (!ctx.stop_requested() && !slice.done()) {
        turn.await();
        if (ctx.stop_requested() || slice.done()) break;
        uint64_t t0 = steady_now_ns();
        bool progressed = true;
        do {
          ctx.run_pending_injection();
          progressed = slice.step();
        } while (!ctx.stop_requested() && !slice.done() && progressed &&
                 steady_now_ns() - t0 < kBatonBurstNs);
        turn.pass();
      }
    });
    return;
  }
  iv_->set_body(app.comp_id, [slice, progress](Compartment& ctx) {
    uint32_t seen = read_progress(ctx.arena(), progress);
    while (!ctx.stop_requested() && !slice.done()) {
      ctx.run_pending_injection();
      bool progressed = slice.step();
      if (slice.done()) break;
      if (!progressed) {
        seen = wait_progress(ctx, progress, seen, 500'000);
      } else {
        seen = read_progress(ctx.arena(), progress);
      }
    }
  });
}

SocketApi Topology::make_api(StackSide& side) {
  SocketApi api;
  StackInstance* stack = side.stack.get();
  api.max_payload = 200 * 1024;
  api.socket_fn = [stack] { return stack->ff_socket(); };
  api.bind_fn = [stack](int fd, Endpoint ep) { return stack->ff_bind(fd, ep); };
  api.listen_fn = [stack](int fd, int bl) { return stack->ff_listen(fd, bl); };
  api.connect_fn = [stack](int fd, Endpoint ep) {
    return stack->ff_connect(fd, ep);
  };
  api.accept_fn = [stack](int fd) { return stack->ff_accept(fd); };
  api.close_fn = [stack](int fd) { return stack->ff_close(fd); };

  if (side.flavor == SideFlavor::direct) {
    auto payload = std::make_shared<std::vector<uint8_t>>(api.max_payload);
    for (size_t i = 0; i < payload->size(); ++i) {
      (*payload)[i] = static_cast<uint8_t>(i * 131 + 7);
    }
    api.write_prepared = [stack, payload](int fd, size_t n) {
      return stack->ff_write(
          fd, std::span<const uint8_t>(payload->data(),
                                       std::min(n, payload->size())));
    };
    api.read_fn = [stack](int fd, std::span<uint8_t> out) {
      return stack->ff_read(fd, out);
    };
    api.preload = [payload](std::span<const uint8_t> bytes) {
      std::memcpy(payload->data(), bytes.data(),
                  std::min(bytes.size(), payload->size()));
    };
    api.stamp = [payload](uint64_t counter) {
      for (int i = 0; i < 8; ++i) {
        (*payload)[static_cast<size_t>(i)] =
            static_cast<uint8_t>(counter >> (8 * i));
      }
    };
    api.clock_ns = [] { return steady_now_ns(); };
    // Baseline purity: the whole table must stay untouched on the data path.
    Intravisor* iv = iv_.get();
    api.clock_trampolines = [iv] {
      return iv->service_count(ServiceId::clock_read);
    };
  } else {
    Compartment& comp = iv_->compartment(side.comp_id);
    Arena* arena = arena_.get();
    Capability buf = side.payload_buf;
    api.max_payload = std::min<size_t>(api.max_payload, buf.length);
    {
      std::vector<uint8_t> pattern(buf.length);
      for (size_t i = 0; i < pattern.size(); ++i) {
        pattern[i] = static_cast<uint8_t>(i * 131 + 7);
      }
      store(*arena, buf, pattern);
    }
    StackInstance* st = stack;
    api.write_prepared = [st, buf](int fd, size_t n) {
      return st->ff_write(fd, buf, n);
    };
    api.read_fn = [st, arena, buf](int fd, std::span<uint8_t> out) {
      size_t n = std::min(out.size(), static_cast<size_t>(buf.length));
      int64_t r = st->ff_read(fd, buf, n);
      if (r > 0) {
        load(*arena, buf, out.subspan(0, static_cast<size_t>(r)));
      }
      return r;
    };
    api.preload = [arena, buf](std::span<const uint8_t> bytes) {
      size_t n = std::min<size_t>(bytes.size(), buf.length);
      store(*arena, buf, bytes.subspan(0, n));
    };
    api.stamp = [arena, buf](uint64_t counter) {
      uint8_t bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<uint8_t>(counter >> (8 * i));
      store(*arena, buf, std::span<const uint8_t>(bytes, 8));
    };
    Compartment* cp = &comp;
    api.clock_ns = [cp] { return cp->clock_ns(); };
    api.clock_trampolines = [cp] {
      return cp->service_count(ServiceId::clock_read);
    };
  }
  return api;
}

SocketApi Topology::make_remote_api(AppSide& app, StackSide& stack_side) {
  SocketApi api;
  Compartment* comp = &iv_->compartment(app.comp_id);
  Arena* arena = arena_.get();
  int callee = stack_side.comp_id;
  auto entries = std::make_shared<std::vector<Capability>>(app.entries);

  auto entry_cap = [entries](ApiEntry e) -> const Capability& {
    return (*entries)[static_cast<size_t>(e)];
  };

  api.max_payload = std::min<size_t>(200 * 1024, app.payload_buf.length);
  api.socket_fn = [comp, callee, entry_cap] {
    CallArgs args;
    return comp->cross_call(callee, entry_cap(ApiEntry::socket), args);
  };
  api.bind_fn = [comp, callee, entry_cap](int fd, Endpoint ep) {
    CallArgs args;
    args.scalars[0] = static_cast<uint64_t>(fd);
    args.scalars[1] = ep.port;
    args.scalars[2] = ep.stream_id;
    return comp->cross_call(callee, entry_cap(ApiEntry::bind), args);
  };
  api.listen_fn = [comp, callee, entry_cap](int fd, int backlog) {
    CallArgs args;
    args.scalars[0] = static_cast<uint64_t>(fd);
    args.scalars[1] = static_cast<uint64_t>(backlog);
    return comp->cross_call(callee, entry_cap(ApiEntry::listen), args);
  };
  api.connect_fn = [comp, callee, entry_cap](int fd, Endpoint ep) {
    CallArgs args;
    args.scalars[0] = static_cast<uint64_t>(fd);
    args.scalars[1] = ep.port;
    args.scalars[2] = ep.stream_id;
    return comp->cross_call(callee, entry_cap(ApiEntry::connect), args);
  };
  api.accept_fn = [comp, callee, entry_cap](int fd) {
    CallArgs args;
    args.scalars[0] = static_cast<uint64_t>(fd);
    return comp->cross_call(callee, entry_cap(ApiEntry::accept), args);
  };
  api.close_fn = [comp, callee, entry_cap](int fd) {
    CallArgs args;
    args.scalars[0] = static_cast<uint64_t>(fd);
    return comp->cross_call(callee, entry_cap(ApiEntry::close), args);
  };

  Capability wbuf = app.payload_buf;
  {
    std::vector<uint8_t> pattern(wbuf.length);
    for (size_t i = 0; i < pattern.size(); ++i) {
      pattern[i] = static_cast<uint8_t>(i * 131 + 7);
    }
    store(*arena, wbuf, pattern);
  }
  api.write_prepared = [comp, callee, entry_cap, wbuf](int fd, size_t n) {
    // Reused arg pack keeps the hot path allocation-free after first use.
    thread_local CallArgs args;
    args.scalars[0] = static_cast<uint64_t>(fd);
    args.scalars[1] = n;
    args.caps.assign(1, wbuf);
    return comp->cross_call(callee, entry_cap(ApiEntry::write), args);
  };
  Capability rbuf = app.read_buf;
  api.read_fn = [comp, callee, entry_cap, arena, rbuf](int fd,
                                                       std::span<uint8_t> out) {
    thread_local CallArgs args;
    size_t n = std::min(out.size(), static_cast<size_t>(rbuf.length));
    args.scalars[0] = static_cast<uint64_t>(fd);
    args.scalars[1] = n;
    args.caps.assign(1, rbuf);
    int64_t r = comp->cross_call(callee, entry_cap(ApiEntry::read), args);
    if (r > 0) load(*arena, rbuf, out.subspan(0, static_cast<size_t>(r)));
    return r;
  };
  api.preload = [arena, wbuf](std::span<const uint8_t> bytes) {
    size_t n = std::min<size_t>(bytes.size(), wbuf.length);
    store(*arena, wbuf, bytes.subspan(0, n));
  };
  api.stamp = [arena, wbuf](uint64_t counter) {
    uint8_t bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<uint8_t>(counter >> (8 * i));
    store(*arena, wbuf, std::span<const uint8_t>(bytes, 8));
  };
  api.clock_ns = [comp] { return comp->clock_ns(); };
  api.clock_trampolines = [comp] {
    return comp->service_count(ServiceId::clock_read);
  };
  return api;
}

void Topology::start() {
  if (started_) return;
  started_ = true;
  // In-process wires are pumped cooperatively by the stack loops; only the
  // datagram bridges need their own thread.
  for (auto& w : udp_wires_) w->start();
  iv_->start_all();
}

bool Topology::await(const std::vector<std::function<bool()>>& done,
                     uint64_t timeout_ns) {
  uint64_t deadline = steady_now_ns() + timeout_ns;
  for (;;) {
    bool all = true;
    for (const auto& d : done) {
      if (!d()) {
        all = false;
        break;
      }
    }
    if (all) return true;
    if (steady_now_ns() > deadline) return false;
    std::this_thread::sleep_for(std::chrono::microseconds(500));
  }
}

void Topology::stop() {
  if (stopped_) return;
  stopped_ = true;
  if (baton_) baton_->shutdown();
  if (iv_) {
    iv_->request_stop_all();
    iv_->join_all(std::chrono::seconds(10));
  }
  for (auto& w : wires_) w->stop();
  for (auto& w : udp_wires_) w->stop();
}

uint64_t Topology::global_service_calls() const {
  uint64_t total = 0;
  for (size_t i = 0; i < kServiceCount; ++i) {
    total += iv_->service_count(static_cast<ServiceId>(i));
  }
  return total;
}

}  // namespace capnet
