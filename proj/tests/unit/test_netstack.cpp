#include <doctest.h>

#include <atomic>
#include <cstring>
#include <memory>
#include <thread>

#include "capnet/bench.hpp"
#include "capnet/netstack.hpp"
#include "capnet/wire.hpp"

using namespace capnet;

namespace {

// Two stacks over a manually pumped wire with a controllable clock, so
// handshakes, retransmission timers and loss are all deterministic.
struct NetRig {
  explicit NetRig(double rate_mbps = 10'000, double loss = 0.0,
                  uint64_t seed = 1) {
    arena = std::make_unique<Arena>(64ull << 20);
    root = root_capability(*arena);
    nic_a = std::make_unique<VirtualNic>(*arena, std::vector<uint16_t>{1});
    nic_b = std::make_unique<VirtualNic>(*arena, std::vector<uint16_t>{2});
    // Rings up front, staging in the tail; everything inside the pool.
    Capability pool_a = carve(kPoolBytes);
    Capability pool_b = carve(kPoolBytes);
    nic_a->attach(0, pool_a);
    nic_b->attach(1, pool_b);
    staging_a = restrict_cap(pool_a, pool_a.base + kRingBytes, kStagingBytes,
                             Perms{Perm::load, Perm::store});
    staging_b = restrict_cap(pool_b, pool_b.base + kRingBytes, kStagingBytes,
                             Perms{Perm::load, Perm::store});
    WireConfig wc;
    wc.rate_mbps = rate_mbps;
    wc.latency_ns = 0;
    wc.loss_probability = loss;
    wc.seed = seed;
    wire = std::make_unique<Wire>(nic_a->port(1), nic_b->port(2), wc);

    now = 1'000'000;
    auto clock = [this] { return now; };
    CapMutex::SyncOps ops;  // host flavor; these tests never park
    a = std::make_unique<StackInstance>(
        *arena, *nic_a, 1, staging_a, carve(64), carve(64), ops, clock);
    b = std::make_unique<StackInstance>(
        *arena, *nic_b, 2, staging_b, carve(64), carve(64), ops, clock);
  }

  Capability carve(uint64_t bytes) {
    Capability cap =
        restrict_cap(root, next_, bytes, Perms{Perm::load, Perm::store});
    next_ += (bytes + 31) / 32 * 32;
    return cap;
  }

  Capability data_buf(uint64_t bytes) { return carve(bytes); }

  // One round: both stacks take a turn, then the wire moves frames.
  void pump(int rounds = 1, uint64_t step_ns = 10'000) {
    for (int i = 0; i < rounds; ++i) {
      a->main_loop_iteration();
      b->main_loop_iteration();
      now += step_ns;
      wire->pump(now);
    }
  }

  // Server on b, client on a; returns {client_fd, server_fd}.
  std::pair<int, int> establish(uint32_t listen_id = 5) {
    int ls = static_cast<int>(b->ff_socket());
    REQUIRE(b->ff_bind(ls, Endpoint{2, listen_id}) == status::ok);
    REQUIRE(b->ff_listen(ls, 4) == status::ok);
    int cfd = static_cast<int>(a->ff_socket());
    REQUIRE(a->ff_connect(cfd, Endpoint{2, listen_id}) == status::in_progress);
    int sfd = -1;
    for (int i = 0; i < 50 && sfd < 0; ++i) {
      pump();
      int64_t r = b->ff_accept(ls);
      if (r >= 0) sfd = static_cast<int>(r);
    }
    REQUIRE(sfd >= 0);
    REQUIRE(a->ff_connect(cfd, Endpoint{2, listen_id}) == status::ok);
    REQUIRE(a->socket_state(cfd) == SockState::established);
    listen_fd = ls;
    return {cfd, sfd};
  }

  static constexpr uint64_t kRingBytes = 2ull * 1024 * 1500;
  static constexpr uint64_t kStagingBytes = 40ull * 1500;
  static constexpr uint64_t kPoolBytes = kRingBytes + kStagingBytes;

  std::unique_ptr<Arena> arena;
  Capability root;
  Capability staging_a, staging_b;
  uint64_t next_ = 0;
  std::unique_ptr<VirtualNic> nic_a, nic_b;
  std::unique_ptr<Wire> wire;
  std::unique_ptr<StackInstance> a, b;
  uint64_t now = 0;
  int listen_fd = -1;
};

std::vector<uint8_t> pattern_bytes(size_t n, uint8_t salt = 0) {
  std::vector<uint8_t> v(n);
  for (size_t i = 0; i < n; ++i) v[i] = static_cast<uint8_t>(i * 37 + salt);
  return v;
}

}  // namespace

TEST_CASE("stream header encoding is bit-exact little endian") {
  StreamHeader hdr;
  hdr.type = StreamFrameType::data;
  hdr.stream_id = 0x04030201;
  hdr.seq = 0x08070605;
  hdr.ack = 0x0c0b0a09;
  hdr.length = 0x0e0d;
  uint8_t buf[kStreamHeaderBytes];
  encode_stream_header(buf, hdr);
  const uint8_t expect[kStreamHeaderBytes] = {4,    0x01, 0x02, 0x03, 0x04,
                                              0x05, 0x06, 0x07, 0x08, 0x09,
                                              0x0a, 0x0b, 0x0c, 0x0d, 0x0e};
  CHECK(std::memcmp(buf, expect, sizeof expect) == 0);

  std::vector<uint8_t> frame(kStreamHeaderBytes + 0x0e0d, 0);
  std::memcpy(frame.data(), buf, kStreamHeaderBytes);
  StreamHeader out;
  REQUIRE(decode_stream_header(frame, out));
  CHECK(out.type == hdr.type);
  CHECK(out.stream_id == hdr.stream_id);
  CHECK(out.seq == hdr.seq);
  CHECK(out.ack == hdr.ack);
  CHECK(out.length == hdr.length);
}

TEST_CASE("canonical handshake establishes a pair") {
  NetRig rig;
  auto [cfd, sfd] = rig.establish();
  CHECK(rig.a->socket_state(cfd) == SockState::established);
  CHECK(rig.b->socket_state(sfd) == SockState::established);
}

TEST_CASE("accept on an empty backlog would block") {
  NetRig rig;
  int ls = static_cast<int>(rig.b->ff_socket());
  REQUIRE(rig.b->ff_bind(ls, Endpoint{2, 9}) == status::ok);
  REQUIRE(rig.b->ff_listen(ls, 2) == status::ok);
  CHECK(rig.b->ff_accept(ls) == status::would_block);
}

TEST_CASE("connect to a non-listening endpoint is refused by reset") {
  NetRig rig;
  int cfd = static_cast<int>(rig.a->ff_socket());
  REQUIRE(rig.a->ff_connect(cfd, Endpoint{2, 99}) == status::in_progress);
  int64_t st = status::in_progress;
  for (int i = 0; i < 50 && st == status::in_progress; ++i) {
    rig.pump();
    st = rig.a->ff_connect(cfd, Endpoint{2, 99});
  }
  CHECK(st == status::refused);
  CHECK(rig.a->socket_state(cfd) == SockState::closed);
}

TEST_CASE("bind and listen enforce state and uniqueness") {
  NetRig rig;
  int s1 = static_cast<int>(rig.b->ff_socket());
  int s2 = static_cast<int>(rig.b->ff_socket());
  CHECK(rig.b->ff_listen(s1, 4) == status::bad_state);  // listen before bind
  REQUIRE(rig.b->ff_bind(s1, Endpoint{2, 7}) == status::ok);
  REQUIRE(rig.b->ff_listen(s1, 4) == status::ok);
  CHECK(rig.b->ff_bind(s2, Endpoint{2, 7}) == status::addr_in_use);
  CHECK(rig.b->ff_bind(999, Endpoint{2, 8}) == status::bad_fd);
  CHECK(rig.b->ff_bind(s2, Endpoint{1, 8}) == status::bad_state);
}

TEST_CASE("echo round-trip and would-block on empty queue") {
  NetRig rig;
  auto [cfd, sfd] = rig.establish();

  std::vector<uint8_t> out(16);
  CHECK(rig.b->ff_read(sfd, out) == status::would_block);

  std::vector<uint8_t> abc{'a', 'b', 'c'};
  CHECK(rig.a->ff_write(cfd, abc) == 3);
  rig.pump(5);
  CHECK(rig.b->ff_read(sfd, out) == 3);
  CHECK(std::memcmp(out.data(), "abc", 3) == 0);

  CHECK(rig.b->ff_write(sfd, abc) == 3);
  rig.pump(5);
  CHECK(rig.a->ff_read(cfd, out) == 3);
  CHECK(std::memcmp(out.data(), "abc", 3) == 0);
}

TEST_CASE("write of one KiB into an empty queue takes it all") {
  NetRig rig;
  auto [cfd, sfd] = rig.establish();
  (void)sfd;
  std::vector<uint8_t> kib(1024, 0x42);
  CHECK(rig.a->ff_write(cfd, kib) == 1024);
}

TEST_CASE("a full tx queue would block, and drains through the loop") {
  NetRig rig(100.0);  // slow wire so the queue actually fills
  auto [cfd, sfd] = rig.establish();
  std::vector<uint8_t> chunk(64 * 1024, 0x7);
  uint64_t accepted = 0;
  int64_t r;
  while ((r = rig.a->ff_write(cfd, chunk)) > 0) accepted += r;
  CHECK(r == status::would_block);
  CHECK(accepted >= 256 * 1024);

  std::vector<uint8_t> sink(64 * 1024);
  uint64_t drained = 0;
  for (int i = 0; i < 4000 && drained < accepted; ++i) {
    rig.pump(1, 100'000);
    int64_t n;
    while ((n = rig.b->ff_read(sfd, sink)) > 0) drained += n;
  }
  CHECK(drained == accepted);
}

TEST_CASE("capability-typed buffers are checked at the requested size") {
  NetRig rig;
  auto [cfd, sfd] = rig.establish();

  Capability buf = rig.data_buf(256);
  std::vector<uint8_t> content = pattern_bytes(256);
  store(*rig.arena, buf, content);

  CHECK(rig.a->ff_write(cfd, buf, 256) == 256);

  // nbytes beyond the buffer's bounds faults, even though space exists.
  CHECK_THROWS_AS(rig.a->ff_write(cfd, buf, 257), CapFault);
  Capability store_only = restrict_cap(buf, buf.base, 256, Perms{Perm::store});
  CHECK_THROWS_AS(rig.a->ff_write(cfd, store_only, 16), CapFault);

  rig.pump(5);
  Capability rbuf = rig.data_buf(256);
  CHECK(rig.b->ff_read(sfd, rbuf, 256) == 256);
  std::vector<uint8_t> got(256);
  load(*rig.arena, rbuf, got);
  CHECK(got == content);
  Capability load_only = restrict_cap(rbuf, rbuf.base, 256, Perms{Perm::load});
  CHECK_THROWS_AS(rig.b->ff_read(sfd, load_only, 16), CapFault);
}

TEST_CASE("span and capability paths produce identical socket results") {
  // The same operation trace through both API flavors.
  std::vector<int64_t> results[2];
  std::vector<uint8_t> reads[2];
  for (int flavor = 0; flavor < 2; ++flavor) {
    NetRig rig;
    auto [cfd, sfd] = rig.establish();
    std::vector<uint8_t> payload = pattern_bytes(512);
    Capability wcap = rig.data_buf(512);
    store(*rig.arena, wcap, payload);
    Capability rcap = rig.data_buf(512);

    auto wr = [&](size_t n) {
      return flavor == 0 ? rig.a->ff_write(cfd, std::span<const uint8_t>(
                                                    payload.data(), n))
                         : rig.a->ff_write(cfd, wcap, n);
    };
    auto rd = [&](size_t n) -> int64_t {
      if (flavor == 0) {
        std::vector<uint8_t> tmp(n);
        int64_t r = rig.b->ff_read(sfd, tmp);
        if (r > 0) {
          reads[flavor].insert(reads[flavor].end(), tmp.begin(),
                               tmp.begin() + r);
        }
        return r;
      }
      int64_t r = rig.b->ff_read(sfd, rcap, n);
      if (r > 0) {
        std::vector<uint8_t> tmp(static_cast<size_t>(r));
        load(*rig.arena, rcap, tmp);
        reads[flavor].insert(reads[flavor].end(), tmp.begin(), tmp.end());
      }
      return r;
    };

    results[flavor].push_back(wr(100));
    results[flavor].push_back(rd(50));  // nothing there yet
    rig.pump(5);
    results[flavor].push_back(rd(50));
    results[flavor].push_back(rd(50));
    results[flavor].push_back(wr(512));
    rig.pump(5);
    results[flavor].push_back(rd(512));
    results[flavor].push_back(rig.a->ff_close(cfd));
    rig.pump(10);
    results[flavor].push_back(rd(16));  // end of stream
  }
  CHECK(results[0] == results[1]);
  CHECK(reads[0] == reads[1]);
}

TEST_CASE("readiness events are level-triggered") {
  NetRig rig;
  std::vector<ReadinessEvent> events(16);
  CHECK(rig.a->ff_poll_events(events) == 0);  // no sockets

  auto [cfd, sfd] = rig.establish();
  std::vector<uint8_t> abc{'x', 'y', 'z'};
  CHECK(rig.a->ff_write(cfd, abc) == 3);
  rig.pump(5);

  auto has = [&](StackInstance& st, int fd, EventKind kind) {
    size_t n = st.ff_poll_events(events);
    for (size_t i = 0; i < n; ++i) {
      if (events[i].fd == fd && events[i].kind == kind) return true;
    }
    return false;
  };

  CHECK(has(*rig.b, sfd, EventKind::readable));
  CHECK(has(*rig.b, sfd, EventKind::readable));  // still outstanding
  std::vector<uint8_t> sink(8);
  CHECK(rig.b->ff_read(sfd, sink) == 3);
  CHECK(!has(*rig.b, sfd, EventKind::readable));  // drained
  CHECK(has(*rig.a, cfd, EventKind::writable));
}

TEST_CASE("pending connections raise acceptable on the listener") {
  NetRig rig;
  int ls = static_cast<int>(rig.b->ff_socket());
  REQUIRE(rig.b->ff_bind(ls, Endpoint{2, 5}) == status::ok);
  REQUIRE(rig.b->ff_listen(ls, 4) == status::ok);
  int cfd = static_cast<int>(rig.a->ff_socket());
  rig.a->ff_connect(cfd, Endpoint{2, 5});
  rig.pump(10);

  std::vector<ReadinessEvent> events(16);
  size_t n = rig.b->ff_poll_events(events);
  bool acceptable = false;
  for (size_t i = 0; i < n; ++i) {
    acceptable = acceptable || (events[i].fd == ls &&
                                events[i].kind == EventKind::acceptable);
  }
  CHECK(acceptable);
}

TEST_CASE("end of stream reads zero after fin, closed event raised") {
  NetRig rig;
  auto [cfd, sfd] = rig.establish();
  std::vector<uint8_t> qr{'q', 'r'};
  CHECK(rig.a->ff_write(cfd, qr) == 2);
  CHECK(rig.a->ff_close(cfd) == status::ok);
  rig.pump(10);

  std::vector<uint8_t> sink(8);
  CHECK(rig.b->ff_read(sfd, sink) == 2);  // data before the fin
  CHECK(rig.b->ff_read(sfd, sink) == 0);  // end of stream
  CHECK(rig.b->ff_read(sfd, sink) == 0);  // stays there

  std::vector<ReadinessEvent> events(16);
  size_t n = rig.b->ff_poll_events(events);
  bool closed = false;
  for (size_t i = 0; i < n; ++i) {
    closed = closed ||
             (events[i].fd == sfd && events[i].kind == EventKind::closed);
  }
  CHECK(closed);

  // Full teardown: the passive side closes too, both reach CLOSED.
  CHECK(rig.b->ff_close(sfd) == status::ok);
  rig.pump(20);
  CHECK(rig.a->socket_state(cfd) == SockState::closed);
}

TEST_CASE("loss is repaired by retransmission, stream stays in order") {
  NetRig rig(10'000, 0.05, 42);
  auto [cfd, sfd] = rig.establish();

  std::vector<uint8_t> sent;
  std::vector<uint8_t> received;
  std::vector<uint8_t> chunk = pattern_bytes(4096);
  std::vector<uint8_t> sink(8192);
  uint64_t target = 512 * 1024;
  uint64_t written = 0;
  int guard = 0;
  while (received.size() < target && guard < 20000) {
    guard++;
    if (written < target) {
      size_t want = std::min<uint64_t>(chunk.size(), target - written);
      int64_t w =
          rig.a->ff_write(cfd, std::span<const uint8_t>(chunk.data(), want));
      if (w > 0) {
        sent.insert(sent.end(), chunk.begin(), chunk.begin() + w);
        written += w;
      }
    }
    // 5 ms steps so the 50 ms retransmission timer fires during the run.
    rig.pump(1, 5'000'000);
    int64_t r;
    while ((r = rig.b->ff_read(sfd, sink)) > 0) {
      received.insert(received.end(), sink.begin(), sink.begin() + r);
    }
  }
  REQUIRE(received.size() == target);
  CHECK(received == sent);
  CHECK(rig.a->stats().retransmits > 0);
  CHECK(rig.wire->counters(0).frames_dropped_loss.load() > 0);
}

TEST_CASE("liveness: lossless delivery within the iteration bound") {
  NetRig rig(100'000);
  auto [cfd, sfd] = rig.establish();

  std::vector<uint8_t> big(256 * 1024, 0x3c);
  int64_t accepted = rig.a->ff_write(cfd, big);
  REQUIRE(accepted >= 64 * 1024);

  size_t segment = 1500 - kStreamHeaderBytes;
  uint64_t bound = static_cast<uint64_t>(accepted) / segment + 2;
  std::vector<uint8_t> sink(64 * 1024);
  uint64_t drained = 0;
  uint64_t iterations = 0;
  while (drained < static_cast<uint64_t>(accepted) && iterations <= bound) {
    rig.pump(1, 50'000);
    iterations++;
    int64_t r;
    while ((r = rig.b->ff_read(sfd, sink)) > 0) drained += r;
  }
  CHECK(drained == static_cast<uint64_t>(accepted));
  CHECK(iterations <= bound);
}

TEST_CASE("callback writes run under the held loop mutex") {
  NetRig rig;
  auto [cfd, sfd] = rig.establish();
  (void)sfd;
  std::vector<uint8_t> byte{0x55};
  int calls = 0;
  bool held = false;
  rig.a->set_user_callback([&](StackInstance& stack) {
    held = stack.loop_mutex().held_by_me();
    stack.ff_write(cfd, byte);  // same thread, lock already held
    calls++;
  });
  rig.pump(3);
  CHECK(calls == 3);
  CHECK(held);
}

TEST_CASE("concurrent writers through the mutex keep both streams intact") {
  NetRig rig;
  auto [c1, s1] = rig.establish(5);

  int c2 = static_cast<int>(rig.a->ff_socket());
  REQUIRE(rig.a->ff_connect(c2, Endpoint{2, 5}) == status::in_progress);
  int s2 = -1;
  for (int i = 0; i < 50 && s2 < 0; ++i) {
    rig.pump();
    int64_t r = rig.b->ff_accept(rig.listen_fd);
    if (r >= 0) s2 = static_cast<int>(r);
  }
  REQUIRE(s2 >= 0);

  // A foreign thread hammers socket c2 through the public API while the
  // loop thread's callback writes to c1; the coarse mutex serializes them.
  // Writers finish each 128-byte block before starting the next so the
  // streams stay block-aligned even across partial acceptance.
  std::vector<uint8_t> one = pattern_bytes(128, 1);
  std::vector<uint8_t> two = pattern_bytes(128, 2);
  std::atomic<bool> stop{false};
  std::atomic<size_t> off_two{0};
  std::thread writer([&] {
    while (!stop.load() || off_two.load() != 0) {
      size_t off = off_two.load();
      int64_t r = rig.a->ff_write(
          c2, std::span<const uint8_t>(two.data() + off, two.size() - off));
      if (r > 0) off_two.store((off + static_cast<size_t>(r)) % two.size());
    }
  });

  std::atomic<size_t> off_one{0};
  rig.a->set_user_callback([&](StackInstance& stack) {
    size_t off = off_one.load();
    int64_t r = stack.ff_write(
        c1, std::span<const uint8_t>(one.data() + off, one.size() - off));
    if (r > 0) off_one.store((off + static_cast<size_t>(r)) % one.size());
  });

  std::vector<uint8_t> got_one, got_two, sink(4096);
  auto drain = [&] {
    int64_t r;
    while ((r = rig.b->ff_read(s1, sink)) > 0) {
      got_one.insert(got_one.end(), sink.begin(), sink.begin() + r);
    }
    while ((r = rig.b->ff_read(s2, sink)) > 0) {
      got_two.insert(got_two.end(), sink.begin(), sink.begin() + r);
    }
  };
  for (int i = 0; i < 400; ++i) {
    rig.pump(1, 50'000);
    drain();
  }
  stop.store(true);
  // Keep pumping so the writers can finish their current blocks.
  for (int i = 0;
       i < 5000 && (off_two.load() != 0 || off_one.load() != 0); ++i) {
    rig.pump(1, 50'000);
    drain();
  }
  writer.join();
  rig.a->set_user_callback(nullptr);
  for (int i = 0; i < 500; ++i) {  // flush everything still queued
    rig.pump(1, 50'000);
    drain();
  }

  // Per-stream integrity: every received block matches its pattern.
  REQUIRE(got_one.size() % 128 == 0);
  REQUIRE(got_two.size() % 128 == 0);
  for (size_t off = 0; off < got_one.size(); off += 128) {
    REQUIRE(std::memcmp(got_one.data() + off, one.data(), 128) == 0);
  }
  for (size_t off = 0; off < got_two.size(); off += 128) {
    REQUIRE(std::memcmp(got_two.data() + off, two.data(), 128) == 0);
  }
  CHECK(got_one.size() > 0);
  CHECK(got_two.size() > 0);
}

TEST_CASE("cross-compartment entries validate, lock, and match direct calls") {
  // Full scenario-2 shape at unit scale: stack compartment with published
  // entries, app compartment calling through them.
  Arena arena(64ull << 20);
  Intravisor iv(arena);

  CreateSpec stack_spec;
  stack_spec.name = "stack";
  stack_spec.size = 16ull << 20;
  stack_spec.entry_slots = static_cast<size_t>(ApiEntry::count);
  Capability progress =
      iv.create_shared_region(64, Perms{Perm::load, Perm::store}, "progress");
  Capability mutex_block =
      iv.create_shared_region(64, Perms{Perm::load, Perm::store}, "mutex");
  stack_spec.grants = {progress, mutex_block};
  int stack_id = iv.create_compartment(std::move(stack_spec));
  Compartment& stack_comp = iv.compartment(stack_id);

  VirtualNic nic_a(arena, {1});
  VirtualNic nic_b(arena, {2});
  uint64_t ring_bytes = 2ull * 1024 * 1500;
  uint64_t staging_bytes = 40ull * 1500;
  Capability pool_a = stack_comp.alloc(ring_bytes + staging_bytes,
                                       Perms{Perm::load, Perm::store});
  nic_a.attach(stack_id, pool_a);

  CreateSpec peer_spec;
  peer_spec.name = "peer";
  peer_spec.size = 16ull << 20;
  int peer_id = iv.create_compartment(std::move(peer_spec));
  Compartment& peer_comp = iv.compartment(peer_id);
  Capability pool_b = peer_comp.alloc(ring_bytes + staging_bytes,
                                      Perms{Perm::load, Perm::store});
  nic_b.attach(peer_id, pool_b);

  WireConfig wc;
  wc.rate_mbps = 10'000;
  wc.latency_ns = 0;
  Wire wire(nic_a.port(1), nic_b.port(2), wc);

  uint64_t now = 1'000'000;
  auto clock = [&now] { return now; };
  CapMutex::SyncOps ops;
  StackInstance stack(
      arena, nic_a, 1,
      restrict_cap(pool_a, pool_a.base + ring_bytes, staging_bytes,
                   Perms{Perm::load, Perm::store}),
      restrict_cap(mutex_block, mutex_block.base, 64,
                   Perms{Perm::load, Perm::store}),
      restrict_cap(progress, progress.base, 64,
                   Perms{Perm::load, Perm::store}),
      ops, clock, StackOptions{}, &iv, stack_id);
  StackInstance peer(
      arena, nic_b, 2,
      restrict_cap(pool_b, pool_b.base + ring_bytes, staging_bytes,
                   Perms{Perm::load, Perm::store}),
      peer_comp.alloc(64, Perms{Perm::load, Perm::store}),
      peer_comp.alloc(64, Perms{Perm::load, Perm::store}), ops, clock);
  iv.set_entries(stack_id, stack.make_api_entries());

  CreateSpec app_spec;
  app_spec.name = "app";
  app_spec.size = 8ull << 20;
  app_spec.granted_entries = iv.entry_caps(stack_id);
  app_spec.grants = {progress};
  int app_id = iv.create_compartment(std::move(app_spec));
  Compartment& app = iv.compartment(app_id);

  auto pump = [&](int rounds) {
    for (int i = 0; i < rounds; ++i) {
      stack.main_loop_iteration();
      peer.main_loop_iteration();
      now += 10'000;
      wire.pump(now);
    }
  };

  // Peer listens; the app connects through the sealed entries.
  int ls = static_cast<int>(peer.ff_socket());
  REQUIRE(peer.ff_bind(ls, Endpoint{2, 5}) == status::ok);
  REQUIRE(peer.ff_listen(ls, 4) == status::ok);

  auto entry = [&](ApiEntry e) {
    return app.granted_entries()[static_cast<size_t>(e)];
  };
  CallArgs args;
  int64_t cfd = app.cross_call(stack_id, entry(ApiEntry::socket), args);
  REQUIRE(cfd >= 0);

  args = CallArgs{};
  args.scalars[0] = static_cast<uint64_t>(cfd);
  args.scalars[1] = 2;  // port
  args.scalars[2] = 5;  // listen id
  CHECK(app.cross_call(stack_id, entry(ApiEntry::connect), args) ==
        status::in_progress);
  int sfd = -1;
  for (int i = 0; i < 50 && sfd < 0; ++i) {
    pump(1);
    int64_t r = peer.ff_accept(ls);
    if (r >= 0) sfd = static_cast<int>(r);
  }
  REQUIRE(sfd >= 0);

  // Write through the entry with a capability inside the app's region.
  Capability buf = app.alloc(256, Perms{Perm::load, Perm::store});
  std::vector<uint8_t> content = pattern_bytes(256, 9);
  store(arena, buf, content);
  args = CallArgs{};
  args.scalars[0] = static_cast<uint64_t>(cfd);
  args.scalars[1] = 256;
  args.caps.push_back(buf);
  CHECK(app.cross_call(stack_id, entry(ApiEntry::write), args) == 256);

  pump(5);
  std::vector<uint8_t> got(256);
  CHECK(peer.ff_read(sfd, got) == 256);
  CHECK(got == content);

  // Oversized request faults the caller at the gate.
  args.scalars[1] = 512;
  CHECK_THROWS_AS(app.cross_call(stack_id, entry(ApiEntry::write), args),
                  CapFault);

  // A buffer outside the caller's authority is refused outright.
  args.scalars[1] = 64;
  args.caps[0] = peer_comp.ddc();
  CHECK(app.cross_call(stack_id, entry(ApiEntry::write), args) ==
        status::not_authorized);

  // Readiness events through the wire format of the poll entry.
  std::vector<uint8_t> write_me{1, 2, 3};
  CHECK(peer.ff_write(sfd, write_me) == 3);
  pump(5);
  Capability events_buf = app.alloc(8 * 8, Perms{Perm::load, Perm::store});
  args = CallArgs{};
  args.scalars[0] = 8;
  args.caps.assign(1, events_buf);
  int64_t nev = app.cross_call(stack_id, entry(ApiEntry::poll_events), args);
  REQUIRE(nev >= 1);
  std::vector<uint8_t> raw(static_cast<size_t>(nev) * 8);
  load(arena, events_buf, raw);
  bool readable = false;
  for (int64_t i = 0; i < nev; ++i) {
    uint32_t fd = static_cast<uint32_t>(raw[i * 8]) |
                  (static_cast<uint32_t>(raw[i * 8 + 1]) << 8) |
                  (static_cast<uint32_t>(raw[i * 8 + 2]) << 16) |
                  (static_cast<uint32_t>(raw[i * 8 + 3]) << 24);
    readable = readable ||
               (fd == static_cast<uint32_t>(cfd) &&
                raw[i * 8 + 4] == static_cast<uint8_t>(EventKind::readable));
  }
  CHECK(readable);
}
