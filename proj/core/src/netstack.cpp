#include "capnet/netstack.hpp"

#include <algorithm>
#include <cassert>
#include <cstring>
#include <stdexcept>

namespace capnet {

namespace {

// Byte queue addressed by absolute stream position. The base position tracks
// the first unacked (tx) or undelivered (rx) byte, so retransmission reads
// never consume.
class ByteRing {
 public:
  void init(size_t capacity) {
    size_t cap = 1;
    while (cap < capacity) cap <<= 1;
    // Uninitialized on purpose: ring bytes are always written before they
    // are read, and zeroing multi-megabyte queues inside a protocol turn
    // stalls the loop for milliseconds.
    buf_ = std::unique_ptr<uint8_t[]>(new uint8_t[cap]);
    cap_ = cap;
  }
  void reset(uint64_t base) {
    base_pos_ = base;
    start_ = 0;
    size_ = 0;
  }
  size_t capacity() const { return cap_; }
  size_t size() const { return size_; }
  size_t free() const { return cap_ - size_; }
  uint64_t base_pos() const { return base_pos_; }
  uint64_t end_pos() const { return base_pos_ + size_; }

  std::pair<std::span<uint8_t>, std::span<uint8_t>> claim(size_t n) {
    size_t pos = (start_ + size_) & (cap_ - 1);
    size_t first = std::min(n, cap_ - pos);
    return {std::span<uint8_t>(buf_.get() + pos, first),
            std::span<uint8_t>(buf_.get(), n - first)};
  }
  void commit(size_t n) { size_ += n; }
  size_t push(std::span<const uint8_t> bytes) {
    size_t n = std::min(bytes.size(), free());
    auto [a, b] = claim(n);
    std::memcpy(a.data(), bytes.data(), a.size());
    if (!b.empty()) std::memcpy(b.data(), bytes.data() + a.size(), b.size());
    commit(n);
    return n;
  }
  std::pair<std::span<const uint8_t>, std::span<const uint8_t>> view(
      uint64_t pos, size_t n) const {
    size_t offset =
        (start_ + static_cast<size_t>(pos - base_pos_)) & (cap_ - 1);
    size_t first = std::min(n, cap_ - offset);
    return {std::span<const uint8_t>(buf_.get() + offset, first),
            std::span<const uint8_t>(buf_.get(), n - first)};
  }
  void read(uint64_t pos, uint8_t* out, size_t n) const {
    auto [a, b] = view(pos, n);
    std::memcpy(out, a.data(), a.size());
    if (!b.empty()) std::memcpy(out + a.size(), b.data(), b.size());
  }
  void discard_until(uint64_t pos) {
    if (pos <= base_pos_) return;
    size_t n = std::min<uint64_t>(pos - base_pos_, size_);
    start_ = (start_ + n) & (cap_ - 1);
    size_ -= n;
    base_pos_ += n;
  }

 private:
  std::unique_ptr<uint8_t[]> buf_;
  size_t cap_ = 0;
  uint64_t base_pos_ = 0;
  size_t start_ = 0;
  size_t size_ = 0;
};

constexpr uint64_t kNoDeadline = 0;

}  // namespace

const char* to_string(SockState st) {
  switch (st) {
    case SockState::closed: return "CLOSED";
    case SockState::listen: return "LISTEN";
    case SockState::syn_sent: return "SYN_SENT";
    case SockState::syn_rcvd: return "SYN_RCVD";
    case SockState::established: return "ESTABLISHED";
    case SockState::fin_wait: return "FIN_WAIT";
    case SockState::close_wait: return "CLOSE_WAIT";
  }
  return "unknown";
}

void encode_stream_header(std::span<uint8_t> out, const StreamHeader& hdr) {
  out[0] = static_cast<uint8_t>(hdr.type);
  out[1] = static_cast<uint8_t>(hdr.stream_id);
  out[2] = static_cast<uint8_t>(hdr.stream_id >> 8);
  out[3] = static_cast<uint8_t>(hdr.stream_id >> 16);
  out[4] = static_cast<uint8_t>(hdr.stream_id >> 24);
  out[5] = static_cast<uint8_t>(hdr.seq);
  out[6] = static_cast<uint8_t>(hdr.seq >> 8);
  out[7] = static_cast<uint8_t>(hdr.seq >> 16);
  out[8] = static_cast<uint8_t>(hdr.seq >> 24);
  out[9] = static_cast<uint8_t>(hdr.ack);
  out[10] = static_cast<uint8_t>(hdr.ack >> 8);
  out[11] = static_cast<uint8_t>(hdr.ack >> 16);
  out[12] = static_cast<uint8_t>(hdr.ack >> 24);
  out[13] = static_cast<uint8_t>(hdr.length);
  out[14] = static_cast<uint8_t>(hdr.length >> 8);
}

bool decode_stream_header(std::span<const uint8_t> in, StreamHeader& hdr) {
  if (in.size() < kStreamHeaderBytes) return false;
  uint8_t t = in[0];
  if (t < 1 || t > 6) return false;
  hdr.type = static_cast<StreamFrameType>(t);
  hdr.stream_id = static_cast<uint32_t>(in[1]) |
                  (static_cast<uint32_t>(in[2]) << 8) |
                  (static_cast<uint32_t>(in[3]) << 16) |
                  (static_cast<uint32_t>(in[4]) << 24);
  hdr.seq = static_cast<uint32_t>(in[5]) | (static_cast<uint32_t>(in[6]) << 8) |
            (static_cast<uint32_t>(in[7]) << 16) |
            (static_cast<uint32_t>(in[8]) << 24);
  hdr.ack = static_cast<uint32_t>(in[9]) |
            (static_cast<uint32_t>(in[10]) << 8) |
            (static_cast<uint32_t>(in[11]) << 16) |
            (static_cast<uint32_t>(in[12]) << 24);
  hdr.length = static_cast<uint16_t>(in[13] | (in[14] << 8));
  return in.size() >= kStreamHeaderBytes + hdr.length;
}

// ---------------------------------------------------------------------------

struct StackInstance::Socket {
  int fd = -1;
  SockState state = SockState::closed;
  Endpoint local{};
  Endpoint remote{};
  uint32_t conn_id = 0;
  int listen_parent = -1;

  // Sender. Stream position 0 is the SYN; data starts at 1. The tx ring
  // holds [snd_una, write end); bytes leave only when acked.
  ByteRing tx;
  uint64_t snd_una = 1;
  uint64_t snd_nxt = 1;
  struct SegRec {
    uint64_t seq;
    uint32_t len;
    bool is_fin;
  };
  std::deque<SegRec> inflight;
  uint64_t rto_deadline = kNoDeadline;
  uint64_t next_ctrl_at = 0;  // SYN / SYN_ACK (re)transmission
  int dup_acks = 0;
  bool force_retransmit = false;
  bool fin_queued = false;
  bool fin_sent = false;
  uint64_t fin_seq = 0;
  bool fin_acked = false;
  bool app_closed = false;

  // Receiver.
  ByteRing rx;
  uint64_t rcv_nxt = 1;
  std::map<uint64_t, std::vector<uint8_t>> ooo;
  size_t ooo_bytes = 0;
  uint64_t pending_fin_seq = UINT64_MAX;
  bool fin_received = false;
  bool refused = false;
  bool ack_pending = false;

  // Listener.
  int backlog = 0;
  uint32_t listen_id = 0;
  std::deque<int> pending_accepts;
};

StackInstance::StackInstance(Arena& arena, VirtualNic& nic, uint16_t port_id,
                             Capability staging, Capability mutex_block,
                             Capability progress_block,
                             CapMutex::SyncOps sync_ops, TimeSource time_source,
                             StackOptions options, Intravisor* lock_registry,
                             int compartment_id)
    : arena_(arena),
      nic_(nic),
      port_id_(port_id),
      staging_(staging),
      progress_block_(progress_block),
      mutex_(arena, mutex_block, sync_ops, lock_registry, compartment_id),
      sync_ops_(sync_ops),
      now_(std::move(time_source)),
      options_(options) {
  uint32_t mtu = nic_.options().mtu;
  size_t slots = options_.tx_burst + 4;
  if (staging_.length < slots * mtu) {
    throw std::runtime_error("staging region too small for tx burst");
  }
  for (size_t i = 0; i < slots; ++i) {
    staging_slots_.push_back(restrict_cap(staging_, staging_.base + i * mtu,
                                          mtu, Perms{Perm::load, Perm::store}));
  }
  if (!progress_block_.covers(progress_block_.base, 8)) {
    throw std::runtime_error("progress block too small");
  }
  progress_word_ = set_address(progress_block_, progress_block_.base);
  waiters_word_ = set_address(progress_block_, progress_block_.base + 4);
  rx_scratch_.resize(options_.rx_burst);
  frame_scratch_.resize(mtu);
  tx_frames_.reserve(options_.tx_burst + 4);
}

StackInstance::~StackInstance() = default;

void StackInstance::assert_locked() const {
  assert(const_cast<CapMutex&>(mutex_).held_by_me() &&
         "socket table mutation without loop mutex");
}

StackInstance::Socket* StackInstance::find(int fd) {
  auto it = sockets_.find(fd);
  return it == sockets_.end() ? nullptr : it->second.get();
}

template <typename Fn>
int64_t StackInstance::with_lock(Fn&& fn) {
  if (mutex_.held_by_me()) return fn();
  CapMutexGuard g(mutex_);
  return fn();
}

uint32_t StackInstance::next_conn_id() {
  ++conn_counter_;
  if (conn_counter_ == 0) ++conn_counter_;
  return (static_cast<uint32_t>(port_id_) << 16) | conn_counter_;
}

// ---------------------------------------------------------------------------
// API surface

int64_t StackInstance::ff_socket() {
  return with_lock([&] { return socket_locked(); });
}

int64_t StackInstance::socket_locked() {
  assert_locked();
  if (static_cast<int>(sockets_.size()) >= options_.max_sockets) {
    return status::bad_state;
  }
  int fd = next_fd_++;
  auto s = std::make_unique<Socket>();
  s->fd = fd;
  s->tx.init(options_.queue_capacity);
  s->rx.init(options_.queue_capacity);
  s->local = Endpoint{port_id_, 0};
  sockets_.emplace(fd, std::move(s));
  return fd;
}

int64_t StackInstance::ff_bind(int fd, Endpoint local) {
  return with_lock([&] { return bind_locked(fd, local); });
}

int64_t StackInstance::bind_locked(int fd, Endpoint local) {
  assert_locked();
  Socket* s = find(fd);
  if (!s) return status::bad_fd;
  if (s->state != SockState::closed) return status::bad_state;
  if (local.port != 0 && local.port != port_id_) return status::bad_state;
  if (local.stream_id != 0 && listeners_.count(local.stream_id)) {
    return status::addr_in_use;
  }
  s->local = Endpoint{port_id_, local.stream_id};
  return status::ok;
}

int64_t StackInstance::ff_listen(int fd, int backlog) {
  return with_lock([&] { return listen_locked(fd, backlog); });
}

int64_t StackInstance::listen_locked(int fd, int backlog) {
  assert_locked();
  Socket* s = find(fd);
  if (!s) return status::bad_fd;
  if (s->state != SockState::closed || s->local.stream_id == 0) {
    return status::bad_state;
  }
  if (listeners_.count(s->local.stream_id)) return status::addr_in_use;
  s->state = SockState::listen;
  s->backlog = std::max(backlog, 1);
  s->listen_id = s->local.stream_id;
  listeners_[s->listen_id] = fd;
  return status::ok;
}

int64_t StackInstance::ff_connect(int fd, Endpoint remote) {
  return with_lock([&] { return connect_locked(fd, remote); });
}

int64_t StackInstance::connect_locked(int fd, Endpoint remote) {
  assert_locked();
  Socket* s = find(fd);
  if (!s) return status::bad_fd;
  switch (s->state) {
    case SockState::closed:
      if (s->refused) return status::refused;
      break;
    case SockState::syn_sent:
      return status::in_progress;
    case SockState::established:
    case SockState::close_wait:
      return status::ok;
    default:
      return status::bad_state;
  }
  s->remote = remote;
  s->conn_id = next_conn_id();
  s->state = SockState::syn_sent;
  s->snd_una = 0;  // SYN occupies sequence 0
  s->snd_nxt = 1;
  s->tx.reset(1);
  s->rx.reset(1);
  s->rcv_nxt = 1;
  s->next_ctrl_at = 0;
  conns_[s->conn_id] = fd;
  tx_pending_.store(true, std::memory_order_release);
  return status::in_progress;
}

int64_t StackInstance::ff_accept(int fd) {
  return with_lock([&] { return accept_locked(fd); });
}

int64_t StackInstance::accept_locked(int fd) {
  assert_locked();
  Socket* s = find(fd);
  if (!s) return status::bad_fd;
  if (s->state != SockState::listen) return status::bad_state;
  if (s->pending_accepts.empty()) return status::would_block;
  int accepted = s->pending_accepts.front();
  s->pending_accepts.pop_front();
  return accepted;
}

int64_t StackInstance::ff_close(int fd) {
  return with_lock([&] { return close_locked(fd); });
}

int64_t StackInstance::close_locked(int fd) {
  assert_locked();
  Socket* s = find(fd);
  if (!s) return status::bad_fd;
  s->app_closed = true;
  switch (s->state) {
    case SockState::listen:
      listeners_.erase(s->listen_id);
      s->state = SockState::closed;
      break;
    case SockState::syn_sent:
      conns_.erase(s->conn_id);
      s->state = SockState::closed;
      break;
    case SockState::established:
    case SockState::close_wait:
    case SockState::syn_rcvd:
      s->fin_queued = true;
      tx_pending_.store(true, std::memory_order_release);
      break;
    default:
      break;
  }
  return status::ok;
}

int64_t StackInstance::ff_write(int fd, const Capability& buf, size_t nbytes) {
  return with_lock(
      [&] { return write_locked(fd, nullptr, 0, &buf, nbytes); });
}

int64_t StackInstance::ff_write(int fd, std::span<const uint8_t> buf) {
  return with_lock(
      [&] { return write_locked(fd, buf.data(), buf.size(), nullptr, 0); });
}

int64_t StackInstance::write_locked(int fd, const uint8_t* data, size_t n,
                                    const Capability* cap, size_t requested) {
  assert_locked();
  if (cap) {
    // The whole requested range must be loadable, as the access would be.
    check_access(*cap, requested, Perm::load);
    n = requested;
  }
  Socket* s = find(fd);
  if (!s) return status::bad_fd;
  if (s->state != SockState::established && s->state != SockState::close_wait) {
    return s->refused ? status::refused : status::bad_state;
  }
  if (s->fin_queued || s->fin_sent) return status::bad_state;
  size_t space = s->tx.free();
  if (space == 0) return status::would_block;
  size_t take = std::min(space, n);
  auto [a, b] = s->tx.claim(take);
  if (cap) {
    load(arena_, set_address(*cap, cap->address), a);
    if (!b.empty()) load(arena_, set_address(*cap, cap->address + a.size()), b);
  } else {
    std::memcpy(a.data(), data, a.size());
    if (!b.empty()) std::memcpy(b.data(), data + a.size(), b.size());
  }
  s->tx.commit(take);
  tx_pending_.store(true, std::memory_order_release);
  return static_cast<int64_t>(take);
}

int64_t StackInstance::ff_read(int fd, const Capability& buf, size_t nbytes) {
  return with_lock([&] { return read_locked(fd, nullptr, 0, &buf, nbytes); });
}

int64_t StackInstance::ff_read(int fd, std::span<uint8_t> out) {
  return with_lock(
      [&] { return read_locked(fd, out.data(), out.size(), nullptr, 0); });
}

int64_t StackInstance::read_locked(int fd, uint8_t* out, size_t n,
                                   const Capability* cap, size_t requested) {
  assert_locked();
  if (cap) {
    check_access(*cap, requested, Perm::store);
    n = requested;
  }
  Socket* s = find(fd);
  if (!s) return status::bad_fd;
  if (s->state == SockState::listen) return status::bad_state;
  size_t avail = s->rx.size();
  if (avail == 0) {
    if (s->fin_received || s->state == SockState::closed) return 0;
    return status::would_block;
  }
  size_t take = std::min(avail, n);
  uint64_t pos = s->rx.base_pos();
  if (cap) {
    auto [a, b] = s->rx.view(pos, take);
    store(arena_, set_address(*cap, cap->address), a);
    if (!b.empty()) {
      store(arena_, set_address(*cap, cap->address + a.size()), b);
    }
  } else {
    s->rx.read(pos, out, take);
  }
  s->rx.discard_until(pos + take);
  deliver_in_order(*s);  // freed space may admit buffered segments
  return static_cast<int64_t>(take);
}

size_t StackInstance::ff_poll_events(std::span<ReadinessEvent> out) {
  size_t n = 0;
  with_lock([&] {
    n = poll_events_locked(out);
    return int64_t{0};
  });
  return n;
}

size_t StackInstance::poll_events_locked(std::span<ReadinessEvent> out) {
  assert_locked();
  size_t n = 0;
  auto put = [&](int fd, EventKind kind) {
    if (n < out.size()) out[n++] = ReadinessEvent{fd, kind};
  };
  for (auto& [fd, sp] : sockets_) {
    Socket& s = *sp;
    if (s.app_closed && s.state == SockState::closed) continue;
    if (s.state == SockState::listen) {
      if (!s.pending_accepts.empty()) put(fd, EventKind::acceptable);
      continue;
    }
    if (s.rx.size() > 0) put(fd, EventKind::readable);
    if ((s.state == SockState::established ||
         s.state == SockState::close_wait) &&
        !s.fin_queued && s.tx.free() > 0) {
      put(fd, EventKind::writable);
    }
    if (s.state == SockState::closed ||
        (s.fin_received && s.rx.size() == 0)) {
      put(fd, EventKind::closed);
    }
  }
  return n;
}

std::array<uint64_t, 3> StackInstance::debug_sender_state(int fd) {
  std::array<uint64_t, 3> out{0, 0, 0};
  with_lock([&] {
    Socket* s = find(fd);
    if (s) {
      out[0] = s->snd_nxt - s->snd_una;
      out[1] = s->tx.end_pos() > s->snd_nxt ? s->tx.end_pos() - s->snd_nxt : 0;
      out[2] = s->tx.free();
    }
    return int64_t{0};
  });
  return out;
}

SockState StackInstance::socket_state(int fd) {
  SockState st = SockState::closed;
  with_lock([&] {
    Socket* s = find(fd);
    if (s) st = s->state;
    return int64_t{0};
  });
  return st;
}

// ---------------------------------------------------------------------------
// Main loop

bool StackInstance::has_pending_work(uint64_t now_ns) const {
  if (tx_pending_.load(std::memory_order_acquire)) return true;
  const Port& p = const_cast<VirtualNic&>(nic_).port(port_id_);
  if (p.rx_pending() > 0) return true;
  uint64_t hint = rto_hint_ns_.load(std::memory_order_acquire);
  return hint != 0 && now_ns >= hint;
}

void StackInstance::pump_wire(uint64_t now_ns) {
  nic_.port(port_id_).pump_wire(now_ns);
}

uint64_t StackInstance::main_loop_iteration() {
  bool should_wake = false;
  uint64_t moved = 0;
  {
    CapMutexGuard g(mutex_);
    uint64_t now = now_();
    stats_.loop_iterations++;
    progress_made_ = false;
    uint64_t before_rx = stats_.segments_received;
    uint64_t before_tx = stats_.segments_sent + stats_.acks_sent;
    pump_wire(now);
    process_rx(now);
    process_timers(now);
    emit_frames(now);
    moved = (stats_.segments_received - before_rx) +
            (stats_.segments_sent + stats_.acks_sent - before_tx);
    pump_wire(now);  // freshly emitted frames leave without an extra turn
    if (callback_) callback_(*this);
    // Sweep sockets that are both protocol-closed and app-closed, once no
    // acknowledgment is still owed to the peer.
    for (auto it = sockets_.begin(); it != sockets_.end();) {
      Socket& s = *it->second;
      if (s.app_closed && s.state == SockState::closed && !s.ack_pending) {
        conns_.erase(s.conn_id);
        it = sockets_.erase(it);
      } else {
        ++it;
      }
    }
    uint64_t turn_ns = now_() - now;
    if (turn_ns > stats_.loop_ns_max) stats_.loop_ns_max = turn_ns;
    if (turn_ns > 1'000'000) stats_.loop_slow_turns++;
    update_rto_hint();
    if (progress_made_) {
      atomic_fetch_add_u32(arena_, progress_word_, 1);
      should_wake = atomic_load_u32(arena_, waiters_word_) > 0;
    }
  }
  if (should_wake && sync_ops_.wake) {
    sync_ops_.wake(progress_word_, UINT32_MAX);
  }
  return moved;
}

void StackInstance::note_progress() { progress_made_ = true; }

void StackInstance::update_rto_hint() {
  uint64_t lowest = kNoDeadline;
  for (auto& [fd, sp] : sockets_) {
    Socket& s = *sp;
    uint64_t d = kNoDeadline;
    if (s.state == SockState::syn_sent || s.state == SockState::syn_rcvd) {
      d = s.next_ctrl_at ? s.next_ctrl_at : 1;
    } else if (!s.inflight.empty()) {
      d = s.rto_deadline;
    }
    if (d != kNoDeadline && (lowest == kNoDeadline || d < lowest)) lowest = d;
  }
  rto_hint_ns_.store(lowest, std::memory_order_release);
}

uint64_t StackInstance::unwrap_seq(const Socket&, uint32_t wire_seq,
                                   uint64_t reference) const {
  uint64_t base = reference & ~0xffffffffull;
  uint64_t best = base | wire_seq;
  auto distance = [&](uint64_t v) {
    return v > reference ? v - reference : reference - v;
  };
  if (base >= (1ull << 32)) {
    uint64_t lower = (base - (1ull << 32)) | wire_seq;
    if (distance(lower) < distance(best)) best = lower;
  }
  uint64_t upper = (base + (1ull << 32)) | wire_seq;
  if (distance(upper) < distance(best)) best = upper;
  return best;
}

void StackInstance::process_rx(uint64_t now_ns) {
  size_t n = nic_.rx_burst(port_id_, rx_scratch_);
  for (size_t i = 0; i < n; ++i) {
    RxFrame& f = rx_scratch_[i];
    if (f.dst_port != port_id_ || f.proto != kProtoStream) continue;
    if (f.length > frame_scratch_.size()) continue;
    load(arena_, f.payload, std::span<uint8_t>(frame_scratch_.data(), f.length));
    StreamHeader hdr;
    if (!decode_stream_header(
            std::span<const uint8_t>(frame_scratch_.data(), f.length), hdr)) {
      continue;
    }
    stats_.segments_received++;
    dispatch(hdr, f.src_port,
             std::span<const uint8_t>(frame_scratch_.data() + kStreamHeaderBytes,
                                      hdr.length),
             now_ns);
  }
}

void StackInstance::handle_ack_field(Socket& s, uint64_t ack_abs,
                                     uint64_t now_ns) {
  if (ack_abs > s.snd_nxt) return;  // acks data we never sent; ignore
  if (ack_abs > s.snd_una) {
    while (!s.inflight.empty() &&
           s.inflight.front().seq + s.inflight.front().len <= ack_abs) {
      if (s.inflight.front().is_fin) s.fin_acked = true;
      s.inflight.pop_front();
    }
    s.tx.discard_until(std::min<uint64_t>(ack_abs, s.tx.end_pos()));
    s.snd_una = ack_abs;
    s.dup_acks = 0;
    s.rto_deadline = s.inflight.empty()
                         ? kNoDeadline
                         : now_ns + options_.retransmit_timeout_ns;
    if (s.fin_acked && s.state == SockState::fin_wait && s.fin_received) {
      s.state = SockState::closed;
    }
    note_progress();  // tx space freed
  } else if (ack_abs == s.snd_una && !s.inflight.empty() &&
             s.snd_nxt > s.snd_una) {
    if (++s.dup_acks >= options_.fast_retransmit_dup_acks) {
      s.force_retransmit = true;
      s.dup_acks = 0;
      tx_pending_.store(true, std::memory_order_release);
    }
  }
}

void StackInstance::deliver_in_order(Socket& s) {
  for (;;) {
    auto it = s.ooo.begin();
    if (it == s.ooo.end()) break;
    if (it->first < s.rcv_nxt) {
      // Stale overlap from a retransmission; boundaries are fixed so this is
      // a pure duplicate.
      s.ooo_bytes -= it->second.size();
      s.ooo.erase(it);
      continue;
    }
    if (it->first != s.rcv_nxt) break;
    if (s.rx.free() < it->second.size()) break;
    s.rx.push(std::span<const uint8_t>(it->second.data(), it->second.size()));
    s.rcv_nxt += it->second.size();
    s.ooo_bytes -= it->second.size();
    s.ooo.erase(it);
    note_progress();
  }
  if (s.pending_fin_seq == s.rcv_nxt) {
    s.pending_fin_seq = UINT64_MAX;
    apply_fin(s);
  }
}

void StackInstance::apply_fin(Socket& s) {
  s.fin_received = true;
  s.rcv_nxt += 1;
  s.ack_pending = true;
  if (s.state == SockState::established || s.state == SockState::syn_rcvd) {
    s.state = SockState::close_wait;
  } else if (s.state == SockState::fin_wait && s.fin_acked) {
    s.state = SockState::closed;
  }
  note_progress();
}

void StackInstance::dispatch(const StreamHeader& hdr, uint16_t src_port,
                             std::span<const uint8_t> data, uint64_t now_ns) {
  switch (hdr.type) {
    case StreamFrameType::syn: {
      uint32_t listen_id = hdr.ack;
      auto existing = conns_.find(hdr.stream_id);
      if (existing != conns_.end()) {
        Socket* s = find(existing->second);
        if (s && s->state == SockState::syn_rcvd) {
          s->next_ctrl_at = 0;  // retransmit the handshake reply
        } else if (s) {
          s->ack_pending = true;  // stale duplicate SYN
        }
        tx_pending_.store(true, std::memory_order_release);
        return;
      }
      auto lit = listeners_.find(listen_id);
      if (lit == listeners_.end()) {
        send_rst(src_port, hdr.stream_id);
        return;
      }
      Socket* listener = find(lit->second);
      if (!listener ||
          static_cast<int>(listener->pending_accepts.size()) >=
              listener->backlog ||
          static_cast<int>(sockets_.size()) >= options_.max_sockets) {
        send_rst(src_port, hdr.stream_id);
        return;
      }
      int64_t fd = socket_locked();
      if (fd < 0) {
        send_rst(src_port, hdr.stream_id);
        return;
      }
      Socket* s = find(static_cast<int>(fd));
      s->state = SockState::syn_rcvd;
      s->conn_id = hdr.stream_id;
      s->remote = Endpoint{src_port, hdr.stream_id};
      s->local = Endpoint{port_id_, listen_id};
      s->listen_parent = listener->fd;
      s->snd_una = 0;
      s->snd_nxt = 1;
      s->tx.reset(1);
      s->rx.reset(1);
      s->rcv_nxt = 1;
      s->next_ctrl_at = 0;
      conns_[s->conn_id] = s->fd;
      tx_pending_.store(true, std::memory_order_release);
      return;
    }
    default:
      break;
  }

  auto cit = conns_.find(hdr.stream_id);
  if (cit == conns_.end()) {
    if (hdr.type != StreamFrameType::rst) send_rst(src_port, hdr.stream_id);
    return;
  }
  Socket* sp = find(cit->second);
  if (!sp) return;
  Socket& s = *sp;

  switch (hdr.type) {
    case StreamFrameType::syn_ack: {
      if (s.state == SockState::syn_sent) {
        s.state = SockState::established;
        s.snd_una = 1;
        s.rcv_nxt = 1;
        note_progress();
      }
      s.ack_pending = true;
      tx_pending_.store(true, std::memory_order_release);
      return;
    }
    case StreamFrameType::ack: {
      uint64_t ack_abs = unwrap_seq(s, hdr.ack, s.snd_una);
      if (s.state == SockState::syn_rcvd && ack_abs >= 1) {
        promote_to_established(s);
      }
      handle_ack_field(s, ack_abs, now_ns);
      return;
    }
    case StreamFrameType::data: {
      if (s.state == SockState::syn_rcvd) promote_to_established(s);
      uint64_t ack_abs = unwrap_seq(s, hdr.ack, s.snd_una);
      handle_ack_field(s, ack_abs, now_ns);
      uint64_t seq_abs = unwrap_seq(s, hdr.seq, s.rcv_nxt);
      if (seq_abs == s.rcv_nxt) {
        if (s.rx.free() >= data.size()) {
          s.rx.push(data);
          s.rcv_nxt += data.size();
          stats_.bytes_received += data.size();
          deliver_in_order(s);
          note_progress();
        }
        // else: no room; drop and let the retransmission try again
      } else if (seq_abs > s.rcv_nxt) {
        if (!s.ooo.count(seq_abs) &&
            s.ooo_bytes + data.size() <= s.rx.capacity()) {
          s.ooo.emplace(seq_abs,
                        std::vector<uint8_t>(data.begin(), data.end()));
          s.ooo_bytes += data.size();
        }
      }
      s.ack_pending = true;
      tx_pending_.store(true, std::memory_order_release);
      return;
    }
    case StreamFrameType::fin: {
      uint64_t ack_abs = unwrap_seq(s, hdr.ack, s.snd_una);
      handle_ack_field(s, ack_abs, now_ns);
      uint64_t seq_abs = unwrap_seq(s, hdr.seq, s.rcv_nxt);
      if (s.fin_received) {
        s.ack_pending = true;
      } else if (seq_abs == s.rcv_nxt) {
        apply_fin(s);
      } else if (seq_abs > s.rcv_nxt) {
        s.pending_fin_seq = seq_abs;
        s.ack_pending = true;
      } else {
        s.ack_pending = true;
      }
      tx_pending_.store(true, std::memory_order_release);
      return;
    }
    case StreamFrameType::rst: {
      if (s.state == SockState::syn_sent) s.refused = true;
      s.state = SockState::closed;
      conns_.erase(s.conn_id);
      note_progress();
      return;
    }
    default:
      return;
  }
}

void StackInstance::promote_to_established(Socket& s) {
  s.state = SockState::established;
  s.snd_una = std::max<uint64_t>(s.snd_una, 1);
  Socket* listener = s.listen_parent >= 0 ? find(s.listen_parent) : nullptr;
  if (listener && listener->state == SockState::listen) {
    listener->pending_accepts.push_back(s.fd);
  }
  note_progress();
}

void StackInstance::process_timers(uint64_t now_ns) {
  for (auto& [fd, sp] : sockets_) {
    Socket& s = *sp;
    if (!s.inflight.empty() && s.rto_deadline != kNoDeadline &&
        now_ns >= s.rto_deadline) {
      s.force_retransmit = true;
      s.rto_deadline = now_ns + options_.retransmit_timeout_ns;
      tx_pending_.store(true, std::memory_order_release);
    }
  }
}

// Builds one stream frame into the next staging slot and queues it for the
// burst. Caller enforces the ring budget.
void StackInstance::queue_segment(Socket& s, uint64_t seq, size_t len,
                                  bool is_retransmit, uint64_t now_ns) {
  Capability slot = staging_slots_[staging_next_ % staging_slots_.size()];
  staging_next_++;
  StreamHeader hdr;
  hdr.type = StreamFrameType::data;
  hdr.stream_id = s.conn_id;
  hdr.seq = static_cast<uint32_t>(seq);
  hdr.ack = static_cast<uint32_t>(s.rcv_nxt);
  hdr.length = static_cast<uint16_t>(len);
  uint8_t hdr_bytes[kStreamHeaderBytes];
  encode_stream_header(hdr_bytes, hdr);
  store(arena_, slot, std::span<const uint8_t>(hdr_bytes, kStreamHeaderBytes));
  auto [a, b] = s.tx.view(seq, len);
  store(arena_, set_address(slot, slot.base + kStreamHeaderBytes), a);
  if (!b.empty()) {
    store(arena_, set_address(slot, slot.base + kStreamHeaderBytes + a.size()),
          b);
  }
  tx_frames_.push_back(Frame{s.remote.port, port_id_, kProtoStream, slot,
                             static_cast<uint16_t>(kStreamHeaderBytes + len)});
  if (!is_retransmit) {
    if (s.inflight.empty()) {
      s.rto_deadline = now_ns + options_.retransmit_timeout_ns;
    }
    s.inflight.push_back(
        Socket::SegRec{seq, static_cast<uint32_t>(len), false});
  } else {
    stats_.retransmits++;
  }
  s.ack_pending = false;  // data frames carry the cumulative ack
  stats_.segments_sent++;
  stats_.bytes_sent += len;
}

void StackInstance::queue_control(Socket& s, StreamFrameType type,
                                  uint32_t stream_id, uint16_t dst_port) {
  Capability slot = staging_slots_[staging_next_ % staging_slots_.size()];
  staging_next_++;
  StreamHeader hdr;
  hdr.type = type;
  hdr.stream_id = stream_id;
  hdr.seq = static_cast<uint32_t>(s.snd_nxt);
  hdr.ack = type == StreamFrameType::syn ? s.remote.stream_id
                                         : static_cast<uint32_t>(s.rcv_nxt);
  hdr.length = 0;
  if (type == StreamFrameType::syn || type == StreamFrameType::syn_ack) {
    hdr.seq = 0;
  }
  if (type == StreamFrameType::fin) {
    hdr.seq = static_cast<uint32_t>(s.fin_seq);
  }
  uint8_t hdr_bytes[kStreamHeaderBytes];
  encode_stream_header(hdr_bytes, hdr);
  store(arena_, slot, std::span<const uint8_t>(hdr_bytes, kStreamHeaderBytes));
  tx_frames_.push_back(Frame{dst_port, port_id_, kProtoStream, slot,
                             static_cast<uint16_t>(kStreamHeaderBytes)});
  if (type == StreamFrameType::ack) stats_.acks_sent++;
}

void StackInstance::emit_frames(uint64_t now_ns) {
  Port& port = nic_.port(port_id_);
  size_t budget = std::min<size_t>(
      {staging_slots_.size(), static_cast<size_t>(port.tx_free()),
       options_.tx_burst});
  if (budget == 0) return;
  tx_frames_.clear();
  staging_next_ = 0;

  size_t max_seg = nic_.options().mtu - kStreamHeaderBytes;
  bool work_left = false;

  // Pending resets first; they are small and unblock peers.
  while (!rst_queue_.empty() && tx_frames_.size() < budget) {
    auto [dst, conn] = rst_queue_.front();
    rst_queue_.pop_front();
    Socket dummy;
    dummy.snd_nxt = 0;
    dummy.rcv_nxt = 0;
    queue_control(dummy, StreamFrameType::rst, conn, dst);
  }

  // Handshake control frames with their own retransmission cadence.
  for (auto& [fd, sp] : sockets_) {
    if (tx_frames_.size() >= budget) {
      work_left = true;
      break;
    }
    Socket& s = *sp;
    if (s.state == SockState::syn_sent && now_ns >= s.next_ctrl_at) {
      queue_control(s, StreamFrameType::syn, s.conn_id, s.remote.port);
      s.next_ctrl_at = now_ns + options_.retransmit_timeout_ns;
    } else if (s.state == SockState::syn_rcvd && now_ns >= s.next_ctrl_at) {
      queue_control(s, StreamFrameType::syn_ack, s.conn_id, s.remote.port);
      s.next_ctrl_at = now_ns + options_.retransmit_timeout_ns;
    }
  }

  // Data segments, round-robin across sockets so one stream cannot starve
  // the others.
  if (!sockets_.empty()) {
    std::vector<Socket*> order;
    order.reserve(sockets_.size());
    for (auto& [fd, sp] : sockets_) order.push_back(sp.get());
    size_t start = emit_rr_cursor_ % order.size();
    emit_rr_cursor_++;
    bool emitted = true;
    while (emitted && tx_frames_.size() < budget) {
      emitted = false;
      for (size_t k = 0; k < order.size() && tx_frames_.size() < budget; ++k) {
        Socket& s = *order[(start + k) % order.size()];
        if (s.state != SockState::established &&
            s.state != SockState::close_wait &&
            s.state != SockState::fin_wait) {
          continue;
        }
        if (s.force_retransmit && !s.inflight.empty()) {
          const Socket::SegRec& seg = s.inflight.front();
          if (seg.is_fin) {
            queue_control(s, StreamFrameType::fin, s.conn_id, s.remote.port);
            stats_.retransmits++;
          } else {
            queue_segment(s, seg.seq, seg.len, true, now_ns);
          }
          s.force_retransmit = false;
          s.rto_deadline = now_ns + options_.retransmit_timeout_ns;
          emitted = true;
          continue;
        }
        uint64_t unsent = s.tx.end_pos() > s.snd_nxt
                              ? s.tx.end_pos() - s.snd_nxt
                              : 0;
        if (unsent > 0) {
          size_t len = static_cast<size_t>(std::min<uint64_t>(unsent, max_seg));
          queue_segment(s, s.snd_nxt, len, false, now_ns);
          s.snd_nxt += len;
          emitted = true;
          continue;
        }
        if (s.fin_queued && !s.fin_sent && s.snd_nxt == s.tx.end_pos()) {
          s.fin_seq = s.snd_nxt;
          s.snd_nxt += 1;
          s.fin_sent = true;
          if (s.inflight.empty()) {
            s.rto_deadline = now_ns + options_.retransmit_timeout_ns;
          }
          s.inflight.push_back(Socket::SegRec{s.fin_seq, 1, true});
          if (s.state == SockState::established ||
              s.state == SockState::syn_rcvd) {
            s.state = SockState::fin_wait;
          } else if (s.state == SockState::close_wait) {
            s.state = SockState::fin_wait;
          }
          queue_control(s, StreamFrameType::fin, s.conn_id, s.remote.port);
          emitted = true;
        }
      }
    }
  }

  // Standalone cumulative acks for sockets that still owe one.
  for (auto& [fd, sp] : sockets_) {
    if (tx_frames_.size() >= budget) {
      work_left = true;
      break;
    }
    Socket& s = *sp;
    if (s.ack_pending && s.state != SockState::listen &&
        s.state != SockState::syn_sent && s.conn_id != 0) {
      queue_control(s, StreamFrameType::ack, s.conn_id, s.remote.port);
      s.ack_pending = false;
    }
  }

  if (!tx_frames_.empty()) {
    nic_.tx_burst(port_id_, tx_frames_);
    tx_frames_.clear();
  }

  // Anything still owed keeps the pending flag set for the next turn.
  if (!work_left) {
    for (auto& [fd, sp] : sockets_) {
      Socket& s = *sp;
      if (s.ack_pending || s.force_retransmit ||
          (s.fin_queued && !s.fin_sent) ||
          s.tx.end_pos() > s.snd_nxt ||
          (s.state == SockState::syn_sent || s.state == SockState::syn_rcvd)) {
        work_left = true;
        break;
      }
    }
    work_left = work_left || !rst_queue_.empty();
  }
  tx_pending_.store(work_left, std::memory_order_release);
}

void StackInstance::send_rst(uint16_t dst_port, uint32_t stream_id) {
  if (rst_queue_.size() < 64) rst_queue_.emplace_back(dst_port, stream_id);
  tx_pending_.store(true, std::memory_order_release);
}

// ---------------------------------------------------------------------------
// Cross-compartment entries

std::vector<EntrySpec> StackInstance::make_api_entries() {
  std::vector<EntrySpec> entries(static_cast<size_t>(ApiEntry::count));
  auto at = [&](ApiEntry e) -> EntrySpec& {
    return entries[static_cast<size_t>(e)];
  };

  at(ApiEntry::socket) = {
      "ff_socket",
      [this](Compartment&, CallArgs&) { return ff_socket(); },
      nullptr};
  at(ApiEntry::bind) = {
      "ff_bind",
      [this](Compartment&, CallArgs& a) {
        return ff_bind(static_cast<int>(a.scalars[0]),
                       Endpoint{static_cast<uint16_t>(a.scalars[1]),
                                static_cast<uint32_t>(a.scalars[2])});
      },
      nullptr};
  at(ApiEntry::listen) = {
      "ff_listen",
      [this](Compartment&, CallArgs& a) {
        return ff_listen(static_cast<int>(a.scalars[0]),
                         static_cast<int>(a.scalars[1]));
      },
      nullptr};
  at(ApiEntry::connect) = {
      "ff_connect",
      [this](Compartment&, CallArgs& a) {
        return ff_connect(static_cast<int>(a.scalars[0]),
                          Endpoint{static_cast<uint16_t>(a.scalars[1]),
                                   static_cast<uint32_t>(a.scalars[2])});
      },
      nullptr};
  at(ApiEntry::accept) = {
      "ff_accept",
      [this](Compartment&, CallArgs& a) {
        return ff_accept(static_cast<int>(a.scalars[0]));
      },
      nullptr};
  at(ApiEntry::close) = {
      "ff_close",
      [this](Compartment&, CallArgs& a) {
        return ff_close(static_cast<int>(a.scalars[0]));
      },
      nullptr};
  at(ApiEntry::write) = {
      "ff_write",
      [this](Compartment&, CallArgs& a) {
        return ff_write(static_cast<int>(a.scalars[0]), a.caps.at(0),
                        static_cast<size_t>(a.scalars[1]));
      },
      [](Compartment&, const CallArgs& a) {
        if (a.caps.empty()) {
          throw CapFault(FaultKind::tag_invalid, Capability{},
                         "ff_write needs a buffer capability");
        }
        check_access(a.caps[0], a.scalars[1], Perm::load);
      }};
  at(ApiEntry::read) = {
      "ff_read",
      [this](Compartment&, CallArgs& a) {
        return ff_read(static_cast<int>(a.scalars[0]), a.caps.at(0),
                       static_cast<size_t>(a.scalars[1]));
      },
      [](Compartment&, const CallArgs& a) {
        if (a.caps.empty()) {
          throw CapFault(FaultKind::tag_invalid, Capability{},
                         "ff_read needs a buffer capability");
        }
        check_access(a.caps[0], a.scalars[1], Perm::store);
      }};
  at(ApiEntry::poll_events) = {
      "ff_poll_events",
      [this](Compartment&, CallArgs& a) {
        size_t max = static_cast<size_t>(a.scalars[0]);
        std::vector<ReadinessEvent> events(std::min<size_t>(max, 256));
        size_t n = ff_poll_events(events);
        std::vector<uint8_t> wire(n * 8, 0);
        for (size_t i = 0; i < n; ++i) {
          uint32_t fd = static_cast<uint32_t>(events[i].fd);
          wire[i * 8 + 0] = static_cast<uint8_t>(fd);
          wire[i * 8 + 1] = static_cast<uint8_t>(fd >> 8);
          wire[i * 8 + 2] = static_cast<uint8_t>(fd >> 16);
          wire[i * 8 + 3] = static_cast<uint8_t>(fd >> 24);
          wire[i * 8 + 4] = static_cast<uint8_t>(events[i].kind);
        }
        store(arena_, a.caps.at(0),
              std::span<const uint8_t>(wire.data(), wire.size()));
        return static_cast<int64_t>(n);
      },
      [](Compartment&, const CallArgs& a) {
        if (a.caps.empty()) {
          throw CapFault(FaultKind::tag_invalid, Capability{},
                         "ff_poll_events needs an output capability");
        }
        check_access(a.caps[0], a.scalars[0] * 8, Perm::store);
      }};
  return entries;
}

uint32_t read_progress(Arena& arena, const Capability& progress_block) {
  return atomic_load_u32(arena,
                         set_address(progress_block, progress_block.base));
}

uint32_t wait_progress(Compartment& ctx, const Capability& progress_block,
                       uint32_t seen, uint64_t timeout_ns) {
  Arena& arena = ctx.arena();
  Capability counter = set_address(progress_block, progress_block.base);
  Capability waiters = set_address(progress_block, progress_block.base + 4);
  uint32_t cur = atomic_load_u32(arena, counter);
  if (cur != seen) return cur;
  atomic_fetch_add_u32(arena, waiters, 1);
  cur = atomic_load_u32(arena, counter);
  if (cur == seen) {
    ctx.sync_wait(counter, seen, timeout_ns);
    cur = atomic_load_u32(arena, counter);
  }
  atomic_fetch_add_u32(arena, waiters, static_cast<uint32_t>(-1));
  return cur;
}

}  // namespace capnet
