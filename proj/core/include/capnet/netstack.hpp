#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "capnet/cap_mutex.hpp"
#include "capnet/intravisor.hpp"
#include "capnet/vnic.hpp"

/// User-space stream stack in the poll-mode mold: a main loop drains the NIC
/// rings, runs the protocol state machines and then a user callback, all
/// under one coarse coordination mutex. The socket-like ff_* API takes
/// capability buffer arguments; span overloads exist for the unchecked
/// baseline configuration.
namespace capnet {

enum class SockState : uint8_t {
  closed,
  listen,
  syn_sent,
  syn_rcvd,
  established,
  fin_wait,
  close_wait,
};

const char* to_string(SockState st);

enum class EventKind : uint8_t { readable, writable, acceptable, closed };

struct ReadinessEvent {
  int fd = -1;
  EventKind kind = EventKind::readable;
};

struct Endpoint {
  uint16_t port = 0;
  uint32_t stream_id = 0;
  friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

/// Stream frame payload encoding, little endian, 15 bytes of header:
/// type u8 | stream_id u32 | seq u32 | ack u32 | length u16 | data.
/// SYN carries the target listen id in the ack field; pure ACK frames carry
/// the sender's next sequence in seq.
enum class StreamFrameType : uint8_t {
  syn = 1,
  syn_ack = 2,
  ack = 3,
  data = 4,
  fin = 5,
  rst = 6,
};

inline constexpr size_t kStreamHeaderBytes = 15;

struct StreamHeader {
  StreamFrameType type = StreamFrameType::ack;
  uint32_t stream_id = 0;
  uint32_t seq = 0;
  uint32_t ack = 0;
  uint16_t length = 0;
};

void encode_stream_header(std::span<uint8_t> out, const StreamHeader& hdr);
bool decode_stream_header(std::span<const uint8_t> in, StreamHeader& hdr);

struct StackOptions {
  size_t queue_capacity = 256 * 1024;
  uint64_t retransmit_timeout_ns = 50'000'000;
  size_t rx_burst = 32;
  size_t tx_burst = 32;
  int fast_retransmit_dup_acks = 3;
  int max_sockets = 64;
};

struct StackStats {
  uint64_t bytes_sent = 0;
  uint64_t bytes_received = 0;
  uint64_t segments_sent = 0;
  uint64_t segments_received = 0;
  uint64_t retransmits = 0;
  uint64_t acks_sent = 0;
  uint64_t loop_iterations = 0;
  uint64_t loop_ns_max = 0;
  uint64_t loop_slow_turns = 0;  // turns longer than 1 ms
};

/// Indices of the cross-compartment API entries, in publication order.
enum class ApiEntry : size_t {
  socket = 0,
  bind,
  listen,
  connect,
  accept,
  close,
  write,
  read,
  poll_events,
  count,
};

class StackInstance {
 public:
  using TimeSource = std::function<uint64_t()>;
  using UserCallback = std::function<void(StackInstance&)>;

  /// `port` must belong to an attached NIC. `staging` provides segment
  /// assembly slots inside the owning compartment's pool region (at least
  /// tx_burst * mtu bytes, load+store). `mutex_block` and `progress_block`
  /// are shared-region words for the loop mutex and the progress counter.
  StackInstance(Arena& arena, VirtualNic& nic, uint16_t port_id,
                Capability staging, Capability mutex_block,
                Capability progress_block, CapMutex::SyncOps sync_ops,
                TimeSource time_source, StackOptions options = {},
                Intravisor* lock_registry = nullptr, int compartment_id = -1);

  StackInstance(const StackInstance&) = delete;
  StackInstance& operator=(const StackInstance&) = delete;
  ~StackInstance();

  // Socket lifecycle, non-blocking BSD-flavored semantics.
  int64_t ff_socket();
  int64_t ff_bind(int fd, Endpoint local);
  int64_t ff_listen(int fd, int backlog);
  /// Initiates or polls a connect: in_progress while the handshake runs,
  /// 0 once established, refused after a reset.
  int64_t ff_connect(int fd, Endpoint remote);
  int64_t ff_accept(int fd);
  int64_t ff_close(int fd);

  // Checked data path: buffers are capabilities.
  int64_t ff_write(int fd, const Capability& buf, size_t nbytes);
  int64_t ff_read(int fd, const Capability& buf, size_t nbytes);
  // Unchecked data path for the baseline configuration.
  int64_t ff_write(int fd, std::span<const uint8_t> buf);
  int64_t ff_read(int fd, std::span<uint8_t> out);

  /// Level-triggered readiness scan.
  size_t ff_poll_events(std::span<ReadinessEvent> out);

  /// One main-loop turn under the loop mutex: drain RX, apply timers, emit
  /// segments, then run the user callback once. Returns the number of frames
  /// moved (received plus emitted), so callers can yield on empty turns
  /// instead of keeping the host core permanently busy.
  uint64_t main_loop_iteration();

  /// Lock-free peek used by dedicated loop threads to avoid taking the
  /// mutex when there is nothing to do.
  bool has_pending_work(uint64_t now_ns) const;

  /// Moves frames across the in-process wire from this loop's context.
  void pump_wire(uint64_t now_ns);

  void set_user_callback(UserCallback cb) { callback_ = std::move(cb); }
  CapMutex& loop_mutex() { return mutex_; }

  /// Cross-compartment wrappers in ApiEntry order; each acquires the loop
  /// mutex, and capability arguments are pre-validated at the gate with the
  /// caller attributed.
  std::vector<EntrySpec> make_api_entries();

  /// Bumps the shared progress word and wakes sleepers; called by the loop
  /// whenever socket-visible state advances.
  const Capability& progress_block() const { return progress_block_; }

  uint16_t port_id() const { return port_id_; }
  SockState socket_state(int fd);
  /// Diagnostic snapshot of one socket's sender state:
  /// {unacked, unsent, free} bytes. Takes the loop mutex.
  std::array<uint64_t, 3> debug_sender_state(int fd);
  const StackStats& stats() const { return stats_; }
  uint64_t mutex_contended_acquires() const {
    return mutex_.contended_acquires();
  }

 private:
  struct Socket;

  Socket* find(int fd);
  void assert_locked() const;

  int64_t socket_locked();
  int64_t bind_locked(int fd, Endpoint local);
  int64_t listen_locked(int fd, int backlog);
  int64_t connect_locked(int fd, Endpoint remote);
  int64_t accept_locked(int fd);
  int64_t close_locked(int fd);
  int64_t write_locked(int fd, const uint8_t* data, size_t n,
                       const Capability* cap, size_t requested);
  int64_t read_locked(int fd, uint8_t* out, size_t n, const Capability* cap,
                      size_t requested);
  size_t poll_events_locked(std::span<ReadinessEvent> out);

  template <typename Fn>
  int64_t with_lock(Fn&& fn);

  void process_rx(uint64_t now_ns);
  void process_timers(uint64_t now_ns);
  void emit_frames(uint64_t now_ns);
  void dispatch(const StreamHeader& hdr, uint16_t src_port,
                std::span<const uint8_t> data, uint64_t now_ns);
  void handle_ack_field(Socket& s, uint64_t ack_abs, uint64_t now_ns);
  void deliver_in_order(Socket& s);
  void apply_fin(Socket& s);
  void promote_to_established(Socket& s);
  void send_rst(uint16_t dst_port, uint32_t stream_id);
  void queue_segment(Socket& s, uint64_t seq, size_t len, bool is_retransmit,
                     uint64_t now_ns);
  void queue_control(Socket& s, StreamFrameType type, uint32_t stream_id,
                     uint16_t dst_port);
  void note_progress();
  void update_rto_hint();
  uint64_t unwrap_seq(const Socket& s, uint32_t wire_seq,
                      uint64_t reference) const;
  uint32_t next_conn_id();

  Arena& arena_;
  VirtualNic& nic_;
  uint16_t port_id_;
  Capability staging_;
  std::vector<Capability> staging_slots_;
  size_t staging_next_ = 0;
  Capability progress_block_;
  Capability progress_word_;
  Capability waiters_word_;
  CapMutex mutex_;
  CapMutex::SyncOps sync_ops_;
  TimeSource now_;
  StackOptions options_;

  std::map<int, std::unique_ptr<Socket>> sockets_;
  std::unordered_map<uint32_t, int> conns_;      // conn id -> fd
  std::unordered_map<uint32_t, int> listeners_;  // listen id -> fd
  std::deque<std::pair<uint16_t, uint32_t>> rst_queue_;
  int next_fd_ = 3;
  uint16_t conn_counter_ = 0;

  UserCallback callback_;
  std::vector<RxFrame> rx_scratch_;
  std::vector<Frame> tx_frames_;
  std::vector<uint8_t> frame_scratch_;
  size_t emit_rr_cursor_ = 0;

  std::atomic<bool> tx_pending_{false};
  std::atomic<uint64_t> rto_hint_ns_{0};
  bool progress_made_ = false;

  StackStats stats_;
};

/// App-side blocking backoff: waits on the stack's progress word through the
/// caller's own sync trampoline until it moves past `seen` or the timeout
/// elapses. Returns the latest observed value.
uint32_t wait_progress(Compartment& ctx, const Capability& progress_block,
                       uint32_t seen, uint64_t timeout_ns);
uint32_t read_progress(Arena& arena, const Capability& progress_block);

}  // namespace capnet
