#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

#include "capnet/vnic.hpp"

namespace capnet {

struct WireConfig {
  double rate_mbps = 100.0;
  uint64_t latency_ns = 10'000;
  double loss_probability = 0.0;
  uint64_t seed = 1;
};

struct WireDirectionCounters {
  std::atomic<uint64_t> frames_accepted{0};
  std::atomic<uint64_t> frames_delivered{0};
  std::atomic<uint64_t> frames_dropped_loss{0};
  std::atomic<uint64_t> frames_dropped_overflow{0};
  std::atomic<uint64_t> bytes_delivered{0};
  // pump-state diagnostics
  std::atomic<uint64_t> pumps_idle{0};     // nothing pending in TX
  std::atomic<uint64_t> pumps_starved{0};  // frame pending, no tokens
  std::atomic<uint64_t> pumps_moved{0};    // serialized at least one frame
  std::atomic<uint64_t> idle_ns{0};        // total sender-empty time
  std::atomic<uint64_t> idle_stretches{0};
  std::atomic<uint64_t> idle_longest_ns{0};
};

/// Continuously replenished token bucket, starting empty. The burst
/// capacity is 1 ms of line rate (never less than four full frames): wide
/// enough that a busy loop iteration between pumps forfeits no budget,
/// narrow enough that bursts stay invisible over second-scale windows.
class TokenBucket {
 public:
  TokenBucket(double rate_bits_per_s, double min_capacity_bits);
  bool try_consume(uint64_t bits, uint64_t now_ns);

 private:
  double rate_bits_per_ns_;
  double capacity_bits_;
  double tokens_;
  uint64_t last_ns_ = UINT64_MAX;  // adopts the caller's clock on first use
};

/// Bidirectional in-process link between two ports: applies the rate limit,
/// propagation latency and seeded random loss, then copies frames into the
/// peer's RX ring. Poll-driven; start() spawns a pump thread, tests may call
/// pump() directly with their own clock.
class Wire {
 public:
  Wire(Port& a, Port& b, WireConfig config);
  ~Wire();

  Wire(const Wire&) = delete;
  Wire& operator=(const Wire&) = delete;

  void start();
  void stop();
  /// One pump step at the given instant. Not thread safe against itself.
  void pump(uint64_t now_ns);
  /// Cooperative pump: whichever loop thread gets the flag first moves the
  /// frames, everyone else skips. Keeps delivery in exactly one context at a
  /// time without a dedicated thread.
  void pump_shared(uint64_t now_ns);

  const WireConfig& config() const { return config_; }
  /// Counters for the a->b direction (index 0) and b->a (index 1).
  const WireDirectionCounters& counters(size_t direction) const {
    return dirs_[direction].counters;
  }
  /// True once every accepted frame has been delivered or dropped.
  bool drained() const;

 private:
  struct InFlight {
    uint64_t deliver_at_ns;
    uint16_t dst, src;
    uint8_t proto;
    std::vector<uint8_t> payload;
  };
  struct Direction {
    Port* from;
    Port* to;
    std::deque<InFlight> flight;
    WireDirectionCounters counters;
    uint64_t idle_since = 0;
  };

  void pump_direction(Direction& dir, TokenBucket& bucket, uint64_t now_ns);
  std::vector<uint8_t> take_buffer();
  void recycle_buffer(std::vector<uint8_t>&& buf);

  WireConfig config_;
  Direction dirs_[2];
  TokenBucket buckets_[2];
  uint64_t rng_state_;
  std::vector<std::vector<uint8_t>> buffer_pool_;

  std::thread pump_thread_;
  std::atomic<bool> running_{false};
  std::atomic_flag pump_flag_ = ATOMIC_FLAG_INIT;
};

/// One port bridged onto a UDP socket, frame-header encoding on the wire, so
/// two harness processes can interoperate. Rate, latency and loss are applied
/// on the send side with the same semantics as the in-process wire.
class DatagramWire {
 public:
  DatagramWire(Port& port, const std::string& local_host, uint16_t local_port,
               const std::string& remote_host, uint16_t remote_port,
               WireConfig config);
  ~DatagramWire();

  DatagramWire(const DatagramWire&) = delete;
  DatagramWire& operator=(const DatagramWire&) = delete;

  void start();
  void stop();
  void pump(uint64_t now_ns);

  const WireDirectionCounters& tx_counters() const { return tx_counters_; }
  const WireDirectionCounters& rx_counters() const { return rx_counters_; }

 private:
  Port& port_;
  WireConfig config_;
  int fd_ = -1;
  TokenBucket bucket_;
  uint64_t rng_state_;
  std::deque<std::pair<uint64_t, std::vector<uint8_t>>> flight_;
  WireDirectionCounters tx_counters_;
  WireDirectionCounters rx_counters_;

  std::thread pump_thread_;
  std::atomic<bool> running_{false};
};

}  // namespace capnet
