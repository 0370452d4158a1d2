#include "capnet/wire.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <stdexcept>

namespace capnet {

namespace {

uint64_t steady_now_ns() {
  return static_cast<uint64_t>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(
          std::chrono::steady_clock::now().time_since_epoch())
          .count());
}

// xorshift64*, deterministic per seed for reproducible loss patterns.
uint64_t next_rand(uint64_t& state) {
  state ^= state >> 12;
  state ^= state << 25;
  state ^= state >> 27;
  return state * 0x2545f4914f6cdd1dull;
}

bool lose_frame(uint64_t& state, double probability) {
  if (probability <= 0.0) return false;
  double draw = static_cast<double>(next_rand(state) >> 11) / 9007199254740992.0;
  return draw < probability;
}

}  // namespace

void Port::pump_wire(uint64_t now_ns) {
  if (wire_) wire_->pump_shared(now_ns);
}

TokenBucket::TokenBucket(double rate_bits_per_s, double min_capacity_bits)
    : rate_bits_per_ns_(rate_bits_per_s / 1e9),
      capacity_bits_(std::max(rate_bits_per_s / 1000.0, min_capacity_bits)),
      tokens_(0.0) {}  // starts empty so short runs cannot front-load a burst

bool TokenBucket::try_consume(uint64_t bits, uint64_t now_ns) {
  if (last_ns_ == UINT64_MAX) last_ns_ = now_ns;
  if (now_ns > last_ns_) {
    tokens_ += rate_bits_per_ns_ * static_cast<double>(now_ns - last_ns_);
    if (tokens_ > capacity_bits_) tokens_ = capacity_bits_;
    last_ns_ = now_ns;
  }
  if (tokens_ < static_cast<double>(bits)) return false;
  tokens_ -= static_cast<double>(bits);
  return true;
}

Wire::Wire(Port& a, Port& b, WireConfig config)
    : config_(config),
      buckets_{TokenBucket(config.rate_mbps * 1e6,
                           4.0 * 8.0 * (a.mtu() + kFrameHeaderBytes)),
               TokenBucket(config.rate_mbps * 1e6,
                           4.0 * 8.0 * (b.mtu() + kFrameHeaderBytes))},
      rng_state_(config.seed ? config.seed : 0x9e3779b97f4a7c15ull) {
  if (&a == &b) throw std::runtime_error("cannot wire a port to itself");
  if (a.wire_ || b.wire_) throw std::runtime_error("port already wired");
  dirs_[0].from = &a;
  dirs_[0].to = &b;
  dirs_[1].from = &b;
  dirs_[1].to = &a;
  a.wire_ = this;
  b.wire_ = this;
  // Prewarm the flight buffer pool so the hot path never allocates.
  size_t warm = std::min<size_t>(a.ring_capacity() + b.ring_capacity(), 4096);
  for (size_t i = 0; i < warm; ++i) {
    buffer_pool_.emplace_back(std::max(a.mtu(), b.mtu()));
  }
}

Wire::~Wire() {
  stop();
  dirs_[0].from->wire_ = nullptr;
  dirs_[1].from->wire_ = nullptr;
}

void Wire::start() {
  if (running_.exchange(true)) return;
  pump_thread_ = std::thread([this] {
    while (running_.load(std::memory_order_acquire)) {
      pump(steady_now_ns());
      std::this_thread::sleep_for(std::chrono::microseconds(50));
    }
  });
}

void Wire::stop() {
  if (!running_.exchange(false)) {
    if (pump_thread_.joinable()) pump_thread_.join();
    return;
  }
  if (pump_thread_.joinable()) pump_thread_.join();
}

std::vector<uint8_t> Wire::take_buffer() {
  if (!buffer_pool_.empty()) {
    auto buf = std::move(buffer_pool_.back());
    buffer_pool_.pop_back();
    return buf;
  }
  return {};
}

void Wire::recycle_buffer(std::vector<uint8_t>&& buf) {
  if (buffer_pool_.size() < 4096) buffer_pool_.push_back(std::move(buf));
}

void Wire::pump(uint64_t now_ns) {
  pump_direction(dirs_[0], buckets_[0], now_ns);
  pump_direction(dirs_[1], buckets_[1], now_ns);
}

void Wire::pump_shared(uint64_t now_ns) {
  if (pump_flag_.test_and_set(std::memory_order_acquire)) return;
  pump(now_ns);
  pump_flag_.clear(std::memory_order_release);
}

void Wire::pump_direction(Direction& dir, TokenBucket& bucket,
                          uint64_t now_ns) {
  // Deliver what has finished propagating.
  while (!dir.flight.empty() && dir.flight.front().deliver_at_ns <= now_ns) {
    InFlight& f = dir.flight.front();
    if (dir.to->deliver_rx(f.dst, f.src, f.proto, f.payload)) {
      dir.counters.frames_delivered.fetch_add(1, std::memory_order_relaxed);
      dir.counters.bytes_delivered.fetch_add(f.payload.size(),
                                             std::memory_order_relaxed);
    } else {
      dir.counters.frames_dropped_overflow.fetch_add(1,
                                                     std::memory_order_relaxed);
    }
    recycle_buffer(std::move(f.payload));
    dir.flight.pop_front();
  }

  // Serialize new frames out of the TX ring as tokens allow.
  uint16_t length = 0;
  bool any_pending = false;
  bool moved = false;
  bool starved = false;
  while (dir.from->peek_tx_length(length)) {
    any_pending = true;
    uint64_t bits = 8ull * (kFrameHeaderBytes + length);
    if (!bucket.try_consume(bits, now_ns)) {
      starved = true;
      break;
    }
    std::vector<uint8_t> payload = take_buffer();
    payload.resize(dir.from->mtu());
    uint16_t dst = 0, src = 0, actual = 0;
    uint8_t proto = 0;
    if (!dir.from->consume_tx(dst, src, proto,
                              std::span<uint8_t>(payload.data(), payload.size()),
                              actual)) {
      recycle_buffer(std::move(payload));
      break;
    }
    payload.resize(actual);
    dir.counters.frames_accepted.fetch_add(1, std::memory_order_relaxed);
    if (lose_frame(rng_state_, config_.loss_probability)) {
      dir.counters.frames_dropped_loss.fetch_add(1, std::memory_order_relaxed);
      recycle_buffer(std::move(payload));
      continue;
    }
    dir.flight.push_back(InFlight{now_ns + config_.latency_ns, dst, src, proto,
                                  std::move(payload)});
    moved = true;
  }
  if (!any_pending) {
    dir.counters.pumps_idle.fetch_add(1, std::memory_order_relaxed);
    if (dir.idle_since == 0) dir.idle_since = now_ns;
  } else {
    if (dir.idle_since != 0 && now_ns > dir.idle_since) {
      uint64_t stretch = now_ns - dir.idle_since;
      dir.counters.idle_ns.fetch_add(stretch, std::memory_order_relaxed);
      dir.counters.idle_stretches.fetch_add(1, std::memory_order_relaxed);
      uint64_t prev = dir.counters.idle_longest_ns.load(std::memory_order_relaxed);
      while (stretch > prev &&
             !dir.counters.idle_longest_ns.compare_exchange_weak(prev, stretch)) {
      }
    }
    dir.idle_since = 0;
    if (moved) {
      dir.counters.pumps_moved.fetch_add(1, std::memory_order_relaxed);
    } else if (starved) {
      dir.counters.pumps_starved.fetch_add(1, std::memory_order_relaxed);
    }
  }
}

bool Wire::drained() const {
  for (const Direction& dir : dirs_) {
    uint64_t accepted = dir.counters.frames_accepted.load();
    uint64_t settled = dir.counters.frames_delivered.load() +
                       dir.counters.frames_dropped_loss.load() +
                       dir.counters.frames_dropped_overflow.load();
    if (accepted != settled) return false;
    if (!dir.flight.empty()) return false;
    if (dir.from->tx_pending() != 0) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// DatagramWire

DatagramWire::DatagramWire(Port& port, const std::string& local_host,
                           uint16_t local_port, const std::string& remote_host,
                           uint16_t remote_port, WireConfig config)
    : port_(port),
      config_(config),
      bucket_(config.rate_mbps * 1e6,
              4.0 * 8.0 * (port.mtu() + kFrameHeaderBytes)),
      rng_state_(config.seed ? config.seed : 0x9e3779b97f4a7c15ull) {
  fd_ = ::socket(AF_INET, SOCK_DGRAM, 0);
  if (fd_ < 0) throw std::runtime_error("datagram wire: socket() failed");

  sockaddr_in local{};
  local.sin_family = AF_INET;
  local.sin_port = htons(local_port);
  if (inet_pton(AF_INET, local_host.c_str(), &local.sin_addr) != 1) {
    ::close(fd_);
    throw std::runtime_error("datagram wire: bad local host " + local_host);
  }
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&local), sizeof local) != 0) {
    ::close(fd_);
    throw std::runtime_error("datagram wire: bind failed");
  }

  sockaddr_in remote{};
  remote.sin_family = AF_INET;
  remote.sin_port = htons(remote_port);
  if (inet_pton(AF_INET, remote_host.c_str(), &remote.sin_addr) != 1) {
    ::close(fd_);
    throw std::runtime_error("datagram wire: bad remote host " + remote_host);
  }
  if (::connect(fd_, reinterpret_cast<sockaddr*>(&remote), sizeof remote) != 0) {
    ::close(fd_);
    throw std::runtime_error("datagram wire: connect failed");
  }
  int flags = fcntl(fd_, F_GETFL, 0);
  fcntl(fd_, F_SETFL, flags | O_NONBLOCK);
}

DatagramWire::~DatagramWire() {
  stop();
  if (fd_ >= 0) ::close(fd_);
}

void DatagramWire::start() {
  if (running_.exchange(true)) return;
  pump_thread_ = std::thread([this] {
    while (running_.load(std::memory_order_acquire)) {
      pump(steady_now_ns());
      std::this_thread::sleep_for(std::chrono::microseconds(50));
    }
  });
}

void DatagramWire::stop() {
  running_.store(false);
  if (pump_thread_.joinable()) pump_thread_.join();
}

void DatagramWire::pump(uint64_t now_ns) {
  // Send what finished the modeled propagation delay.
  while (!flight_.empty() && flight_.front().first <= now_ns) {
    std::vector<uint8_t>& datagram = flight_.front().second;
    ::send(fd_, datagram.data(), datagram.size(), 0);
    tx_counters_.frames_delivered.fetch_add(1, std::memory_order_relaxed);
    tx_counters_.bytes_delivered.fetch_add(datagram.size(),
                                           std::memory_order_relaxed);
    flight_.pop_front();
  }

  uint16_t length = 0;
  while (port_.peek_tx_length(length)) {
    uint64_t bits = 8ull * (kFrameHeaderBytes + length);
    if (!bucket_.try_consume(bits, now_ns)) break;
    std::vector<uint8_t> datagram(kFrameHeaderBytes + port_.mtu());
    uint16_t dst = 0, src = 0, actual = 0;
    uint8_t proto = 0;
    if (!port_.consume_tx(
            dst, src, proto,
            std::span<uint8_t>(datagram.data() + kFrameHeaderBytes,
                               port_.mtu()),
            actual)) {
      break;
    }
    tx_counters_.frames_accepted.fetch_add(1, std::memory_order_relaxed);
    if (lose_frame(rng_state_, config_.loss_probability)) {
      tx_counters_.frames_dropped_loss.fetch_add(1, std::memory_order_relaxed);
      continue;
    }
    datagram.resize(kFrameHeaderBytes + actual);
    encode_frame_header(std::span<uint8_t>(datagram.data(), kFrameHeaderBytes),
                        dst, src, proto, actual);
    flight_.emplace_back(now_ns + config_.latency_ns, std::move(datagram));
  }

  // Drain the socket into the RX ring.
  uint8_t buf[65536];
  for (;;) {
    ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
    if (n <= 0) break;
    uint16_t dst = 0, src = 0, flen = 0;
    uint8_t proto = 0;
    if (!decode_frame_header(std::span<const uint8_t>(buf, static_cast<size_t>(n)),
                             dst, src, proto, flen)) {
      continue;
    }
    if (port_.deliver_rx(dst, src, proto,
                         std::span<const uint8_t>(buf + kFrameHeaderBytes,
                                                  flen))) {
      rx_counters_.frames_delivered.fetch_add(1, std::memory_order_relaxed);
    } else {
      rx_counters_.frames_dropped_overflow.fetch_add(1,
                                                     std::memory_order_relaxed);
    }
  }
}

}  // namespace capnet
