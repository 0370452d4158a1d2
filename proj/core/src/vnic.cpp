#include "capnet/vnic.hpp"

#include <cstring>
#include <stdexcept>

namespace capnet {

void encode_frame_header(std::span<uint8_t> out, uint16_t dst, uint16_t src,
                         uint8_t proto, uint16_t length) {
  out[0] = static_cast<uint8_t>(dst);
  out[1] = static_cast<uint8_t>(dst >> 8);
  out[2] = static_cast<uint8_t>(src);
  out[3] = static_cast<uint8_t>(src >> 8);
  out[4] = proto;
  out[5] = static_cast<uint8_t>(length);
  out[6] = static_cast<uint8_t>(length >> 8);
}

bool decode_frame_header(std::span<const uint8_t> in, uint16_t& dst,
                         uint16_t& src, uint8_t& proto, uint16_t& length) {
  if (in.size() < kFrameHeaderBytes) return false;
  dst = static_cast<uint16_t>(in[0] | (in[1] << 8));
  src = static_cast<uint16_t>(in[2] | (in[3] << 8));
  proto = in[4];
  length = static_cast<uint16_t>(in[5] | (in[6] << 8));
  return in.size() >= kFrameHeaderBytes + length;
}

Port::Port(uint16_t id, uint32_t capacity, uint32_t mtu)
    : id_(id), capacity_(capacity), mtu_(mtu) {
  rx_ring_.resize(capacity_);
  tx_ring_.resize(capacity_);
}

uint64_t Port::tx_pending() const {
  return tx_head_.load(std::memory_order_acquire) -
         tx_tail_.load(std::memory_order_acquire);
}

uint64_t Port::rx_pending() const {
  return rx_head_.load(std::memory_order_acquire) -
         rx_tail_.load(std::memory_order_acquire);
}

bool Port::peek_tx_length(uint16_t& length) const {
  uint64_t tail = tx_tail_.load(std::memory_order_relaxed);
  if (tx_head_.load(std::memory_order_acquire) == tail) return false;
  length = tx_ring_[tail % capacity_].length;
  return true;
}

bool Port::consume_tx(uint16_t& dst, uint16_t& src, uint8_t& proto,
                      std::span<uint8_t> payload_out, uint16_t& length) {
  uint64_t tail = tx_tail_.load(std::memory_order_relaxed);
  if (tx_head_.load(std::memory_order_acquire) == tail) return false;
  const Descriptor& d = tx_ring_[tail % capacity_];
  dst = d.dst;
  src = d.src;
  proto = d.proto;
  length = d.length;
  load(*arena_, d.buffer, payload_out.subspan(0, d.length));
  tx_tail_.store(tail + 1, std::memory_order_release);
  return true;
}

bool Port::deliver_rx(uint16_t dst, uint16_t src, uint8_t proto,
                      std::span<const uint8_t> payload) {
  uint64_t head = rx_head_.load(std::memory_order_relaxed);
  uint64_t tail = rx_tail_.load(std::memory_order_acquire);
  if (head - tail >= capacity_) {
    counters_.rx_overflow_dropped.fetch_add(1, std::memory_order_relaxed);
    return false;
  }
  size_t slot = head % capacity_;
  store(*arena_, rx_slots_[slot], payload);
  Descriptor& d = rx_ring_[slot];
  d.buffer = rx_slots_[slot];
  d.length = static_cast<uint16_t>(payload.size());
  d.dst = dst;
  d.src = src;
  d.proto = proto;
  rx_head_.store(head + 1, std::memory_order_release);
  counters_.rx_delivered.fetch_add(1, std::memory_order_relaxed);
  return true;
}

VirtualNic::VirtualNic(Arena& arena, std::vector<uint16_t> port_ids,
                       NicOptions options)
    : arena_(arena), options_(options) {
  if (options_.ring_capacity == 0 ||
      (options_.ring_capacity & (options_.ring_capacity - 1)) != 0) {
    throw std::invalid_argument("ring capacity must be a power of two");
  }
  for (uint16_t id : port_ids) {
    ports_.emplace_back(
        new Port(id, options_.ring_capacity, options_.mtu));
  }
}

void VirtualNic::attach(int compartment_id, const Capability& pool) {
  if (attached_to_ >= 0) throw std::runtime_error("nic already attached");
  if (!pool.tag || pool.sealed() || !pool.perms.has(Perm::load) ||
      !pool.perms.has(Perm::store)) {
    throw std::runtime_error("pool capability must carry load+store");
  }
  uint64_t per_port = 2ull * options_.ring_capacity * options_.mtu;
  if (pool.length < per_port * ports_.size()) {
    throw std::runtime_error("pool too small for rings");
  }
  uint64_t offset = pool.base;
  for (auto& port : ports_) {
    port->arena_ = &arena_;
    port->rx_slots_.clear();
    port->tx_slots_.clear();
    port->tx_scratch_.resize(options_.mtu);
    for (uint32_t i = 0; i < options_.ring_capacity; ++i) {
      port->rx_slots_.push_back(restrict_cap(pool, offset, options_.mtu,
                                             Perms{Perm::load, Perm::store}));
      offset += options_.mtu;
    }
    for (uint32_t i = 0; i < options_.ring_capacity; ++i) {
      port->tx_slots_.push_back(restrict_cap(pool, offset, options_.mtu,
                                             Perms{Perm::load, Perm::store}));
      offset += options_.mtu;
    }
  }
  pool_ = pool;
  attached_to_ = compartment_id;
}

Port& VirtualNic::port(uint16_t id) {
  for (auto& p : ports_) {
    if (p->id() == id) return *p;
  }
  throw std::out_of_range("unknown port id");
}

const Port& VirtualNic::port(uint16_t id) const {
  for (auto& p : ports_) {
    if (p->id() == id) return *p;
  }
  throw std::out_of_range("unknown port id");
}

std::vector<Port*> VirtualNic::ports() {
  std::vector<Port*> out;
  for (auto& p : ports_) out.push_back(p.get());
  return out;
}

size_t VirtualNic::rx_burst(uint16_t port_id, std::span<RxFrame> out) {
  if (attached_to_ < 0) throw std::runtime_error("nic not attached");
  Port& p = port(port_id);
  uint64_t tail = p.rx_tail_.load(std::memory_order_relaxed);
  uint64_t head = p.rx_head_.load(std::memory_order_acquire);
  size_t n = 0;
  while (n < out.size() && tail != head) {
    const Port::Descriptor& d = p.rx_ring_[tail % p.capacity_];
    out[n].dst_port = d.dst;
    out[n].src_port = d.src;
    out[n].proto = d.proto;
    out[n].payload = d.buffer;
    out[n].length = d.length;
    ++n;
    ++tail;
  }
  p.rx_tail_.store(tail, std::memory_order_release);
  return n;
}

size_t VirtualNic::tx_burst(uint16_t port_id, std::span<const Frame> frames) {
  if (attached_to_ < 0) throw std::runtime_error("nic not attached");
  Port& p = port(port_id);
  uint64_t head = p.tx_head_.load(std::memory_order_relaxed);
  uint64_t tail = p.tx_tail_.load(std::memory_order_acquire);
  size_t accepted = 0;
  for (const Frame& f : frames) {
    if (f.length > p.mtu_) {
      p.counters_.tx_rejected_oversize.fetch_add(1, std::memory_order_relaxed);
      continue;
    }
    if (f.payload.base < pool_.base || f.payload.top() > pool_.top()) {
      p.counters_.tx_rejected_bounds.fetch_add(1, std::memory_order_relaxed);
      continue;
    }
    if (head - tail >= p.capacity_) break;
    size_t slot = head % p.capacity_;
    // One copy into the ring's own slot; the submitted buffer is reusable as
    // soon as tx_burst returns.
    load(arena_, f.payload, std::span<uint8_t>(p.tx_scratch_.data(), f.length));
    store(arena_, p.tx_slots_[slot],
          std::span<const uint8_t>(p.tx_scratch_.data(), f.length));
    Port::Descriptor& d = p.tx_ring_[slot];
    d.buffer = p.tx_slots_[slot];
    d.length = f.length;
    d.dst = f.dst_port;
    d.src = f.src_port;
    d.proto = f.proto;
    ++head;
    ++accepted;
    p.counters_.tx_enqueued.fetch_add(1, std::memory_order_relaxed);
  }
  p.tx_head_.store(head, std::memory_order_release);
  return accepted;
}

}  // namespace capnet
