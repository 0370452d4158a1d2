#pragma once

#include <atomic>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "capnet/capmem.hpp"

/// Poll-mode virtual NIC: per-port RX/TX descriptor rings whose packet
/// buffers are capabilities into the attached compartment's pool region.
/// Bursts never block; the wire side drains TX and feeds RX.
namespace capnet {

class Wire;

inline constexpr uint8_t kProtoRaw = 0;
inline constexpr uint8_t kProtoStream = 1;

/// On-wire frame header, little endian, 7 bytes:
/// dst_port u16 | src_port u16 | proto u8 | length u16 | payload.
inline constexpr size_t kFrameHeaderBytes = 7;

void encode_frame_header(std::span<uint8_t> out, uint16_t dst, uint16_t src,
                         uint8_t proto, uint16_t length);
bool decode_frame_header(std::span<const uint8_t> in, uint16_t& dst,
                         uint16_t& src, uint8_t& proto, uint16_t& length);

/// Outbound frame submission. The payload capability must lie inside the
/// sender's packet pool and carry load permission.
struct Frame {
  uint16_t dst_port = 0;
  uint16_t src_port = 0;
  uint8_t proto = kProtoStream;
  Capability payload;
  uint16_t length = 0;
};

/// One received frame as returned by rx_burst. The payload capability points
/// at the ring slot that held the frame; it stays valid until the ring wraps,
/// so consumers copy out promptly.
struct RxFrame {
  uint16_t dst_port = 0;
  uint16_t src_port = 0;
  uint8_t proto = 0;
  Capability payload;
  uint16_t length = 0;
};

struct NicOptions {
  uint32_t ring_capacity = 1024;  // power of two
  uint32_t mtu = 1500;
};

struct PortCounters {
  std::atomic<uint64_t> tx_enqueued{0};
  std::atomic<uint64_t> tx_rejected_oversize{0};
  std::atomic<uint64_t> tx_rejected_bounds{0};
  std::atomic<uint64_t> rx_delivered{0};
  std::atomic<uint64_t> rx_overflow_dropped{0};
};

/// A single device port: SPSC rings in both directions. Only the attached
/// compartment polls; only the wire context enqueues RX and drains TX.
class Port {
 public:
  uint16_t id() const { return id_; }
  uint32_t mtu() const { return mtu_; }
  uint32_t ring_capacity() const { return capacity_; }
  bool wired() const { return wire_ != nullptr; }
  const PortCounters& counters() const { return counters_; }

  /// Cooperative wire pump from the attached compartment's loop; no-op on
  /// an unwired port.
  void pump_wire(uint64_t now_ns);

  // Wire-side interface.
  bool peek_tx_length(uint16_t& length) const;
  bool consume_tx(uint16_t& dst, uint16_t& src, uint8_t& proto,
                  std::span<uint8_t> payload_out, uint16_t& length);
  bool deliver_rx(uint16_t dst, uint16_t src, uint8_t proto,
                  std::span<const uint8_t> payload);
  uint64_t tx_pending() const;
  uint64_t tx_free() const { return capacity_ - tx_pending(); }
  uint64_t rx_pending() const;

 private:
  friend class VirtualNic;
  friend class Wire;
  friend class DatagramWire;

  struct Descriptor {
    Capability buffer;
    uint16_t length = 0;
    uint16_t dst = 0;
    uint16_t src = 0;
    uint8_t proto = 0;
  };

  Port(uint16_t id, uint32_t capacity, uint32_t mtu);

  uint16_t id_;
  uint32_t capacity_;
  uint32_t mtu_;
  Arena* arena_ = nullptr;

  std::vector<Descriptor> rx_ring_;
  std::vector<Descriptor> tx_ring_;
  std::vector<Capability> rx_slots_;
  std::vector<Capability> tx_slots_;
  std::vector<uint8_t> tx_scratch_;
  std::atomic<uint64_t> rx_head_{0};
  std::atomic<uint64_t> rx_tail_{0};
  std::atomic<uint64_t> tx_head_{0};
  std::atomic<uint64_t> tx_tail_{0};

  PortCounters counters_;
  Wire* wire_ = nullptr;
};

/// The device. Attachment is exclusive: rings are carved out of the pool
/// capability the compartment hands over, which also bounds every
/// descriptor's buffer.
class VirtualNic {
 public:
  VirtualNic(Arena& arena, std::vector<uint16_t> port_ids,
             NicOptions options = {});

  /// Carves RX and TX slot arrays for every port from `pool`. The pool must
  /// carry load+store and hold at least 2 * ring_capacity * mtu bytes per
  /// port. Throws std::runtime_error on double attach or an undersized pool.
  void attach(int compartment_id, const Capability& pool);
  bool attached() const { return attached_to_ >= 0; }
  int attached_to() const { return attached_to_; }

  Port& port(uint16_t id);
  const Port& port(uint16_t id) const;
  std::vector<Port*> ports();
  size_t port_count() const { return ports_.size(); }

  /// Non-blocking burst dequeue of up to out.size() received frames.
  size_t rx_burst(uint16_t port_id, std::span<RxFrame> out);
  /// Non-blocking burst enqueue; returns frames accepted. Oversized frames
  /// are rejected and counted, not fatal; a full ring stops the burst.
  size_t tx_burst(uint16_t port_id, std::span<const Frame> frames);

  const NicOptions& options() const { return options_; }

 private:
  Arena& arena_;
  NicOptions options_;
  std::vector<std::unique_ptr<Port>> ports_;
  int attached_to_ = -1;
  Capability pool_;
};

}  // namespace capnet
