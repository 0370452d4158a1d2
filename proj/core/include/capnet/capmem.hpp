#pragma once

#include <cstdint>
#include <exception>
#include <memory>
#include <optional>
#include <span>
#include <string>

/// Capability-checked memory over a flat arena.
///
/// Every reference into the arena is a Capability: a bounded, permission
/// carrying, seal-able value. Capabilities derive monotonically from a per
/// arena root; data access is checked against bounds and permissions at use
/// time and violations raise CapFault. The arena keeps one validity tag per
/// granule so capabilities stored in memory lose their tag as soon as raw
/// bytes overwrite them.
namespace capnet {

/// Access rights a capability can carry. Stored as a bitmask in Perms.
enum class Perm : uint8_t {
  load = 1u << 0,
  store = 1u << 1,
  load_cap = 1u << 2,
  store_cap = 1u << 3,
  execute = 1u << 4,
  seal = 1u << 5,
  unseal = 1u << 6,
};

/// A set of Perm bits. Derivation may only shrink the set.
class Perms {
 public:
  constexpr Perms() = default;
  constexpr Perms(std::initializer_list<Perm> ps) {
    for (Perm p : ps) bits_ |= static_cast<uint8_t>(p);
  }

  static constexpr Perms all() { return from_raw(0x7f); }
  static constexpr Perms none() { return Perms{}; }
  static constexpr Perms from_raw(uint8_t raw) {
    Perms p;
    p.bits_ = raw & 0x7f;
    return p;
  }

  constexpr uint8_t raw() const { return bits_; }
  constexpr bool has(Perm p) const {
    return (bits_ & static_cast<uint8_t>(p)) != 0;
  }
  constexpr bool subset_of(Perms other) const {
    return (bits_ & ~other.bits_) == 0;
  }
  constexpr Perms without(Perm p) const {
    return from_raw(bits_ & ~static_cast<uint8_t>(p));
  }
  constexpr Perms intersect(Perms other) const {
    return from_raw(bits_ & other.bits_);
  }

  friend constexpr bool operator==(Perms, Perms) = default;

 private:
  uint8_t bits_ = 0;
};

std::string to_string(Perms perms);

/// Reason a capability-checked operation refused to proceed.
enum class FaultKind : uint8_t {
  out_of_bounds,
  permission,
  tag_invalid,
  sealed,
  non_monotonic,
  bad_otype,
};

const char* to_string(FaultKind kind);

/// A bounded, permission-carrying reference into the arena.
///
/// `address` is a cursor that may roam outside [base, base+length); accesses
/// fault only at use. A capability with an otype is sealed: immutable and
/// unusable for data access until unsealed with matching authority. The tag
/// marks validity; a tag-clear capability authorizes nothing.
struct Capability {
  uint64_t base = 0;
  uint64_t length = 0;
  uint64_t address = 0;
  Perms perms{};
  bool tag = false;
  std::optional<uint32_t> otype{};

  constexpr bool sealed() const { return otype.has_value(); }
  constexpr uint64_t top() const { return base + length; }
  /// Bytes from the cursor to the top, zero when the cursor sits outside.
  constexpr uint64_t remaining() const {
    return (address >= base && address < top()) ? top() - address : 0;
  }
  /// True when [addr, addr+n) falls inside the bounds.
  constexpr bool covers(uint64_t addr, uint64_t n) const {
    return addr >= base && n <= top() - addr && addr <= top();
  }

  friend bool operator==(const Capability&, const Capability&) = default;
};

/// Raised by a refused capability operation. Carries the structured record
/// the intravisor turns into a fault report; it is a value to be caught at a
/// compartment boundary, never a process-fatal condition.
class CapFault : public std::exception {
 public:
  CapFault(FaultKind kind, Capability cap, std::string detail);

  FaultKind kind() const { return kind_; }
  const Capability& capability() const { return cap_; }
  const std::string& detail() const { return detail_; }
  const char* what() const noexcept override { return message_.c_str(); }

 private:
  FaultKind kind_;
  Capability cap_;
  std::string detail_;
  std::string message_;
};

/// The flat byte store plus one validity tag per granule. A granule's tag is
/// set only by store_capability and cleared by any raw or checked data store
/// touching it. Tag bits are updated atomically; concurrent data accesses to
/// disjoint regions are the caller's concern, as on real hardware.
class Arena {
 public:
  static constexpr uint32_t kDefaultGranule = 32;
  /// Serialized capability record size; granule must be at least this.
  static constexpr uint32_t kCapRecordSize = 32;

  explicit Arena(uint64_t size, uint32_t granule = kDefaultGranule);

  uint64_t size() const { return size_; }
  uint32_t granule() const { return granule_; }
  uint64_t granule_count() const { return tag_count_; }

  /// Unchecked access: the view of the world without capabilities. Raw
  /// writes clear the tag of every granule they touch.
  void raw_write(uint64_t offset, std::span<const uint8_t> bytes);
  void raw_read(uint64_t offset, std::span<uint8_t> out) const;

  bool granule_tag(uint64_t offset) const;

 private:
  void set_granule_tag(uint64_t offset, bool value);
  void clear_tags(uint64_t offset, uint64_t len);
  uint8_t* at(uint64_t offset) { return data_.get() + offset; }
  const uint8_t* at(uint64_t offset) const { return data_.get() + offset; }
  void bounds_check(uint64_t offset, uint64_t len, const char* op) const;

  friend void store(Arena&, const Capability&, std::span<const uint8_t>);
  friend void load(const Arena&, const Capability&, std::span<uint8_t>);
  friend void store_capability(Arena&, const Capability&, const Capability&);
  friend Capability load_capability(const Arena&, const Capability&);
  friend uint32_t atomic_load_u32(const Arena&, const Capability&);
  friend void atomic_store_u32(Arena&, const Capability&, uint32_t);
  friend uint32_t atomic_fetch_add_u32(Arena&, const Capability&, uint32_t);
  friend bool atomic_compare_exchange_u32(Arena&, const Capability&,
                                          uint32_t&, uint32_t);

  uint64_t size_;
  uint32_t granule_;
  uint64_t tag_count_;
  std::unique_ptr<uint8_t[]> data_;
  std::unique_ptr<uint8_t[]> tags_;
};

/// The sole underived authority: full bounds, all permissions, unsealed.
/// Deterministic for a given arena.
Capability root_capability(const Arena& arena);

/// Monotonic derivation: bounds must stay inside the parent and permissions
/// must not grow. The result's cursor starts at its new base.
Capability restrict_cap(const Capability& parent, uint64_t new_base,
                        uint64_t new_length, Perms new_perms);

/// Moves the cursor without touching bounds or permissions. The new address
/// may sit outside bounds; the fault is deferred to the next access.
Capability set_address(const Capability& cap, uint64_t address);

/// Locks `cap` under `otype`. Requires seal permission on `authority` and
/// otype within the authority's bounds (read as an otype space).
Capability seal(const Capability& cap, const Capability& authority,
                uint32_t otype);

/// Reverses seal() given matching otype and unseal permission.
Capability unseal(const Capability& cap, const Capability& authority,
                  uint32_t otype);

/// Checked data access at the capability's cursor. Stores clear the tag of
/// every granule they touch.
void load(const Arena& arena, const Capability& cap, std::span<uint8_t> out);
void store(Arena& arena, const Capability& cap, std::span<const uint8_t> bytes);

/// The access gate alone: faults exactly as a load/store of `len` bytes at
/// the cursor would, without touching memory. Used to pre-check capability
/// arguments at call gates so the fault lands on the caller.
void check_access(const Capability& cap, uint64_t len, Perm needed);

/// Capability storage in memory. The destination cursor must be granule
/// aligned; a store writes the 32-byte record and sets the granule tag, a
/// load returns the record with the tag only if the granule tag survived.
void store_capability(Arena& arena, const Capability& dst,
                      const Capability& value);
Capability load_capability(const Arena& arena, const Capability& src);

/// Checked 32-bit atomics on arena words (4-byte aligned cursor required).
/// These exist for cross-compartment synchronization words; they count as
/// data stores for tag purposes.
uint32_t atomic_load_u32(const Arena& arena, const Capability& cap);
void atomic_store_u32(Arena& arena, const Capability& cap, uint32_t value);
uint32_t atomic_fetch_add_u32(Arena& arena, const Capability& cap,
                              uint32_t delta);
bool atomic_compare_exchange_u32(Arena& arena, const Capability& cap,
                                 uint32_t& expected, uint32_t desired);

}  // namespace capnet
