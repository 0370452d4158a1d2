#include "capnet/capmem.hpp"

#include <atomic>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace capnet {

namespace {

void write_u64_le(uint8_t* p, uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<uint8_t>(v >> (8 * i));
}

uint64_t read_u64_le(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
  return v;
}

void write_u32_le(uint8_t* p, uint32_t v) {
  for (int i = 0; i < 4; ++i) p[i] = static_cast<uint8_t>(v >> (8 * i));
}

uint32_t read_u32_le(const uint8_t* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
  return v;
}

[[noreturn]] void fault(FaultKind kind, const Capability& cap,
                        std::string detail) {
  throw CapFault(kind, cap, std::move(detail));
}

// Common gate for data access: tag, seal, permission, bounds, in that order.
void check_data_access(const Capability& cap, uint64_t len, Perm needed) {
  if (!cap.tag) fault(FaultKind::tag_invalid, cap, "access via untagged capability");
  if (cap.sealed()) fault(FaultKind::sealed, cap, "access via sealed capability");
  if (!cap.perms.has(needed)) {
    fault(FaultKind::permission, cap,
          std::string("missing ") + (needed == Perm::load ? "load" : "store") +
              " permission");
  }
  if (len == 0) return;
  if (!cap.covers(cap.address, len)) {
    std::ostringstream os;
    os << "access [" << cap.address << ", " << cap.address + len
       << ") outside bounds [" << cap.base << ", " << cap.top() << ")";
    fault(FaultKind::out_of_bounds, cap, os.str());
  }
}

void check_cap_slot(const Capability& cap, uint32_t granule, Perm needed) {
  if (!cap.tag) fault(FaultKind::tag_invalid, cap, "capability slot access via untagged capability");
  if (cap.sealed()) fault(FaultKind::sealed, cap, "capability slot access via sealed capability");
  if (!cap.perms.has(needed)) {
    fault(FaultKind::permission, cap,
          needed == Perm::load_cap ? "missing load_cap permission"
                                   : "missing store_cap permission");
  }
  if (cap.address % granule != 0) {
    fault(FaultKind::out_of_bounds, cap, "capability slot not granule aligned");
  }
  if (!cap.covers(cap.address, Arena::kCapRecordSize)) {
    fault(FaultKind::out_of_bounds, cap, "capability slot outside bounds");
  }
}

std::atomic_ref<uint32_t> word_ref(uint8_t* p) {
  return std::atomic_ref<uint32_t>(*reinterpret_cast<uint32_t*>(p));
}

void check_word_access(const Capability& cap, Perm needed) {
  check_data_access(cap, 4, needed);
  if (cap.address % 4 != 0) {
    throw std::invalid_argument("atomic word access requires 4-byte alignment");
  }
}

}  // namespace

std::string to_string(Perms perms) {
  static constexpr std::pair<Perm, char> kNames[] = {
      {Perm::load, 'r'},      {Perm::store, 'w'},  {Perm::load_cap, 'R'},
      {Perm::store_cap, 'W'}, {Perm::execute, 'x'}, {Perm::seal, 's'},
      {Perm::unseal, 'u'},
  };
  std::string out;
  for (auto [p, c] : kNames) out.push_back(perms.has(p) ? c : '-');
  return out;
}

const char* to_string(FaultKind kind) {
  switch (kind) {
    case FaultKind::out_of_bounds: return "OUT_OF_BOUNDS";
    case FaultKind::permission: return "PERMISSION";
    case FaultKind::tag_invalid: return "TAG_INVALID";
    case FaultKind::sealed: return "SEALED";
    case FaultKind::non_monotonic: return "NON_MONOTONIC";
    case FaultKind::bad_otype: return "BAD_OTYPE";
  }
  return "UNKNOWN";
}

CapFault::CapFault(FaultKind kind, Capability cap, std::string detail)
    : kind_(kind), cap_(cap), detail_(std::move(detail)) {
  std::ostringstream os;
  os << "capability fault " << to_string(kind_) << ": " << detail_
     << " (base=" << cap_.base << " len=" << cap_.length
     << " addr=" << cap_.address << " perms=" << to_string(cap_.perms) << ")";
  message_ = os.str();
}

Arena::Arena(uint64_t size, uint32_t granule)
    : size_(size), granule_(granule) {
  if (granule_ < kCapRecordSize) {
    throw std::invalid_argument("arena granule smaller than capability record");
  }
  tag_count_ = (size_ + granule_ - 1) / granule_;
  data_ = std::make_unique<uint8_t[]>(size_ ? size_ : 1);
  tags_ = std::make_unique<uint8_t[]>(tag_count_ ? tag_count_ : 1);
  std::memset(data_.get(), 0, size_ ? size_ : 1);
  std::memset(tags_.get(), 0, tag_count_ ? tag_count_ : 1);
}

void Arena::bounds_check(uint64_t offset, uint64_t len, const char* op) const {
  if (offset > size_ || len > size_ - offset) {
    std::ostringstream os;
    os << op << " [" << offset << ", " << offset + len << ") outside arena of "
       << size_ << " bytes";
    throw std::out_of_range(os.str());
  }
}

void Arena::raw_write(uint64_t offset, std::span<const uint8_t> bytes) {
  bounds_check(offset, bytes.size(), "raw_write");
  if (!bytes.empty()) std::memcpy(at(offset), bytes.data(), bytes.size());
  clear_tags(offset, bytes.size());
}

void Arena::raw_read(uint64_t offset, std::span<uint8_t> out) const {
  bounds_check(offset, out.size(), "raw_read");
  if (!out.empty()) std::memcpy(out.data(), at(offset), out.size());
}

bool Arena::granule_tag(uint64_t offset) const {
  bounds_check(offset, 1, "granule_tag");
  return std::atomic_ref<uint8_t>(tags_[offset / granule_])
             .load(std::memory_order_acquire) != 0;
}

void Arena::set_granule_tag(uint64_t offset, bool value) {
  std::atomic_ref<uint8_t>(tags_[offset / granule_])
      .store(value ? 1 : 0, std::memory_order_release);
}

void Arena::clear_tags(uint64_t offset, uint64_t len) {
  if (len == 0) return;
  uint64_t first = offset / granule_;
  uint64_t last = (offset + len - 1) / granule_;
  for (uint64_t g = first; g <= last; ++g) {
    std::atomic_ref<uint8_t>(tags_[g]).store(0, std::memory_order_release);
  }
}

Capability root_capability(const Arena& arena) {
  Capability cap;
  cap.base = 0;
  cap.length = arena.size();
  cap.address = 0;
  cap.perms = Perms::all();
  cap.tag = true;
  return cap;
}

Capability restrict_cap(const Capability& parent, uint64_t new_base,
                        uint64_t new_length, Perms new_perms) {
  if (!parent.tag) fault(FaultKind::tag_invalid, parent, "restrict of untagged capability");
  if (parent.sealed()) fault(FaultKind::sealed, parent, "restrict of sealed capability");
  bool inside = new_base >= parent.base && new_base <= parent.top() &&
                new_length <= parent.top() - new_base;
  if (!inside) {
    fault(FaultKind::non_monotonic, parent, "restrict widens bounds");
  }
  if (!new_perms.subset_of(parent.perms)) {
    fault(FaultKind::non_monotonic, parent, "restrict grows permissions");
  }
  Capability cap;
  cap.base = new_base;
  cap.length = new_length;
  cap.address = new_base;
  cap.perms = new_perms;
  cap.tag = true;
  return cap;
}

Capability set_address(const Capability& cap, uint64_t address) {
  if (!cap.tag) fault(FaultKind::tag_invalid, cap, "set_address on untagged capability");
  if (cap.sealed()) fault(FaultKind::sealed, cap, "set_address on sealed capability");
  Capability out = cap;
  out.address = address;
  return out;
}

Capability seal(const Capability& cap, const Capability& authority,
                uint32_t otype) {
  if (!cap.tag) fault(FaultKind::tag_invalid, cap, "seal of untagged capability");
  if (cap.sealed()) fault(FaultKind::sealed, cap, "capability already sealed");
  if (!authority.tag) fault(FaultKind::tag_invalid, authority, "seal with untagged authority");
  if (authority.sealed()) fault(FaultKind::sealed, authority, "seal with sealed authority");
  if (!authority.perms.has(Perm::seal)) {
    fault(FaultKind::permission, authority, "authority lacks seal permission");
  }
  if (!authority.covers(otype, 1)) {
    fault(FaultKind::permission, authority, "otype outside sealing authority");
  }
  Capability out = cap;
  out.otype = otype;
  return out;
}

Capability unseal(const Capability& cap, const Capability& authority,
                  uint32_t otype) {
  if (!cap.tag) fault(FaultKind::tag_invalid, cap, "unseal of untagged capability");
  if (!cap.sealed()) fault(FaultKind::bad_otype, cap, "unseal of unsealed capability");
  if (!authority.tag) fault(FaultKind::tag_invalid, authority, "unseal with untagged authority");
  if (authority.sealed()) fault(FaultKind::sealed, authority, "unseal with sealed authority");
  if (!authority.perms.has(Perm::unseal)) {
    fault(FaultKind::permission, authority, "authority lacks unseal permission");
  }
  if (!authority.covers(otype, 1)) {
    fault(FaultKind::permission, authority, "otype outside unsealing authority");
  }
  if (*cap.otype != otype) {
    fault(FaultKind::bad_otype, cap, "otype mismatch on unseal");
  }
  Capability out = cap;
  out.otype.reset();
  return out;
}

void check_access(const Capability& cap, uint64_t len, Perm needed) {
  check_data_access(cap, len, needed);
}

void load(const Arena& arena, const Capability& cap, std::span<uint8_t> out) {
  check_data_access(cap, out.size(), Perm::load);
  if (!out.empty()) std::memcpy(out.data(), arena.at(cap.address), out.size());
}

void store(Arena& arena, const Capability& cap,
           std::span<const uint8_t> bytes) {
  check_data_access(cap, bytes.size(), Perm::store);
  if (bytes.empty()) return;
  std::memcpy(arena.at(cap.address), bytes.data(), bytes.size());
  arena.clear_tags(cap.address, bytes.size());
}

// Record layout (little endian): base u64 | length u64 | address u64 |
// perms u8 | sealed u8 | otype u32 | pad u16. The tag lives in the tag map.
void store_capability(Arena& arena, const Capability& dst,
                      const Capability& value) {
  check_cap_slot(dst, arena.granule(), Perm::store_cap);
  uint8_t rec[Arena::kCapRecordSize] = {};
  write_u64_le(rec + 0, value.base);
  write_u64_le(rec + 8, value.length);
  write_u64_le(rec + 16, value.address);
  rec[24] = value.perms.raw();
  rec[25] = value.sealed() ? 1 : 0;
  write_u32_le(rec + 26, value.otype.value_or(0));
  std::memcpy(arena.at(dst.address), rec, sizeof rec);
  arena.set_granule_tag(dst.address, value.tag);
}

Capability load_capability(const Arena& arena, const Capability& src) {
  check_cap_slot(src, arena.granule(), Perm::load_cap);
  const uint8_t* rec = arena.at(src.address);
  Capability out;
  out.base = read_u64_le(rec + 0);
  out.length = read_u64_le(rec + 8);
  out.address = read_u64_le(rec + 16);
  out.perms = Perms::from_raw(rec[24]);
  if (rec[25]) out.otype = read_u32_le(rec + 26);
  out.tag = arena.granule_tag(src.address);
  return out;
}

uint32_t atomic_load_u32(const Arena& arena, const Capability& cap) {
  check_word_access(cap, Perm::load);
  return word_ref(const_cast<Arena&>(arena).at(cap.address))
      .load(std::memory_order_acquire);
}

void atomic_store_u32(Arena& arena, const Capability& cap, uint32_t value) {
  check_word_access(cap, Perm::store);
  word_ref(arena.at(cap.address)).store(value, std::memory_order_release);
  arena.clear_tags(cap.address, 4);
}

uint32_t atomic_fetch_add_u32(Arena& arena, const Capability& cap,
                              uint32_t delta) {
  check_word_access(cap, Perm::store);
  uint32_t old = word_ref(arena.at(cap.address))
                     .fetch_add(delta, std::memory_order_acq_rel);
  arena.clear_tags(cap.address, 4);
  return old;
}

bool atomic_compare_exchange_u32(Arena& arena, const Capability& cap,
                                 uint32_t& expected, uint32_t desired) {
  check_word_access(cap, Perm::store);
  bool ok = word_ref(arena.at(cap.address))
                .compare_exchange_strong(expected, desired,
                                         std::memory_order_acq_rel,
                                         std::memory_order_acquire);
  if (ok) arena.clear_tags(cap.address, 4);
  return ok;
}

}  // namespace capnet
