#pragma once

// Randomized capability-machine exerciser with an independent shadow model.
// The shadow tracks, per capability, the bounds/permissions/seal/tag it
// should carry, plus a full shadow of arena bytes and granule tags. Every
// operation's outcome (success or fault) and every observable (loaded bytes,
// loaded capability records, tag bits) is compared against the shadow; any
// disagreement is a recorded violation. Used by the unit suite and by the
// acceptance property run at larger scale.

#include <cstring>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "capnet/capmem.hpp"

namespace capnet::testing {

struct ModelResult {
  uint64_t checks = 0;
  uint64_t faults_expected = 0;
  uint64_t successes = 0;
  std::vector<std::string> violations;
};

class CapModel {
 public:
  explicit CapModel(uint64_t seed, uint64_t arena_size = 64 * 1024,
                    uint32_t granule = 32)
      : arena_(arena_size, granule),
        rng_(seed ^ 0x9e3779b97f4a7c15ull),
        shadow_data_(arena_size, 0) {
    Capability root = root_capability(arena_);
    pool_.push_back({root, Shadow{0, arena_size, root.perms.raw(), false, 0,
                                  true, 0}});
    seal_auth_ = restrict_cap(
        root, 0, std::min<uint64_t>(arena_size, 4096),
        Perms{Perm::seal, Perm::unseal});
  }

  ModelResult run(size_t steps) {
    for (size_t i = 0; i < steps; ++i) step();
    return result_;
  }

 private:
  struct Shadow {
    uint64_t lo = 0, hi = 0;
    uint8_t perms = 0;
    bool sealed = false;
    uint32_t otype = 0;
    bool tag = false;
    size_t parent = 0;  // index into pool_, self for root
  };
  struct Entry {
    Capability cap;
    Shadow shadow;
  };

  uint64_t rand_below(uint64_t n) {
    return n == 0 ? 0 : std::uniform_int_distribution<uint64_t>(0, n - 1)(rng_);
  }

  Entry& pick() { return pool_[rand_below(pool_.size())]; }

  void fail(const std::string& what, const Capability& cap) {
    std::ostringstream os;
    os << what << " cap{base=" << cap.base << " len=" << cap.length
       << " addr=" << cap.address << " perms=" << to_string(cap.perms)
       << " tag=" << cap.tag << " sealed=" << cap.sealed() << "}";
    result_.violations.push_back(os.str());
  }

  bool shadow_allows_data(const Shadow& s, uint64_t addr, uint64_t len,
                          Perm needed) {
    if (!s.tag || s.sealed) return false;
    if (!(s.perms & static_cast<uint8_t>(needed))) return false;
    if (len == 0) return true;
    return addr >= s.lo && addr <= s.hi && len <= s.hi - addr;
  }

  void clear_shadow_tags(uint64_t offset, uint64_t len) {
    if (len == 0) return;
    uint64_t g0 = offset / arena_.granule();
    uint64_t g1 = (offset + len - 1) / arena_.granule();
    for (uint64_t g = g0; g <= g1; ++g) shadow_tags_[g] = false;
  }

  void step() {
    switch (rand_below(100)) {
      case 0 ... 29: do_derive(); break;
      case 30 ... 39: do_set_address(); break;
      case 40 ... 69: do_data_access(); break;
      case 70 ... 84: do_cap_slot(); break;
      case 85 ... 94: do_raw_write(); break;
      default: do_seal_unseal(); break;
    }
  }

  void do_derive() {
    Entry& parent = pick();
    // Half the attempts are deliberately non-monotonic.
    bool try_widen = rand_below(2) == 0;
    uint64_t span = parent.shadow.hi - parent.shadow.lo;
    uint64_t new_base, new_len;
    uint8_t new_perms;
    if (!try_widen && span > 0) {
      new_base = parent.shadow.lo + rand_below(span);
      new_len = rand_below(parent.shadow.hi - new_base + 1);
      new_perms = static_cast<uint8_t>(parent.shadow.perms &
                                       rand_below(256));
    } else {
      new_base = rand_below(arena_.size() + 64);
      new_len = rand_below(arena_.size() + 64);
      new_perms = static_cast<uint8_t>(rand_below(128));
    }
    bool in_bounds = new_base >= parent.shadow.lo &&
                     new_base <= parent.shadow.hi &&
                     new_len <= parent.shadow.hi - new_base;
    bool perms_ok = (new_perms & ~parent.shadow.perms) == 0;
    bool expect_ok = parent.shadow.tag && !parent.shadow.sealed && in_bounds &&
                     perms_ok;
    result_.checks++;
    try {
      Capability child = restrict_cap(parent.cap, new_base, new_len,
                                      Perms::from_raw(new_perms));
      if (!expect_ok) {
        fail("restrict succeeded but shadow forbids it", parent.cap);
        return;
      }
      // Monotonicity: the child must sit inside every ancestor.
      if (child.base < parent.shadow.lo || child.top() > parent.shadow.hi) {
        fail("restrict escaped parent bounds", child);
      }
      if ((child.perms.raw() & ~parent.shadow.perms) != 0) {
        fail("restrict escalated permissions", child);
      }
      result_.successes++;
      if (pool_.size() < 256) {
        size_t parent_index =
            static_cast<size_t>(&parent - pool_.data());
        pool_.push_back({child, Shadow{child.base, child.top(),
                                       child.perms.raw(), false, 0, true,
                                       parent_index}});
      }
    } catch (const CapFault&) {
      if (expect_ok) fail("restrict faulted but shadow allows it", parent.cap);
      result_.faults_expected++;
    }
  }

  void do_set_address() {
    Entry& e = pick();
    uint64_t target = rand_below(arena_.size() + 128);
    bool expect_ok = e.shadow.tag && !e.shadow.sealed;
    result_.checks++;
    try {
      Capability moved = set_address(e.cap, target);
      if (!expect_ok) {
        fail("set_address succeeded on sealed/untagged", e.cap);
        return;
      }
      e.cap = moved;  // cursor may now be out of bounds; faults on use
      result_.successes++;
    } catch (const CapFault&) {
      if (expect_ok) fail("set_address faulted unexpectedly", e.cap);
      result_.faults_expected++;
    }
  }

  void do_data_access() {
    Entry& e = pick();
    uint64_t len = rand_below(96);
    bool is_store = rand_below(2) == 0;
    bool expect_ok = shadow_allows_data(
        e.shadow, e.cap.address, len, is_store ? Perm::store : Perm::load);
    result_.checks++;
    if (is_store) {
      std::vector<uint8_t> bytes(len);
      for (auto& b : bytes) b = static_cast<uint8_t>(rand_below(256));
      try {
        store(arena_, e.cap, bytes);
        if (!expect_ok) {
          fail("store succeeded but shadow forbids it", e.cap);
          return;
        }
        if (len > 0 &&
            (e.cap.address < e.shadow.lo || e.cap.address + len > e.shadow.hi)) {
          fail("store escaped shadow bounds", e.cap);
        }
        std::memcpy(shadow_data_.data() + e.cap.address, bytes.data(), len);
        clear_shadow_tags(e.cap.address, len);
        result_.successes++;
      } catch (const CapFault&) {
        if (expect_ok) fail("store faulted but shadow allows it", e.cap);
        result_.faults_expected++;
      }
    } else {
      std::vector<uint8_t> bytes(len);
      try {
        load(arena_, e.cap, bytes);
        if (!expect_ok) {
          fail("load succeeded but shadow forbids it", e.cap);
          return;
        }
        if (len > 0 && std::memcmp(bytes.data(),
                                   shadow_data_.data() + e.cap.address,
                                   len) != 0) {
          fail("load disagrees with shadow bytes", e.cap);
        }
        result_.successes++;
      } catch (const CapFault&) {
        if (expect_ok) fail("load faulted but shadow allows it", e.cap);
        result_.faults_expected++;
      }
    }
  }

  void do_cap_slot() {
    Entry& e = pick();
    uint32_t granule = arena_.granule();
    uint64_t aligned =
        (rand_below(arena_.size()) / granule) * granule;
    Capability slot;
    bool moved_ok = true;
    try {
      slot = set_address(e.cap, aligned);
    } catch (const CapFault&) {
      moved_ok = false;
    }
    if (!moved_ok) return;
    bool is_store = rand_below(2) == 0;
    if (is_store) {
      Entry& value = pick();
      bool expect_ok =
          e.shadow.tag && !e.shadow.sealed &&
          (e.shadow.perms & static_cast<uint8_t>(Perm::store_cap)) != 0 &&
          aligned >= e.shadow.lo && aligned + Arena::kCapRecordSize <= e.shadow.hi;
      result_.checks++;
      try {
        store_capability(arena_, slot, value.cap);
        if (!expect_ok) {
          fail("store_capability succeeded but shadow forbids it", slot);
          return;
        }
        uint64_t g = aligned / granule;
        shadow_tags_[g] = value.cap.tag;
        shadow_slots_[g] = value;
        // The record itself lands in arena bytes; mirror opaquely.
        std::vector<uint8_t> rec(Arena::kCapRecordSize);
        arena_.raw_read(aligned, rec);
        std::memcpy(shadow_data_.data() + aligned, rec.data(), rec.size());
        result_.successes++;
      } catch (const CapFault&) {
        if (expect_ok) fail("store_capability faulted unexpectedly", slot);
        result_.faults_expected++;
      }
    } else {
      bool expect_ok =
          e.shadow.tag && !e.shadow.sealed &&
          (e.shadow.perms & static_cast<uint8_t>(Perm::load_cap)) != 0 &&
          aligned >= e.shadow.lo && aligned + Arena::kCapRecordSize <= e.shadow.hi;
      result_.checks++;
      try {
        Capability loaded = load_capability(arena_, slot);
        if (!expect_ok) {
          fail("load_capability succeeded but shadow forbids it", slot);
          return;
        }
        uint64_t g = aligned / granule;
        bool expect_tag =
            shadow_tags_.count(g) != 0 && shadow_tags_.at(g);
        if (loaded.tag != expect_tag) {
          fail(expect_tag ? "tag lost without a raw overwrite"
                          : "tag minted without store_capability",
               loaded);
        }
        if (loaded.tag) {
          const Entry& stored = shadow_slots_.at(g);
          if (loaded.base != stored.cap.base ||
              loaded.length != stored.cap.length ||
              loaded.address != stored.cap.address ||
              loaded.perms != stored.cap.perms ||
              loaded.otype != stored.cap.otype) {
            fail("loaded capability record differs from stored", loaded);
          } else if (pool_.size() < 256) {
            pool_.push_back({loaded, stored.shadow});
          }
        } else if (pool_.size() < 256) {
          // Untagged value: keep it around, every use must fault.
          Shadow s{loaded.base, loaded.base + loaded.length,
                   loaded.perms.raw(), loaded.sealed(),
                   loaded.otype.value_or(0), false, 0};
          pool_.push_back({loaded, s});
        }
        result_.successes++;
      } catch (const CapFault&) {
        if (expect_ok) fail("load_capability faulted unexpectedly", slot);
        result_.faults_expected++;
      }
    }
  }

  void do_raw_write() {
    uint64_t len = rand_below(64) + 1;
    uint64_t offset = rand_below(arena_.size() - len);
    std::vector<uint8_t> bytes(len);
    for (auto& b : bytes) b = static_cast<uint8_t>(rand_below(256));
    arena_.raw_write(offset, bytes);
    std::memcpy(shadow_data_.data() + offset, bytes.data(), len);
    clear_shadow_tags(offset, len);
    result_.checks++;
    result_.successes++;
  }

  void do_seal_unseal() {
    Entry& e = pick();
    uint32_t otype = static_cast<uint32_t>(rand_below(64));
    if (!e.shadow.sealed && rand_below(2) == 0) {
      bool expect_ok = e.shadow.tag;
      result_.checks++;
      try {
        Capability sealed_cap = seal(e.cap, seal_auth_, otype);
        if (!expect_ok) {
          fail("seal succeeded on untagged", e.cap);
          return;
        }
        e.cap = sealed_cap;
        e.shadow.sealed = true;
        e.shadow.otype = otype;
        result_.successes++;
      } catch (const CapFault&) {
        if (expect_ok) fail("seal faulted unexpectedly", e.cap);
        result_.faults_expected++;
      }
    } else if (e.shadow.sealed) {
      bool wrong = rand_below(2) == 0;
      uint32_t attempt = wrong ? e.shadow.otype + 1 : e.shadow.otype;
      bool expect_ok = e.shadow.tag && !wrong;
      result_.checks++;
      try {
        Capability unsealed_cap = unseal(e.cap, seal_auth_, attempt);
        if (!expect_ok) {
          fail("unseal succeeded with wrong otype", e.cap);
          return;
        }
        e.cap = unsealed_cap;
        e.shadow.sealed = false;
        result_.successes++;
      } catch (const CapFault&) {
        if (expect_ok) fail("unseal faulted unexpectedly", e.cap);
        result_.faults_expected++;
      }
    }
  }

  Arena arena_;
  std::mt19937_64 rng_;
  std::vector<Entry> pool_;
  Capability seal_auth_;
  std::vector<uint8_t> shadow_data_;
  std::map<uint64_t, bool> shadow_tags_;
  std::map<uint64_t, Entry> shadow_slots_;
  ModelResult result_;
};

inline ModelResult run_capability_sequences(uint64_t base_seed,
                                            size_t sequences,
                                            size_t steps_per_sequence) {
  ModelResult total;
  for (size_t i = 0; i < sequences; ++i) {
    CapModel model(base_seed + i);
    ModelResult r = model.run(steps_per_sequence);
    total.checks += r.checks;
    total.faults_expected += r.faults_expected;
    total.successes += r.successes;
    for (auto& v : r.violations) {
      if (total.violations.size() < 32) {
        total.violations.push_back("seq " + std::to_string(i) + ": " + v);
      }
    }
  }
  return total;
}

}  // namespace capnet::testing
