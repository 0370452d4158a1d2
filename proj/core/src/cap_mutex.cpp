#include "capnet/cap_mutex.hpp"

#include <atomic>
#include <stdexcept>
#include <thread>

#include "capnet/intravisor.hpp"

namespace capnet {

namespace {
void cpu_relax() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_ia32_pause();
#else
  std::this_thread::yield();
#endif
}
}  // namespace

CapMutex::CapMutex(Arena& arena, const Capability& block, SyncOps ops,
                   Intravisor* registry, int holder_id)
    : arena_(arena),
      ops_(std::move(ops)),
      registry_(registry),
      holder_id_(holder_id) {
  if (!block.covers(block.base, kBlockBytes) || block.base % 4 != 0) {
    throw std::invalid_argument("mutex block capability too small or unaligned");
  }
  ticket_word_ = set_address(block, block.base + 0);
  serving_word_ = set_address(block, block.base + 4);
  waiters_word_ = set_address(block, block.base + 8);
  owner_word_ = set_address(block, block.base + 12);
}

uint32_t CapMutex::thread_tag() {
  static std::atomic<uint32_t> next{1};
  thread_local uint32_t tag = next.fetch_add(1, std::memory_order_relaxed);
  return tag;
}

void CapMutex::lock() {
  uint32_t ticket = atomic_fetch_add_u32(arena_, ticket_word_, 1);
  if (atomic_load_u32(arena_, serving_word_) != ticket) {
    park(ticket);
  }
  atomic_store_u32(arena_, owner_word_, thread_tag());
  if (registry_) registry_->lock_acquired(this, holder_id_);
}

bool CapMutex::try_lock() {
  uint32_t serving = atomic_load_u32(arena_, serving_word_);
  uint32_t expected = serving;
  // Only free when next == serving; claim by bumping next.
  if (!atomic_compare_exchange_u32(arena_, ticket_word_, expected,
                                   serving + 1)) {
    return false;
  }
  atomic_store_u32(arena_, owner_word_, thread_tag());
  if (registry_) registry_->lock_acquired(this, holder_id_);
  return true;
}

void CapMutex::park(uint32_t ticket) {
  contended_.fetch_add(1, std::memory_order_relaxed);
  for (int i = 0; i < kSpinRounds; ++i) {
    if (atomic_load_u32(arena_, serving_word_) == ticket) return;
    cpu_relax();
  }
  atomic_fetch_add_u32(arena_, waiters_word_, 1);
  for (;;) {
    uint32_t serving = atomic_load_u32(arena_, serving_word_);
    if (serving == ticket) break;
    if (ops_.wait) {
      ops_.wait(serving_word_, serving, 1'000'000);
    } else {
      std::this_thread::yield();
    }
  }
  atomic_fetch_add_u32(arena_, waiters_word_,
                       static_cast<uint32_t>(-1));
}

void CapMutex::unlock() {
  if (registry_) registry_->lock_released(this);
  atomic_store_u32(arena_, owner_word_, 0);
  uint32_t serving = atomic_load_u32(arena_, serving_word_);
  atomic_store_u32(arena_, serving_word_, serving + 1);
  if (atomic_load_u32(arena_, waiters_word_) > 0 && ops_.wake) {
    ops_.wake(serving_word_, UINT32_MAX);
  }
}

bool CapMutex::held_by_me() const {
  return atomic_load_u32(arena_, owner_word_) == thread_tag();
}

void CapMutex::force_release() {
  // Only meaningful when the dead holder never reached unlock().
  if (atomic_load_u32(arena_, owner_word_) == 0) return;
  atomic_store_u32(arena_, owner_word_, 0);
  uint32_t serving = atomic_load_u32(arena_, serving_word_);
  atomic_store_u32(arena_, serving_word_, serving + 1);
  if (ops_.wake) ops_.wake(serving_word_, UINT32_MAX);
}

}  // namespace capnet
