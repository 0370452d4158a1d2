#pragma once

#include <atomic>
#include <cstdint>
#include <functional>

#include "capnet/capmem.hpp"

namespace capnet {

class Intravisor;

/// FIFO ticket lock whose words live in a shared arena region, so that
/// several compartments can coordinate on it the way futex-backed mutexes
/// coordinate threads. The fast path is one checked atomic fetch_add plus a
/// bounded spin; the slow path parks the caller through the supplied wait
/// hook (a sync-service trampoline for compartments, a yielding poll for
/// plain host threads).
///
/// Word layout inside the block capability, 4 bytes each:
///   [0] next ticket  [1] now serving  [2] waiter count  [3] owner tag
class CapMutex {
 public:
  struct SyncOps {
    /// Block while *word == expected, up to timeout_ns; spurious returns ok.
    std::function<void(const Capability& word, uint32_t expected,
                       uint64_t timeout_ns)> wait;
    /// Wake up to count waiters parked on word.
    std::function<void(const Capability& word, uint32_t count)> wake;
  };

  static constexpr uint64_t kBlockBytes = 16;
  static constexpr int kSpinRounds = 96;

  /// `block` must cover kBlockBytes, be 4-byte aligned and carry load+store.
  CapMutex(Arena& arena, const Capability& block, SyncOps ops,
           Intravisor* registry = nullptr, int holder_id = -1);

  void lock();
  void unlock();
  bool try_lock();

  /// True when the calling thread holds the lock; backs the mutation
  /// discipline asserts in the stack.
  bool held_by_me() const;

  /// Fault cleanup path: advances the ticket if the lock is still marked
  /// held, so waiters behind a dead holder proceed. Idempotent.
  void force_release();

  uint64_t contended_acquires() const {
    return contended_.load(std::memory_order_relaxed);
  }

 private:
  static uint32_t thread_tag();
  void park(uint32_t ticket);

  Arena& arena_;
  Capability ticket_word_;
  Capability serving_word_;
  Capability waiters_word_;
  Capability owner_word_;
  SyncOps ops_;
  Intravisor* registry_;
  int holder_id_;
  std::atomic<uint64_t> contended_{0};
};

/// RAII guard; releases on unwind, which is what frees the lock when the
/// holder's code faults mid-operation.
class CapMutexGuard {
 public:
  explicit CapMutexGuard(CapMutex& m) : m_(&m) { m_->lock(); }
  ~CapMutexGuard() {
    if (m_) m_->unlock();
  }
  CapMutexGuard(const CapMutexGuard&) = delete;
  CapMutexGuard& operator=(const CapMutexGuard&) = delete;

 private:
  CapMutex* m_;
};

}  // namespace capnet
