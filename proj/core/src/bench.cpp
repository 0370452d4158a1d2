#include "capnet/bench.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace capnet {

double quantile_sorted(std::span<const int64_t> sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty set");
  if (sorted.size() == 1) return static_cast<double>(sorted[0]);
  double pos = p * static_cast<double>(sorted.size() - 1);
  size_t lo = static_cast<size_t>(pos);
  if (lo >= sorted.size() - 1) return static_cast<double>(sorted.back());
  double frac = pos - static_cast<double>(lo);
  return static_cast<double>(sorted[lo]) +
         frac * (static_cast<double>(sorted[lo + 1]) -
                 static_cast<double>(sorted[lo]));
}

IqrResult iqr_filter(std::span<const int64_t> samples, double k) {
  if (samples.empty()) throw std::invalid_argument("iqr_filter of empty set");
  std::vector<int64_t> kept(samples.begin(), samples.end());
  std::sort(kept.begin(), kept.end());
  IqrResult out;
  out.q1 = quantile_sorted(kept, 0.25);
  out.q3 = quantile_sorted(kept, 0.75);
  // One fence pass can expose new outliers once the quartiles tighten, so
  // iterate to the fixed point; that is what makes the filter idempotent on
  // its kept set.
  for (;;) {
    double q1 = quantile_sorted(kept, 0.25);
    double q3 = quantile_sorted(kept, 0.75);
    double lo = q1 - k * (q3 - q1);
    double hi = q3 + k * (q3 - q1);
    std::vector<int64_t> next;
    next.reserve(kept.size());
    bool changed = false;
    for (int64_t v : kept) {
      if (static_cast<double>(v) < lo || static_cast<double>(v) > hi) {
        out.removed.push_back(v);
        changed = true;
      } else {
        next.push_back(v);
      }
    }
    kept.swap(next);
    if (!changed || kept.empty()) break;
  }
  std::sort(out.removed.begin(), out.removed.end());
  out.kept = std::move(kept);
  return out;
}

LatencyReport summarize(std::span<const int64_t> kept, std::string scenario) {
  if (kept.empty()) throw std::invalid_argument("summarize of empty set");
  std::vector<int64_t> sorted(kept.begin(), kept.end());
  std::sort(sorted.begin(), sorted.end());

  LatencyReport r;
  r.scenario = std::move(scenario);
  r.raw_count = sorted.size();
  r.removed_count = 0;
  double sum = 0.0;
  for (int64_t v : sorted) sum += static_cast<double>(v);
  r.mean_ns = sum / static_cast<double>(sorted.size());
  double var = 0.0;
  for (int64_t v : sorted) {
    double d = static_cast<double>(v) - r.mean_ns;
    var += d * d;
  }
  r.stddev_ns = std::sqrt(var / static_cast<double>(sorted.size()));
  r.median_ns = quantile_sorted(sorted, 0.5);
  r.p25_ns = quantile_sorted(sorted, 0.25);
  r.p75_ns = quantile_sorted(sorted, 0.75);
  r.min_ns = sorted.front();
  r.max_ns = sorted.back();
  r.degenerate_box = r.p25_ns == r.p75_ns;
  return r;
}

LatencyReport filtered_report(std::span<const int64_t> raw,
                              std::string scenario, double k) {
  IqrResult f = iqr_filter(raw, k);
  LatencyReport r = summarize(f.kept, std::move(scenario));
  r.raw_count = raw.size();
  r.removed_count = f.removed.size();
  return r;
}

uint64_t fnv1a(uint64_t hash, std::span<const uint8_t> bytes) {
  for (uint8_t b : bytes) {
    hash ^= b;
    hash *= 1099511628211ull;
  }
  return hash;
}

// ---------------------------------------------------------------------------
// Bandwidth slices

namespace {
// Deterministic payload pattern; position stamps go on top of it.
void fill_pattern(std::vector<uint8_t>& buf) {
  uint64_t x = 0x243f6a8885a308d3ull;
  for (size_t i = 0; i < buf.size(); ++i) {
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    buf[i] = static_cast<uint8_t>(x * 0x2545f4914f6cdd1dull >> 56);
  }
}
}  // namespace

BandwidthClientSlice::BandwidthClientSlice(SocketApi api,
                                           BandwidthSliceConfig cfg)
    : api_(std::move(api)), cfg_(cfg) {
  cfg_.chunk = std::min(cfg_.chunk, api_.max_payload);
  pattern_.resize(cfg_.chunk);
  fill_pattern(pattern_);
  if (api_.preload) api_.preload(pattern_);
}

bool BandwidthClientSlice::step() {
  if (done_.load(std::memory_order_relaxed)) return false;
  if (cfg_.deadline_ns && api_.clock_ns() > cfg_.deadline_ns &&
      phase_ != Phase::finished) {
    failed_ = phase_ != Phase::closing;
    phase_ = Phase::finished;
    done_.store(true, std::memory_order_release);
    return false;
  }
  switch (phase_) {
    case Phase::init: {
      int64_t fd = api_.socket_fn();
      if (fd < 0) {
        failed_ = true;
        phase_ = Phase::finished;
        done_.store(true, std::memory_order_release);
        return false;
      }
      fd_ = static_cast<int>(fd);
      phase_ = Phase::connecting;
      return true;
    }
    case Phase::connecting: {
      int64_t st = api_.connect_fn(fd_, cfg_.remote);
      if (st == status::ok) {
        phase_ = Phase::sending;
        t_first_ = api_.clock_ns();
        return true;
      }
      if (st == status::in_progress) return false;
      if (st == status::refused && retries_ < cfg_.connect_retries) {
        // The listener may simply not be up yet.
        retries_++;
        api_.close_fn(fd_);
        phase_ = Phase::init;
        return false;
      }
      failed_ = true;
      phase_ = Phase::finished;
      done_.store(true, std::memory_order_release);
      return false;
    }
    case Phase::sending: {
      bool progressed = false;
      // Small quanta keep main-loop turns short; long turns starve the
      // ack clock that paces the window.
      uint64_t total = cfg_.warmup_bytes + cfg_.transfer_bytes;
      for (int round = 0; round < 4; ++round) {
        uint64_t remaining = total - sent_;
        if (remaining == 0) break;
        size_t want = static_cast<size_t>(
            std::min<uint64_t>(remaining, cfg_.chunk));
        if (cfg_.checksum && api_.stamp) api_.stamp(stamp_counter_);
        int64_t n = api_.write_prepared(fd_, want);
        if (n == status::would_block) break;
        if (n < 0) {
          failed_ = true;
          phase_ = Phase::finished;
          done_.store(true, std::memory_order_release);
          return false;
        }
        if (cfg_.checksum) {
          // Hash exactly the bytes the stack accepted.
          std::vector<uint8_t> stamped = pattern_;
          if (api_.stamp) {
            for (int i = 0; i < 8 && i < static_cast<int>(stamped.size()); ++i) {
              stamped[i] = static_cast<uint8_t>(stamp_counter_ >> (8 * i));
            }
          }
          hash_ = fnv1a(hash_, std::span<const uint8_t>(stamped.data(),
                                                        static_cast<size_t>(n)));
        }
        stamp_counter_++;
        bool was_warm = sent_ >= cfg_.warmup_bytes;
        sent_ += static_cast<uint64_t>(n);
        t_last_ = api_.clock_ns();
        if (!was_warm && sent_ >= cfg_.warmup_bytes) t_first_ = t_last_;
        progressed = true;
      }
      if (sent_ >= total) phase_ = Phase::closing;
      return progressed;
    }
    case Phase::closing: {
      api_.close_fn(fd_);
      phase_ = Phase::finished;
      done_.store(true, std::memory_order_release);
      return true;
    }
    case Phase::finished:
      return false;
  }
  return false;
}

BandwidthResult BandwidthClientSlice::result() const {
  BandwidthResult r;
  r.role = "client";
  uint64_t total = cfg_.warmup_bytes + cfg_.transfer_bytes;
  uint64_t measured = sent_ > cfg_.warmup_bytes ? sent_ - cfg_.warmup_bytes : 0;
  r.bytes = measured;
  r.theoretical_mbps = cfg_.theoretical_mbps;
  r.partial = failed_ || sent_ < total;
  if (t_last_ > t_first_ && measured > 0) {
    r.duration_s = static_cast<double>(t_last_ - t_first_) / 1e9;
    r.achieved_mbps =
        static_cast<double>(measured) * 8.0 / (r.duration_s * 1e6);
  }
  return r;
}

BandwidthServerSlice::BandwidthServerSlice(SocketApi api,
                                           BandwidthSliceConfig cfg)
    : api_(std::move(api)), cfg_(cfg) {
  scratch_.resize(std::min<size_t>(cfg_.chunk, api_.max_payload));
}

bool BandwidthServerSlice::step() {
  if (done_.load(std::memory_order_relaxed)) return false;
  if (cfg_.deadline_ns && api_.clock_ns() > cfg_.deadline_ns &&
      phase_ != Phase::finished) {
    failed_ = true;
    phase_ = Phase::finished;
    done_.store(true, std::memory_order_release);
    return false;
  }
  switch (phase_) {
    case Phase::init: {
      int64_t fd = api_.socket_fn();
      if (fd < 0 || api_.bind_fn(static_cast<int>(fd),
                                 Endpoint{0, cfg_.listen_id}) != status::ok ||
          api_.listen_fn(static_cast<int>(fd), 4) != status::ok) {
        failed_ = true;
        phase_ = Phase::finished;
        done_.store(true, std::memory_order_release);
        return false;
      }
      listen_fd_ = static_cast<int>(fd);
      phase_ = Phase::accepting;
      return true;
    }
    case Phase::accepting: {
      int64_t fd = api_.accept_fn(listen_fd_);
      if (fd == status::would_block) return false;
      if (fd < 0) {
        failed_ = true;
        phase_ = Phase::finished;
        done_.store(true, std::memory_order_release);
        return false;
      }
      fd_ = static_cast<int>(fd);
      // The window opens at accept (or at the end of the warmup prefix) so
      // bytes never count against a window that excludes their transit time.
      t_first_ = api_.clock_ns();
      phase_ = Phase::reading;
      return true;
    }
    case Phase::reading: {
      bool progressed = false;
      for (int round = 0; round < 8; ++round) {
        int64_t n = api_.read_fn(fd_, scratch_);
        if (n == status::would_block) break;
        if (n < 0) {
          failed_ = true;
          phase_ = Phase::finished;
          done_.store(true, std::memory_order_release);
          return false;
        }
        if (n == 0) {  // end of stream
          t_last_ = api_.clock_ns();
          api_.close_fn(fd_);
          api_.close_fn(listen_fd_);
          phase_ = Phase::finished;
          done_.store(true, std::memory_order_release);
          return true;
        }
        if (cfg_.checksum) {
          hash_ = fnv1a(hash_, std::span<const uint8_t>(
                                   scratch_.data(), static_cast<size_t>(n)));
        }
        bool was_warm = received_ >= cfg_.warmup_bytes;
        received_ += static_cast<uint64_t>(n);
        t_last_ = api_.clock_ns();
        if (!was_warm && received_ >= cfg_.warmup_bytes) t_first_ = t_last_;
        progressed = true;
      }
      return progressed;
    }
    case Phase::finished:
      return false;
  }
  return false;
}

BandwidthResult BandwidthServerSlice::result() const {
  BandwidthResult r;
  r.role = "server";
  uint64_t measured =
      received_ > cfg_.warmup_bytes ? received_ - cfg_.warmup_bytes : 0;
  r.bytes = measured;
  r.theoretical_mbps = cfg_.theoretical_mbps;
  r.partial = failed_;
  if (t_last_ > t_first_ && measured > 0) {
    r.duration_s = static_cast<double>(t_last_ - t_first_) / 1e9;
    r.achieved_mbps =
        static_cast<double>(measured) * 8.0 / (r.duration_s * 1e6);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Latency slice

LatencyClientSlice::LatencyClientSlice(SocketApi api, LatencySliceConfig cfg)
    : api_(std::move(api)), cfg_(cfg) {
  cfg_.payload = std::min(cfg_.payload, api_.max_payload);
  samples_.reserve(cfg_.iterations);
}

void LatencyClientSlice::gap_spin() const {
  // Paced by the flavor's clock, the way the measured call is: in
  // compartment flavors these reads are trampolines too, and they run
  // before the audit bracket opens, so the two-reads-per-attempt audit
  // stays exact.
  if (cfg_.gap_ns == 0) return;
  uint64_t deadline = api_.clock_ns() + cfg_.gap_ns;
  while (api_.clock_ns() < deadline) {
#if defined(__x86_64__) || defined(__i386__)
    __builtin_ia32_pause();
#endif
  }
}

bool LatencyClientSlice::step() {
  if (done_.load(std::memory_order_relaxed)) return false;
  // The timing phase never reads the clock outside the measured region, so
  // the audit stays at exactly two clock reads per attempt; a generous
  // attempt budget stands in for a wall-clock deadline there.
  if (phase_ != Phase::timing && cfg_.deadline_ns &&
      phase_ != Phase::finished && api_.clock_ns() > cfg_.deadline_ns) {
    failed_ = samples_.size() < cfg_.iterations;
    phase_ = Phase::finished;
    done_.store(true, std::memory_order_release);
    return false;
  }
  switch (phase_) {
    case Phase::init: {
      int64_t fd = api_.socket_fn();
      if (fd < 0) {
        failed_ = true;
        phase_ = Phase::finished;
        done_.store(true, std::memory_order_release);
        return false;
      }
      fd_ = static_cast<int>(fd);
      phase_ = Phase::connecting;
      return true;
    }
    case Phase::connecting: {
      int64_t st = api_.connect_fn(fd_, cfg_.remote);
      if (st == status::ok) {
        phase_ = cfg_.warmup ? Phase::warmup : Phase::timing;
        return true;
      }
      if (st == status::in_progress) return false;
      if (st == status::refused && retries_ < cfg_.connect_retries) {
        retries_++;
        api_.close_fn(fd_);
        phase_ = Phase::init;
        return false;
      }
      failed_ = true;
      phase_ = Phase::finished;
      done_.store(true, std::memory_order_release);
      return false;
    }
    case Phase::warmup: {
      int64_t n = api_.write_prepared(fd_, cfg_.payload);
      if (n > 0) warmup_done_++;
      if (warmup_done_ >= cfg_.warmup) phase_ = Phase::timing;
      return n > 0;
    }
    case Phase::timing: {
      if (attempts_ > cfg_.iterations * 512 + 1'000'000) {
        failed_ = true;
        phase_ = Phase::finished;
        done_.store(true, std::memory_order_release);
        return false;
      }
      gap_spin();
      // Audit bracket: between the two counter reads this thread issues
      // exactly the two clock trampolines of the measured region.
      uint64_t a0 = api_.clock_trampolines ? api_.clock_trampolines() : 0;
      uint64_t t0 = api_.clock_ns();
      int64_t n = api_.write_prepared(fd_, cfg_.payload);
      uint64_t t1 = api_.clock_ns();
      if (api_.clock_trampolines) {
        audit_delta_ += api_.clock_trampolines() - a0;
      }
      attempts_++;
      if (n == status::would_block) {
        blocked_++;
        return false;
      }
      if (n < 0) {
        failed_ = true;
        phase_ = Phase::finished;
        done_.store(true, std::memory_order_release);
        return false;
      }
      samples_.push_back(static_cast<int64_t>(t1 - t0));
      if (samples_.size() >= cfg_.iterations) phase_ = Phase::closing;
      return true;
    }
    case Phase::closing: {
      api_.close_fn(fd_);
      phase_ = Phase::finished;
      done_.store(true, std::memory_order_release);
      return true;
    }
    case Phase::finished:
      return false;
  }
  return false;
}

LatencyOutput LatencyClientSlice::take_output() {
  LatencyOutput out;
  out.attempts = attempts_;
  out.blocked = blocked_;
  out.clock_calls_observed = audit_delta_;
  out.raw_samples = std::move(samples_);
  if (!out.raw_samples.empty()) {
    out.report = filtered_report(out.raw_samples, cfg_.tag);
  } else {
    out.report.scenario = cfg_.tag;
  }
  return out;
}

}  // namespace capnet
