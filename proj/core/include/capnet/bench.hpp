#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "capnet/netstack.hpp"

/// Bandwidth application and latency microbenchmark, plus the statistics
/// pipeline (IQR outlier removal, box-plot style summary) their reports go
/// through.
namespace capnet {

struct BandwidthResult {
  std::string role;  // "server" or "client"
  double achieved_mbps = 0.0;
  double theoretical_mbps = 0.0;
  double duration_s = 0.0;
  uint64_t bytes = 0;
  bool partial = false;

  double efficiency() const {
    return theoretical_mbps > 0 ? achieved_mbps / theoretical_mbps : 0.0;
  }
};

struct LatencyReport {
  std::string scenario;
  uint64_t raw_count = 0;
  uint64_t removed_count = 0;
  double mean_ns = 0.0;
  double stddev_ns = 0.0;
  double median_ns = 0.0;
  double p25_ns = 0.0;
  double p75_ns = 0.0;
  int64_t min_ns = 0;
  int64_t max_ns = 0;
  bool degenerate_box = false;  // p25 == p75, no visible box
};

/// Quantile by linear interpolation over the sorted values (inclusive
/// positions p * (n - 1)); the method is fixed so oracle equality is exact.
double quantile_sorted(std::span<const int64_t> sorted, double p);

struct IqrResult {
  std::vector<int64_t> kept;     // sorted
  std::vector<int64_t> removed;  // sorted
  double q1 = 0.0;               // quartiles of the original sample set
  double q3 = 0.0;
};

/// Removes samples outside [Q1 - k*IQR, Q3 + k*IQR], re-fencing until the
/// kept set is stable, which makes the filter idempotent. A single sample
/// passes through untouched.
IqrResult iqr_filter(std::span<const int64_t> samples, double k = 1.5);

/// Order statistics and moments of the kept samples. `raw_count` and
/// `removed_count` are filled by callers that ran the filter.
LatencyReport summarize(std::span<const int64_t> kept, std::string scenario);

/// Filter-then-summarize convenience used for every scenario leg.
LatencyReport filtered_report(std::span<const int64_t> raw, std::string scenario,
                              double k = 1.5);

// ---------------------------------------------------------------------------
// Scenario-agnostic benchmark drivers.
//
// A SocketApi bundles the non-blocking socket operations the way a concrete
// scenario exposes them: direct stack calls, capability-argument calls from
// inside a compartment, or sealed-entry cross-compartment calls. The payload
// buffer for write_prepared is owned by the flavor so the timed region never
// includes argument marshalling.

struct SocketApi {
  std::function<int64_t()> socket_fn;
  std::function<int64_t(int, Endpoint)> bind_fn;
  std::function<int64_t(int, int)> listen_fn;
  std::function<int64_t(int, Endpoint)> connect_fn;  // poll until 0 / refused
  std::function<int64_t(int)> accept_fn;
  std::function<int64_t(int)> close_fn;
  std::function<int64_t(int, size_t)> write_prepared;
  std::function<int64_t(int, std::span<uint8_t>)> read_fn;
  /// Replaces the head of the prepared payload buffer, so checksumming
  /// slices know exactly what write_prepared will send.
  std::function<void(std::span<const uint8_t>)> preload;
  std::function<void(uint64_t)> stamp;  // writes a counter into the payload
  std::function<uint64_t()> clock_ns;
  std::function<uint64_t()> clock_trampolines;  // audit counter, may be null
  size_t max_payload = 0;
};

uint64_t fnv1a(uint64_t hash, std::span<const uint8_t> bytes);
inline constexpr uint64_t kFnvSeed = 1469598103934665603ull;

struct BandwidthSliceConfig {
  Endpoint remote;            // client side
  uint32_t listen_id = 0;     // server side
  uint64_t transfer_bytes = 0;
  /// Sent ahead of the measured transfer and excluded from the server's
  /// window, so connection ramp and cold caches stay out of the figure.
  uint64_t warmup_bytes = 0;
  size_t chunk = 32 * 1024;
  double theoretical_mbps = 0.0;
  uint64_t deadline_ns = 0;  // absolute; 0 = none
  bool checksum = false;
  int connect_retries = 50;  // a refused connect is retried on a fresh fd
};

/// iperf-style sender as a re-enterable slice: call step() until done().
/// Safe to drive from a main-loop callback or a dedicated thread.
class BandwidthClientSlice {
 public:
  BandwidthClientSlice(SocketApi api, BandwidthSliceConfig cfg);
  /// Returns true when the step made progress.
  bool step();
  bool done() const { return done_.load(std::memory_order_acquire); }
  bool failed() const { return failed_; }
  BandwidthResult result() const;
  uint64_t checksum() const { return hash_; }

 private:
  enum class Phase { init, connecting, sending, closing, finished };
  SocketApi api_;
  BandwidthSliceConfig cfg_;
  Phase phase_ = Phase::init;
  int fd_ = -1;
  int retries_ = 0;
  uint64_t sent_ = 0;
  uint64_t stamp_counter_ = 0;
  uint64_t t_first_ = 0;
  uint64_t t_last_ = 0;
  uint64_t hash_ = kFnvSeed;
  std::vector<uint8_t> pattern_;
  bool failed_ = false;
  std::atomic<bool> done_{false};
};

/// Accepts one connection and drains it to end of stream.
class BandwidthServerSlice {
 public:
  BandwidthServerSlice(SocketApi api, BandwidthSliceConfig cfg);
  bool step();
  bool done() const { return done_.load(std::memory_order_acquire); }
  bool failed() const { return failed_; }
  BandwidthResult result() const;
  uint64_t checksum() const { return hash_; }
  uint64_t bytes() const { return received_; }

 private:
  enum class Phase { init, accepting, reading, finished };
  SocketApi api_;
  BandwidthSliceConfig cfg_;
  Phase phase_ = Phase::init;
  int listen_fd_ = -1;
  int fd_ = -1;
  uint64_t received_ = 0;
  uint64_t t_first_ = 0;
  uint64_t t_last_ = 0;
  uint64_t hash_ = kFnvSeed;
  std::vector<uint8_t> scratch_;
  bool failed_ = false;
  std::atomic<bool> done_{false};
};

struct LatencySliceConfig {
  Endpoint remote;
  uint64_t iterations = 100'000;
  size_t payload = 1024;
  uint64_t gap_ns = 0;
  uint64_t warmup = 1000;
  uint64_t deadline_ns = 0;
  int connect_retries = 50;
  std::string tag;
};

struct LatencyOutput {
  LatencyReport report;
  std::vector<int64_t> raw_samples;
  uint64_t attempts = 0;         // timed + blocked
  uint64_t blocked = 0;          // WOULD_BLOCK retries, not timed
  uint64_t clock_calls_observed = 0;  // audit counter delta across attempts
};

/// Per-call wall time of write attempts: t0 and t1 come from the flavor's
/// clock (a trampoline in compartment configurations, so the measured region
/// includes those jumps by design). WOULD_BLOCK attempts are retried and
/// counted separately, never timed.
class LatencyClientSlice {
 public:
  LatencyClientSlice(SocketApi api, LatencySliceConfig cfg);
  bool step();
  bool done() const { return done_.load(std::memory_order_acquire); }
  bool failed() const { return failed_; }
  LatencyOutput take_output();

 private:
  enum class Phase { init, connecting, warmup, timing, closing, finished };
  void gap_spin() const;

  SocketApi api_;
  LatencySliceConfig cfg_;
  Phase phase_ = Phase::init;
  int fd_ = -1;
  int retries_ = 0;
  uint64_t warmup_done_ = 0;
  std::vector<int64_t> samples_;
  uint64_t attempts_ = 0;
  uint64_t blocked_ = 0;
  uint64_t audit_delta_ = 0;
  bool failed_ = false;
  std::atomic<bool> done_{false};
};

}  // namespace capnet
