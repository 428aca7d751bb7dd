/// \file metrics.hpp
/// Run-wide instrumentation. Counters are the contract: they are integers,
/// updated at well-defined points, and bitwise reproducible for a given
/// (config, seed). Wall-clock timers are informational only.
///
/// Counting conventions:
///  - Events observed identically by every rank (collective completions,
///    detections, restarts) are counted once, by the lowest-ranked live
///    survivor of the moment, so totals stay per-event rather than
///    per-rank-replicated.
///  - Genuinely per-rank quantities (bytes shipped to a holder, values
///    sanitized, injections performed) are summed over ranks.

#pragma once

#include <atomic>
#include <bit>
#include <cstdint>
#include <mutex>
#include <optional>
#include <vector>

namespace resilab::metrics {

/// Accumulates seconds from many threads without std::atomic<double>.
class AtomicSeconds {
 public:
  void add(double s) {
    std::uint64_t seen = bits_.load(std::memory_order_relaxed);
    for (;;) {
      const double cur = std::bit_cast<double>(seen);
      const std::uint64_t want = std::bit_cast<std::uint64_t>(cur + s);
      if (bits_.compare_exchange_weak(seen, want, std::memory_order_relaxed)) return;
    }
  }
  double seconds() const { return std::bit_cast<double>(bits_.load(std::memory_order_relaxed)); }

 private:
  std::atomic<std::uint64_t> bits_{std::bit_cast<std::uint64_t>(0.0)};
};

struct Metrics {
  // work
  std::atomic<std::uint64_t> spmv_count{0};        ///< all distributed spmv completions
  std::atomic<std::uint64_t> detector_spmvs{0};    ///< subset spent on residual checks
  std::atomic<std::uint64_t> detector_checks{0};

  // soft errors
  std::atomic<std::uint64_t> sdc_injected{0};
  std::atomic<std::uint64_t> sdc_detected{0};
  std::atomic<std::uint64_t> inner_restarts{0};
  std::atomic<std::uint64_t> inner_abandoned{0};
  std::atomic<std::uint64_t> sanitized_values{0};
  std::atomic<std::uint64_t> sdc_lost_steps{0};    ///< inner steps discarded by detections
  std::atomic<std::uint64_t> replay_lost_steps{0}; ///< the subset rediscovered while recomputing
                                                   ///< rolled-back outer progress

  // process failures
  std::atomic<std::uint64_t> failures_observed{0};
  std::atomic<std::uint64_t> outer_restarts{0};    ///< restore-and-resume events
  std::atomic<std::uint64_t> pf_lost_steps{0};     ///< committed inner steps rolled back
  std::atomic<std::uint64_t> recomputed_outers{0}; ///< outer iterations re-executed

  // checkpointing
  std::atomic<std::uint64_t> checkpoints_taken{0};   ///< committed store events (collective)
  std::atomic<std::uint64_t> bytes_checkpointed{0};  ///< framed bytes, summed over ranks

  // timings (informational)
  AtomicSeconds t_sdc_detect;
  AtomicSeconds t_sdc_recover;
  AtomicSeconds t_pf_exclude;     ///< failure observed -> repaired communicator
  AtomicSeconds t_pf_recover;     ///< repaired communicator -> state rebuilt
  AtomicSeconds t_checkpoint;
  AtomicSeconds t_checkpoint_dynamic;
  AtomicSeconds t_recompute;      ///< re-executing rolled-back outer progress
  AtomicSeconds t_total;
};

/// Plain-value copy of Metrics for reporting.
struct MetricsSnapshot {
  std::uint64_t spmv_count = 0;
  std::uint64_t detector_spmvs = 0;
  std::uint64_t detector_checks = 0;
  std::uint64_t sdc_injected = 0;
  std::uint64_t sdc_detected = 0;
  std::uint64_t inner_restarts = 0;
  std::uint64_t inner_abandoned = 0;
  std::uint64_t sanitized_values = 0;
  std::uint64_t sdc_lost_steps = 0;
  std::uint64_t replay_lost_steps = 0;
  std::uint64_t failures_observed = 0;
  std::uint64_t outer_restarts = 0;
  std::uint64_t pf_lost_steps = 0;
  std::uint64_t recomputed_outers = 0;
  std::uint64_t checkpoints_taken = 0;
  std::uint64_t bytes_checkpointed = 0;
  double t_sdc_detect = 0;
  double t_sdc_recover = 0;
  double t_pf_exclude = 0;
  double t_pf_recover = 0;
  double t_checkpoint = 0;
  double t_checkpoint_dynamic = 0;
  double t_recompute = 0;
  double t_total = 0;

  /// Inner steps re-executed for any resilience reason.
  std::uint64_t n_extra() const { return sdc_lost_steps + pf_lost_steps; }
  double t_check_dynamic_fraction() const {
    return t_checkpoint > 0 ? t_checkpoint_dynamic / t_checkpoint : 0.0;
  }
};

MetricsSnapshot snapshot(const Metrics& m);

// -- event log ----------------------------------------------------------------

struct InjectionEvent {
  int rank = 0;
  std::uint64_t ordinal = 0;   ///< 0-based injection number
  std::uint64_t clock = 0;     ///< injection clock value at the hit
  int outer_k = 0;
  int inner_step = 0;
  std::uint64_t element = 0;   ///< local index corrupted
  double before = 0;
  double after = 0;
};

struct DetectionEvent {
  int outer_k = 0;
  int inner_step = 0;
  std::uint64_t clock = 0;
  int site = 0;                ///< 0 = projection bound, 1 = residual monotonicity
  double value = 0;
  double bound = 0;
  std::uint64_t attempt_steps = 0;
  bool abandoned = false;
  bool in_replay = false;
};

struct StoreEvent {
  std::uint8_t kind = 0;       ///< 0 static, 1 dynamic
  std::uint32_t epoch = 0;
  int owner = 0;
  std::uint64_t frame_digest = 0;
  std::uint64_t frame_bytes = 0;
  std::optional<std::vector<std::uint8_t>> frame;  ///< kept when keep_frames is set
};

struct RestoreEvent {
  int rank = 0;
  std::uint32_t epoch = 0;
  bool had_dynamic = false;
  std::uint64_t dynamic_digest = 0;
  bool fetched_static = false;
  std::uint64_t static_digest = 0;
  std::optional<std::vector<std::uint8_t>> dynamic_frame;
};

struct FailureMark {
  int rank = 0;
  int outer_k = 0;
  std::uint64_t committed_clock = 0;
};

/// Mutex-guarded append-only log. Order within a vector follows wall-clock
/// append order and is only meaningful where events are per-rank sequential.
struct EventLog {
  bool keep_frames = false;

  void add(InjectionEvent e) { std::lock_guard<std::mutex> lk(mu); injections.push_back(std::move(e)); }
  void add(DetectionEvent e) { std::lock_guard<std::mutex> lk(mu); detections.push_back(std::move(e)); }
  void add(StoreEvent e) { std::lock_guard<std::mutex> lk(mu); stores.push_back(std::move(e)); }
  void add(RestoreEvent e) { std::lock_guard<std::mutex> lk(mu); restores.push_back(std::move(e)); }
  void add(FailureMark e) { std::lock_guard<std::mutex> lk(mu); failure_marks.push_back(std::move(e)); }

  std::mutex mu;
  std::vector<InjectionEvent> injections;
  std::vector<DetectionEvent> detections;
  std::vector<StoreEvent> stores;
  std::vector<RestoreEvent> restores;
  std::vector<FailureMark> failure_marks;
};

}  // namespace resilab::metrics
