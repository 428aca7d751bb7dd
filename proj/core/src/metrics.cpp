#include "resilab/metrics.hpp"

namespace resilab::metrics {

MetricsSnapshot snapshot(const Metrics& m) {
  MetricsSnapshot s;
  s.spmv_count = m.spmv_count.load();
  s.detector_spmvs = m.detector_spmvs.load();
  s.detector_checks = m.detector_checks.load();
  s.sdc_injected = m.sdc_injected.load();
  s.sdc_detected = m.sdc_detected.load();
  s.inner_restarts = m.inner_restarts.load();
  s.inner_abandoned = m.inner_abandoned.load();
  s.sanitized_values = m.sanitized_values.load();
  s.sdc_lost_steps = m.sdc_lost_steps.load();
  s.replay_lost_steps = m.replay_lost_steps.load();
  s.failures_observed = m.failures_observed.load();
  s.outer_restarts = m.outer_restarts.load();
  s.pf_lost_steps = m.pf_lost_steps.load();
  s.recomputed_outers = m.recomputed_outers.load();
  s.checkpoints_taken = m.checkpoints_taken.load();
  s.bytes_checkpointed = m.bytes_checkpointed.load();
  s.t_sdc_detect = m.t_sdc_detect.seconds();
  s.t_sdc_recover = m.t_sdc_recover.seconds();
  s.t_pf_exclude = m.t_pf_exclude.seconds();
  s.t_pf_recover = m.t_pf_recover.seconds();
  s.t_checkpoint = m.t_checkpoint.seconds();
  s.t_checkpoint_dynamic = m.t_checkpoint_dynamic.seconds();
  s.t_recompute = m.t_recompute.seconds();
  s.t_total = m.t_total.seconds();
  return s;
}

}  // namespace resilab::metrics
