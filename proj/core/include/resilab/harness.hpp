/// \file harness.hpp
/// Experiment driver: turns a flat configuration into worlds, runs the
/// solver under a fault plan for N seeded repetitions, and emits
/// machine-readable reports. Counters are the contract; wall times are
/// carried but never asserted.
///
/// Configurations round-trip through a flat key=value text form; a report
/// embeds its fully resolved config so any run can be replayed from the
/// report alone.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "resilab/faultlab.hpp"
#include "resilab/metrics.hpp"
#include "resilab/runtime.hpp"
#include "resilab/solver.hpp"

namespace resilab::harness {

/// Bad flag values, malformed config files, inconsistent experiment shapes.
class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& what) : std::runtime_error(what) {}
};

/// compare_runs over reports whose configurations are not comparable.
class ConfigMismatch : public std::runtime_error {
 public:
  explicit ConfigMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct ProblemSpec {
  enum class Kind { Poisson3D, MatrixMarket };
  Kind kind = Kind::Poisson3D;
  std::int64_t nx = 8, ny = 8, nz = 8;
  std::string path;  ///< MatrixMarket file
};

/// Textual failure plan: what the --failures flag carries.
struct FailureSpec {
  enum class Kind { None, Auto, List };
  Kind kind = Kind::None;
  double mean_steps = 0;  ///< Auto: exponential mean in committed inner steps
  int count = 0;          ///< Auto: number of failures
  std::vector<faultlab::FailureEvent> listed;  ///< List: rank@outer triggers

  int planned_failures() const {
    return kind == Kind::Auto ? count : static_cast<int>(listed.size());
  }
};

struct ExperimentConfig {
  ProblemSpec problem;
  int ranks = 4;
  int spares = 0;
  solver::SolverConfig solver;
  std::uint64_t sdc_interval = 0;  ///< 0 = no injection
  faultlab::CorruptionModel model;
  FailureSpec failures;
  std::uint64_t seed = 1;
  /// Enough repetitions for a stable spread without drowning quick runs.
  int reps = 5;
  double watchdog_seconds = 10.0;
};

// -- flag / config-file parsing -------------------------------------------------

solver::Detector parse_detector(const std::string& s);               // none|bounded|monotonicity
faultlab::CorruptionModel parse_model(const std::string& s);         // bitflip|bitflip:B|scale:F
std::uint64_t parse_interval(const std::string& s);                  // none|N
FailureSpec parse_failures(const std::string& s);                    // none|auto:MEAN:COUNT|list:r@k,...

/// Canonical flat form: ordered key=value pairs covering every semantic
/// field (fault plan included). Hashing, report embedding, and the config
/// file format all speak this.
std::vector<std::pair<std::string, std::string>> config_kv(const ExperimentConfig& c);

/// Applies one key=value onto a config; throws UsageError on unknown keys
/// or bad values. The inverse of config_kv, one entry at a time.
void apply_kv(ExperimentConfig& c, const std::string& key, const std::string& value);

/// Parses a flat config file: one key = value per line, '#' comments.
ExperimentConfig load_config_file(const std::string& path);

/// FNV-1a over the canonical key=value lines.
std::uint64_t config_hash(const ExperimentConfig& c);

/// Builds the runnable fault plan for one repetition seed.
faultlab::FaultPlan plan_from_config(const ExperimentConfig& c, std::uint64_t seed);

// -- running ---------------------------------------------------------------------

struct RepResult {
  int rep = 0;
  std::uint64_t seed = 0;
  solver::SolveStatus status = solver::SolveStatus::Error;
  bool converged = false;
  double final_rel_residual = 0;
  std::uint64_t outers_completed = 0;
  bool aborted = false;             ///< world-level abort (deadlock, SPMD violation)
  std::string abort_reason;
  int final_epoch = 0;
  std::uint64_t trace_hash = 0;
  metrics::MetricsSnapshot metrics;
};

const char* status_name(solver::SolveStatus s);

/// One world, one repetition, under an explicit plan. Event capture is
/// optional (used by tests; reports carry only metrics).
RepResult run_single(const ExperimentConfig& c, const faultlab::FaultPlan& plan,
                     metrics::EventLog* capture = nullptr);

struct Aggregate {
  // keyed exactly like the numeric CSV columns
  std::vector<std::pair<std::string, double>> mean;
  std::vector<std::pair<std::string, double>> stddev;  ///< population
  std::vector<std::pair<std::string, double>> cov;     ///< stddev / |mean|, 0 when mean is 0
};

struct RunReport {
  ExperimentConfig config;
  std::uint64_t config_hash = 0;
  std::vector<RepResult> reps;
  Aggregate aggregate;
};

/// Validates the config, runs all repetitions (repetition i uses seed+i,
/// sequentially for timing hygiene), and aggregates.
RunReport run_experiment(const ExperimentConfig& c);

// -- emission ---------------------------------------------------------------------

/// One row per repetition. Column order is fixed:
/// config_hash, rep, converged, final_relative_residual, spmv_count,
/// n_extra, sdc_injected, sdc_detected, inner_restarts, outer_restarts,
/// checkpoints_taken, bytes_checkpointed, t_sdc_d, t_sdc_r, t_pf_x, t_pf_r,
/// t_check, t_check_dynamic_fraction, t_recompute, total_time
std::string csv_header();
std::string to_csv(const RunReport& r);

/// One object per repetition plus the aggregate, config embedded.
std::string to_json(const RunReport& r);

/// Parses to_json output back; field-identical round trip.
RunReport report_from_json(const std::string& text);
RunReport load_report(const std::string& path);

// -- composition ------------------------------------------------------------------

/// Standalone-vs-combined estimate: overhead(X) = total(X) - total(baseline),
/// estimate = baseline + overhead(se) + overhead(pf), discrepancy =
/// multi - estimate. Counter space is exact; wall-time space informational.
struct CompareReport {
  std::uint64_t baseline_hash = 0, se_hash = 0, pf_hash = 0, multi_hash = 0;
  double spmv_baseline = 0, spmv_se = 0, spmv_pf = 0, spmv_multi = 0;
  double spmv_overhead_se = 0, spmv_overhead_pf = 0;
  double spmv_estimate = 0, spmv_discrepancy = 0;
  double time_baseline = 0, time_se = 0, time_pf = 0, time_multi = 0;
  double time_overhead_se = 0, time_overhead_pf = 0;
  double time_estimate = 0, time_discrepancy = 0;
  /// multi - se - pf + baseline per repetition; present when all four
  /// reports have equal repetition counts.
  std::vector<double> rep_spmv_discrepancy;
};

/// Throws ConfigMismatch unless all four reports share problem shape, rank
/// count, and solve budgets.
CompareReport compare_runs(const RunReport& baseline, const RunReport& se,
                           const RunReport& pf, const RunReport& multi);

std::string to_json(const CompareReport& r);

}  // namespace resilab::harness
