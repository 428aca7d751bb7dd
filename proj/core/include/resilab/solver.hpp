/// \file solver.hpp
/// Fault-tolerant flexible GMRES. The outer flexible iteration runs in
/// reliable mode; the inner GMRES solves that precondition it run in
/// unreliable mode, where fault hooks may corrupt spmv results or schedule
/// rank deaths. Soft errors are caught by an inexpensive detector, rolled
/// back with a local snapshot, and retried; process failures unwind through
/// revoke/agree/shrink and resume from neighbor checkpoints.
///
/// Two clocks, both checkpointed, drive fault reproducibility:
///  - the injection clock counts performed inner Arnoldi spmvs and keeps
///    advancing across soft-error retries (a retried attempt sees fresh
///    injection sites, never the same corruption forever), but rolls back
///    with a process-failure restore so recomputation replays its faults;
///  - the committed clock counts inner steps of attempts that were accepted,
///    so failure triggers expressed in committed steps fire at the same
///    logical position whether or not soft errors also occurred.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "resilab/checkpoint.hpp"
#include "resilab/linalg.hpp"
#include "resilab/metrics.hpp"
#include "resilab/runtime.hpp"

namespace resilab::solver {

enum class Detector { None, Bounded, Monotonicity };

struct SolverConfig {
  int inner_iters = 25;
  int outer_iters = 20;
  double tol = 1e-8;
  Detector detector = Detector::None;
  /// Projection entries are accepted while |h| <= frob_norm * bound_slack.
  double bound_slack = 1.0 + 1e-6;
  /// Residual monotonicity is checked before inner steps 0, m, 2m, ...
  int mono_interval = 5;
  /// Dynamic checkpoints carry the outer basis (resume in place) or just the
  /// solution vector (resume by restarting the outer cycle, one extra spmv).
  bool checkpoint_basis = true;
  bool checkpoints_enabled = false;
  /// Soft-error retries per outer iteration before the attempt's clean
  /// prefix is accepted as a degraded preconditioner application.
  int max_sdc_restarts = 3;
};

/// Per-rank immutable problem state. Recovered from a neighbor checkpoint,
/// never recomputed, when a spare adopts a failed rank.
struct StaticState {
  linalg::index_t n_global = 0;
  int n_ranks = 0;
  linalg::RowRange owned;
  linalg::CsrMatrix a_local;
  linalg::DenseVector b_local;
  double a_frob = 0;  ///< Frobenius norm of the full operator
  double b_norm = 0;  ///< 2-norm of the full right-hand side
};

std::vector<std::uint8_t> serialize_static(const StaticState& s);
StaticState deserialize_static(const std::vector<std::uint8_t>& payload);

/// Builds a rank's static state collectively (the norms are global).
using StaticBuilder =
    std::function<StaticState(runtime::RankCtx&, const runtime::Comm&)>;

/// Builder for the 7-point Poisson benchmark problem.
StaticBuilder make_poisson_builder(const linalg::Poisson3DSpec& spec);

/// Builder that partitions an already-assembled operator (shared, not
/// copied) with an all-ones right-hand side.
StaticBuilder make_csr_builder(std::shared_ptr<const linalg::CsrMatrix> a);

/// Everything the outer iteration accumulates, plus the fault clocks.
/// Serialized (with or without the basis) as the dynamic checkpoint payload.
struct DynamicState {
  std::uint64_t k = 0;          ///< completed outer iterations, total
  double r0_norm = 0;           ///< convergence reference, equals b_norm
  std::vector<double> x;        ///< local block of the current solution
  std::uint64_t injection_clock = 0;
  std::uint64_t committed_clock = 0;
  // current outer cycle (v has one more column than z when nonempty)
  std::vector<std::vector<double>> v;      ///< local blocks of the outer basis
  std::vector<std::vector<double>> z;      ///< local blocks of preconditioned vectors
  std::vector<std::vector<double>> r_cols; ///< rotated projection columns (column j: j+1 entries)
  std::vector<double> gc, gs;              ///< Givens rotations
  std::vector<double> g;                   ///< rotated least-squares right-hand side
};

std::vector<std::uint8_t> serialize_dynamic(const DynamicState& d, bool with_basis);
DynamicState deserialize_dynamic(const std::vector<std::uint8_t>& payload);

/// Passed to fault hooks at each unreliable-mode site.
struct HookInfo {
  int rank = 0;
  int outer_k = 0;
  int inner_step = 0;
  std::uint64_t injection_clock = 0;     ///< value after counting this spmv
  std::uint64_t committed_prospect = 0;  ///< committed clock if this step commits
};

/// Fault-injection surface. The solver calls these from unreliable-mode
/// sites only; implementations may corrupt the local spmv block in place
/// and/or schedule the calling rank's death.
class FaultHooks {
 public:
  virtual ~FaultHooks() = default;
  virtual void on_inner_spmv(runtime::RankCtx&, const HookInfo&, std::vector<double>&) {}
  virtual void on_outer_enter(runtime::RankCtx&, const HookInfo&) {}
};

enum class SolveStatus {
  Converged,
  BudgetExhausted,
  InsufficientSpares,
  HolderDead,
  Error,
};

struct SolveResult {
  SolveStatus status = SolveStatus::Error;
  bool converged = false;
  double final_rel_residual = 0;
  std::uint64_t outers_completed = 0;
  std::vector<double> x_local;  ///< this rank's block of the final iterate
};

/// Runs the whole multiresilient solve for one rank incarnation: bootstrap
/// (or checkpoint adoption for spares), the outer loop with soft-error
/// recovery, and process-failure recovery. Collective across the world.
SolveResult ft_gmres(runtime::RankCtx& ctx, const StaticBuilder& builder,
                     const SolverConfig& cfg, FaultHooks* hooks, metrics::Metrics& m,
                     metrics::EventLog& log);

// -- detector primitives (pure, unit-testable) --------------------------------

struct BoundCheckResult {
  bool ok = true;
  int bad_index = -1;
  double value = 0;  ///< worst offending magnitude
  double bound = 0;
};

/// A projection column is plausible while every |entry| <= frob * slack;
/// non-finite entries always fail. Costs no matrix work.
BoundCheckResult bounded_check(const std::vector<double>& column, double frob_norm,
                               double slack);

/// The explicit inner residual may not grow between checks (tiny relative
/// slack absorbs roundoff); non-finite residuals always violate.
bool monotonicity_violated(double previous, double current);

/// Zeroes non-finite entries in place; returns how many were replaced.
std::size_t sanitize(std::vector<double>& v);

}  // namespace resilab::solver
