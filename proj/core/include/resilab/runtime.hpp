/// \file runtime.hpp
/// Deterministic simulated SPMD runtime. A World runs one program on a set
/// of logical ranks, each on its own thread, all synchronization funneled
/// through a single monitor. Determinism comes from the semantics, not the
/// scheduler: collectives are keyed by (epoch, per-rank call sequence) and
/// reduce in a fixed binary-tree order, so a given program and fault script
/// produce identical results on every run.
///
/// Failure semantics follow the revoke/agree/shrink style of fault-tolerant
/// MPI runtimes: a killed rank dies at its next runtime call; survivors see
/// ProcFailed from any collective that expected it; recovery revokes the
/// communicator, agrees on the failed set, and shrinks onto warm spares.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace resilab::runtime {

using RankId = int;

/// Communicator handle. `epoch` distinguishes the generations created by
/// repairs; ops on a handle older than the world's current epoch fail with
/// Revoked. `size` is the (constant) number of logical ranks.
struct Comm {
  int epoch = 0;
  int size = 0;
};

enum class CommErrorKind { ProcFailed, Revoked };

/// Raised by runtime ops on failure. ProcFailed carries the ranks whose
/// death was observed by that op; Revoked carries nothing.
class CommError : public std::runtime_error {
 public:
  CommError(CommErrorKind kind, std::vector<RankId> failed, const std::string& what);
  CommErrorKind kind() const { return kind_; }
  const std::vector<RankId>& failed() const { return failed_; }

 private:
  CommErrorKind kind_;
  std::vector<RankId> failed_;
};

/// Raised by shrink_and_substitute when the spare pool cannot cover the
/// failed ranks. Every participant receives it.
class InsufficientSpares : public std::runtime_error {
 public:
  InsufficientSpares(int needed, int available);
  int needed() const { return needed_; }
  int available() const { return available_; }

 private:
  int needed_;
  int available_;
};

/// Raised out of any runtime op once the world has been aborted (SPMD
/// violation, deadlock watchdog, or a rank escaping with an unexpected
/// exception). Programs should let it propagate.
class WorldAborted : public std::runtime_error {
 public:
  explicit WorldAborted(const std::string& reason);
};

struct AgreeResult {
  bool value = true;               ///< logical AND over surviving contributions
  std::vector<RankId> failed;      ///< ranks dead at resolution, sorted
};

/// Outcome of one successful shrink_and_substitute.
struct RepairInfo {
  Comm comm;                                    ///< the repaired communicator
  std::vector<RankId> failed;                   ///< ranks replaced in this repair, sorted
  std::vector<std::pair<RankId, int>> adopted;  ///< (rank, spare pool index) pairs
};

class World;

/// Per-incarnation handle passed to the program. All runtime ops go through
/// it. Not copyable; valid only inside the program invocation it was created
/// for.
class RankCtx {
 public:
  RankId rank() const { return rank_; }
  int n_ranks() const;
  World& world() { return *world_; }

  /// Communicator for the world's current epoch as this incarnation knows it.
  Comm comm() const { return comm_; }

  /// True when this incarnation is a spare activated to replace a failed
  /// rank. `repair()` then describes the repair that activated it.
  bool adopted() const { return adopted_; }
  const RepairInfo& repair() const { return repair_; }

  /// Serial of this incarnation of the rank; bumps when a spare adopts it.
  int incarnation() const { return incarnation_; }

  // -- collectives (SPMD: every live rank of the epoch must call in step;
  // once a member is dead they raise ProcFailed instead of waiting on ranks
  // that already finished and so can never arrive) --

  void barrier(const Comm& c);
  double allreduce_sum(const Comm& c, double v);
  double allreduce_max(const Comm& c, double v);
  bool allreduce_land(const Comm& c, bool v);

  /// Concatenation of every rank's block in rank order. Blocks may differ
  /// in length.
  std::vector<double> allgather(const Comm& c, const std::vector<double>& block);

  // -- point to point (buffered, FIFO per (src, dst, tag) channel) --

  void send(const Comm& c, RankId dst, int tag, const std::vector<std::uint8_t>& bytes);
  std::vector<std::uint8_t> recv(const Comm& c, RankId src, int tag);

  // -- failure handling --

  /// Marks the epoch revoked and wakes everything blocked on it. Idempotent;
  /// usable regardless of prior failures.
  void revoke(const Comm& c);

  /// Failure-tolerant agreement: waits for every live rank of the epoch,
  /// excuses dead ones, and returns the same (AND, failed set) everywhere.
  /// Works on revoked communicators.
  AgreeResult agree(const Comm& c, bool v);

  /// Collective over the epoch's survivors. Replaces every dead rank with a
  /// warm spare (pool order, lowest failed rank first), bumps the epoch, and
  /// returns the repaired communicator plus the substitution map. Throws
  /// InsufficientSpares on every participant if the pool is too small.
  /// Works on revoked communicators.
  RepairInfo shrink_and_substitute(const Comm& c);

 private:
  friend class World;
  RankCtx(World* w, RankId r, int incarnation, Comm comm);

  World* world_;
  RankId rank_;
  int incarnation_;
  Comm comm_;
  bool adopted_ = false;
  RepairInfo repair_;
};

/// One per-rank program invocation. The return value lands in
/// WorldResult::rank_results for the rank the incarnation served.
using RankProgram = std::function<std::int64_t(RankCtx&)>;

enum class RankOutcome { Finished, Dead, Aborted, NeverRan };

struct WorldResult {
  bool aborted = false;
  std::string abort_reason;
  int final_epoch = 0;
  std::vector<RankOutcome> rank_outcomes;        ///< by rank id
  std::vector<std::int64_t> rank_results;        ///< by rank id; valid where Finished
  std::vector<RepairInfo> repairs;               ///< in epoch order
  std::uint64_t trace_hash = 0;                  ///< order-insensitive digest of all events
};

struct WorldOptions {
  int n_ranks = 1;
  int n_spares = 0;
  /// Seconds without any global progress before the watchdog calls deadlock.
  double watchdog_seconds = 10.0;
};

/// Owns the threads, the monitor, and all channel state for one run.
/// Construct, call run() once, read the result. Not reusable.
class World {
 public:
  explicit World(WorldOptions opts);
  ~World();

  World(const World&) = delete;
  World& operator=(const World&) = delete;

  /// Runs `program` on every active rank (and on spares as they are
  /// activated). Blocks until every rank has finished or died and returns
  /// the collected outcome.
  WorldResult run(const RankProgram& program);

  /// Marks the current incarnation of `rank` for death at its next runtime
  /// call. Safe to call from inside the program (typically from the victim's
  /// own thread at a fault-injection site) or from outside before run().
  void request_kill(RankId rank);

  /// Aborts the whole world: every op unblocks with WorldAborted. Used by
  /// the runtime itself on SPMD violations and by programs for fatal,
  /// non-recoverable conditions.
  void abort(const std::string& reason);

  int n_ranks() const { return opts_.n_ranks; }
  int current_epoch() const;
  int spares_remaining() const;

  /// Opaque monitor state; public so the runtime's internal helpers can
  /// name it, defined only in the implementation file.
  struct Impl;

 private:
  friend class RankCtx;
  std::unique_ptr<Impl> impl_;
  WorldOptions opts_;
};

}  // namespace resilab::runtime
