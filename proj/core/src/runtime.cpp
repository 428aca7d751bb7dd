#include "resilab/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <deque>
#include <set>
#include <sstream>
#include <tuple>

#include "resilab/digest.hpp"

namespace resilab::runtime {

namespace {

std::string join_ranks(const std::vector<RankId>& rs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < rs.size(); ++i) os << (i ? "," : "") << rs[i];
  return os.str();
}

/// Thrown at a kill boundary to unwind the dying rank's thread. Deliberately
/// outside the std::exception hierarchy so program-level handlers cannot
/// swallow it.
struct RankKilledSignal {};

enum class GateKind : std::uint8_t {
  Barrier = 1,
  ReduceSum,
  ReduceMax,
  ReduceLand,
  Gather,
  Agree,
  Shrink,
};

double reduce_pair(GateKind k, double a, double b) {
  switch (k) {
    case GateKind::ReduceSum: return a + b;
    case GateKind::ReduceMax: return a > b ? a : b;
    case GateKind::ReduceLand: return (a != 0.0 && b != 0.0) ? 1.0 : 0.0;
    default: return a;
  }
}

/// Fixed-order binary tree fold over contributions in rank order:
/// ((r0 op r1) op (r2 op r3)) op ... independent of arrival order.
double tree_reduce(GateKind k, std::vector<double> vals) {
  const std::size_t n = vals.size();
  for (std::size_t stride = 1; stride < n; stride *= 2)
    for (std::size_t i = 0; i + stride < n; i += 2 * stride)
      vals[i] = reduce_pair(k, vals[i], vals[i + stride]);
  return vals.empty() ? 0.0 : vals[0];
}

std::uint64_t digest_doubles(const std::vector<double>& v) {
  return digest::fnv1a64(v.data(), v.size() * sizeof(double));
}

}  // namespace

CommError::CommError(CommErrorKind kind, std::vector<RankId> failed, const std::string& what)
    : std::runtime_error(what), kind_(kind), failed_(std::move(failed)) {}

InsufficientSpares::InsufficientSpares(int needed, int available)
    : std::runtime_error("insufficient spares: need " + std::to_string(needed) + ", have " +
                         std::to_string(available)),
      needed_(needed),
      available_(available) {}

WorldAborted::WorldAborted(const std::string& reason)
    : std::runtime_error("world aborted: " + reason) {}

// ---------------------------------------------------------------------------

struct World::Impl {
  struct Gate {
    GateKind kind = GateKind::Barrier;
    std::uint64_t fingerprint = 0;
    std::map<RankId, std::vector<double>> contributions;
    bool resolved = false;
    bool proc_failed = false;
    bool revoked = false;
    std::vector<RankId> failed;   // dead ranks at resolution, sorted
    std::vector<double> result;   // reduced scalar at [0], or gather concatenation
    int pickups = 0;
  };

  struct ShrinkGate {
    std::set<RankId> arrived;
    bool resolved = false;
    bool insufficient = false;
    int needed = 0;
    int available = 0;
    RepairInfo info;
    int pickups = 0;
  };

  struct RankState {
    int incarnation = 0;
    bool alive = true;
    bool finished = false;
    bool pending_kill = false;
    std::int64_t result = 0;
    RankOutcome outcome = RankOutcome::NeverRan;
  };

  struct Activation {
    RankId rank = -1;
    int incarnation = 0;
    RepairInfo repair;
  };

  explicit Impl(WorldOptions o) : opts(o) {
    ranks.resize(static_cast<std::size_t>(o.n_ranks));
    spare_slots.resize(static_cast<std::size_t>(o.n_spares));
  }

  WorldOptions opts;
  std::mutex mu;
  std::condition_variable cv;

  std::vector<RankState> ranks;
  int epoch = 0;
  std::set<int> revoked_epochs;
  bool aborted = false;
  std::string abort_reason;
  bool shutdown = false;
  std::uint64_t progress = 0;
  std::uint64_t trace_hash = 0;

  RankProgram program;
  std::vector<std::optional<Activation>> spare_slots;
  int next_spare = 0;
  std::vector<RepairInfo> repairs;

  // (epoch, seq) -> gate; per-(epoch, rank) call sequence counters. Agree
  // gates live in their own sequence space (top bit set): ranks entering
  // recovery may have burned different numbers of regular slots, but their
  // agree calls still have to meet in the same gate.
  std::map<std::pair<int, std::uint64_t>, Gate> gates;
  std::map<std::pair<int, RankId>, std::uint64_t> seqs;
  std::map<std::pair<int, RankId>, std::uint64_t> agree_seqs;
  std::map<int, ShrinkGate> shrinks;

  // (epoch, src, dst, tag) -> FIFO of messages
  std::map<std::tuple<int, RankId, RankId, int>, std::deque<std::vector<std::uint8_t>>> channels;
  std::map<std::tuple<int, RankId, RankId, int>, std::uint64_t> channel_counts;

  void bump_locked() {
    ++progress;
    cv.notify_all();
  }

  void fold_event_locked(std::uint64_t h) { trace_hash ^= digest::splitmix64(h); }

  void abort_locked(const std::string& reason) {
    if (aborted) return;
    aborted = true;
    abort_reason = reason;
    bump_locked();
  }

  bool epoch_revoked_locked(int e) const { return revoked_epochs.count(e) != 0; }

  /// Common op-entry validation. Precedence: world abort, then a pending
  /// kill, then stale or revoked communicator.
  void boundary_locked(RankCtx& ctx, const Comm& c, bool revoke_exempt) {
    if (aborted) throw WorldAborted(abort_reason);
    RankState& st = ranks[static_cast<std::size_t>(ctx.rank())];
    if (st.incarnation == ctx.incarnation() && st.pending_kill) {
      die_locked(ctx.rank());
      throw RankKilledSignal{};
    }
    if (c.size != opts.n_ranks) throw std::logic_error("comm does not belong to this world");
    if (c.epoch != epoch)
      throw CommError(CommErrorKind::Revoked, {}, "communicator epoch is stale");
    if (!revoke_exempt && epoch_revoked_locked(c.epoch))
      throw CommError(CommErrorKind::Revoked, {}, "communicator revoked");
  }

  void die_locked(RankId r) {
    RankState& st = ranks[static_cast<std::size_t>(r)];
    st.alive = false;
    st.pending_kill = false;
    st.outcome = RankOutcome::Dead;
    fold_event_locked(digest::mix(0xdead, digest::mix(static_cast<std::uint64_t>(r),
                                                      static_cast<std::uint64_t>(st.incarnation))));
    // A death can complete any gate still waiting on this rank.
    for (auto& [key, g] : gates)
      if (key.first == epoch) maybe_resolve_gate_locked(key, g);
    auto sh = shrinks.find(epoch);
    if (sh != shrinks.end()) maybe_resolve_shrink_locked(sh->second);
    bump_locked();
  }

  std::vector<RankId> dead_ranks_locked() const {
    std::vector<RankId> out;
    for (int r = 0; r < opts.n_ranks; ++r)
      if (!ranks[static_cast<std::size_t>(r)].alive) out.push_back(r);
    return out;
  }

  /// A gate resolves once every rank has contributed, died, or, provided some
  /// member is already dead, finished its program. Waiting on ranks that can
  /// still arrive keeps the reported failed set complete and identical at
  /// every pickup; a finished rank can never arrive, so once a death has
  /// doomed the gate to ProcFailed anyway it stops blocking the survivors.
  /// Divergence without a death stays a deadlock for the watchdog to flag.
  void maybe_resolve_gate_locked(const std::pair<int, std::uint64_t>& key, Gate& g) {
    if (g.resolved || g.revoked) return;
    const std::vector<RankId> dead = dead_ranks_locked();
    for (int r = 0; r < opts.n_ranks; ++r) {
      const RankState& st = ranks[static_cast<std::size_t>(r)];
      if (st.alive && !g.contributions.count(r) && !(st.finished && !dead.empty())) return;
    }
    g.resolved = true;
    g.failed = dead;
    g.pickups = static_cast<int>(g.contributions.size());
    if (g.kind == GateKind::Agree) {
      double land = 1.0;
      for (const auto& [r, v] : g.contributions) land = reduce_pair(GateKind::ReduceLand, land, v[0]);
      g.result = {land};
    } else if (!g.failed.empty()) {
      g.proc_failed = true;
    } else if (g.kind == GateKind::Gather) {
      for (const auto& [r, v] : g.contributions)
        g.result.insert(g.result.end(), v.begin(), v.end());
    } else if (g.kind == GateKind::Barrier) {
      g.result = {0.0};
    } else {
      std::vector<double> vals;
      vals.reserve(g.contributions.size());
      for (const auto& [r, v] : g.contributions) vals.push_back(v[0]);
      g.result = {tree_reduce(g.kind, std::move(vals))};
    }
    const std::uint64_t site = digest::mix(static_cast<std::uint64_t>(key.first), key.second);
    fold_event_locked(digest::mix(static_cast<std::uint64_t>(g.kind),
                                  digest::mix(site, digest_doubles(g.result))));
    bump_locked();
  }

  void maybe_resolve_shrink_locked(ShrinkGate& sg) {
    if (sg.resolved) return;
    std::vector<RankId> failed;
    for (int r = 0; r < opts.n_ranks; ++r) {
      const RankState& st = ranks[static_cast<std::size_t>(r)];
      if (!st.alive) {
        failed.push_back(r);
      } else if (!sg.arrived.count(r)) {
        return;
      }
    }
    sg.resolved = true;
    sg.pickups = static_cast<int>(sg.arrived.size());
    sg.needed = static_cast<int>(failed.size());
    sg.available = static_cast<int>(spare_slots.size()) - next_spare;
    if (sg.needed > sg.available) {
      sg.insufficient = true;
      bump_locked();
      return;
    }
    // Substitute spares in pool order, lowest failed rank first, then open
    // the next epoch. Activations run the program on the parked threads.
    RepairInfo info;
    for (RankId f : failed) {
      const int idx = next_spare++;
      RankState& st = ranks[static_cast<std::size_t>(f)];
      ++st.incarnation;
      st.alive = true;
      st.finished = false;
      st.pending_kill = false;
      st.outcome = RankOutcome::NeverRan;
      info.adopted.emplace_back(f, idx);
    }
    ++epoch;
    info.comm = Comm{epoch, opts.n_ranks};
    info.failed = failed;
    repairs.push_back(info);
    sg.info = info;
    for (const auto& [f, idx] : info.adopted)
      spare_slots[static_cast<std::size_t>(idx)] =
          Activation{f, ranks[static_cast<std::size_t>(f)].incarnation, info};
    fold_event_locked(digest::mix(0x5112, digest::mix(static_cast<std::uint64_t>(epoch),
                                                      digest::fnv1a64(failed.data(),
                                                                      failed.size() * sizeof(RankId)))));
    bump_locked();
  }

  /// Revocation completes every non-agree gate of the epoch with a Revoked
  /// outcome; ranks not yet arrived will bounce off the epoch check instead.
  void revoke_epoch_locked(int e) {
    if (revoked_epochs.count(e)) return;
    revoked_epochs.insert(e);
    for (auto& [key, g] : gates) {
      if (key.first != e || g.resolved || g.kind == GateKind::Agree) continue;
      g.revoked = true;
      g.pickups = static_cast<int>(g.contributions.size());
    }
    fold_event_locked(digest::mix(0x4e40, static_cast<std::uint64_t>(e)));
    bump_locked();
  }

  bool world_done_locked() const {
    for (const RankState& st : ranks)
      if (st.alive && !st.finished) return false;
    return true;
  }

  template <typename Pred>
  void wait_locked(std::unique_lock<std::mutex>& lk, Pred&& pred) {
    // The watchdog fires only if nothing in the whole world progressed for a
    // full interval; any arrival, death, send, or resolution resets it.
    while (!pred()) {
      const std::uint64_t seen = progress;
      const auto deadline = std::chrono::steady_clock::now() +
                            std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                std::chrono::duration<double>(opts.watchdog_seconds));
      cv.wait_until(lk, deadline, [&] { return pred() || progress != seen; });
      if (!pred() && progress == seen && !aborted)
        abort_locked("deadlock watchdog: no progress for " +
                     std::to_string(opts.watchdog_seconds) + "s");
      if (aborted && !pred()) throw WorldAborted(abort_reason);
    }
  }
};

// ---------------------------------------------------------------------------

RankCtx::RankCtx(World* w, RankId r, int incarnation, Comm comm)
    : world_(w), rank_(r), incarnation_(incarnation), comm_(comm) {}

int RankCtx::n_ranks() const { return world_->n_ranks(); }

namespace {

/// Shared body for the keyed collectives. Joins the (epoch, seq) gate with
/// one contribution, waits for resolution, and returns the frozen outcome.
std::vector<double> run_gate(World::Impl& im, RankCtx& ctx, const Comm& c, GateKind kind,
                             std::uint64_t fingerprint, std::vector<double> contribution,
                             std::vector<RankId>* agree_failed) {
  std::unique_lock<std::mutex> lk(im.mu);
  im.boundary_locked(ctx, c, kind == GateKind::Agree);
  const std::uint64_t seq =
      kind == GateKind::Agree
          ? (im.agree_seqs[{c.epoch, ctx.rank()}]++ | (1ull << 63))
          : im.seqs[{c.epoch, ctx.rank()}]++;
  auto& gate = im.gates[{c.epoch, seq}];
  if (gate.contributions.empty() && !gate.resolved) {
    gate.kind = kind;
    gate.fingerprint = fingerprint;
  } else if (gate.kind != kind || gate.fingerprint != fingerprint) {
    im.abort_locked("SPMD violation: rank " + std::to_string(ctx.rank()) +
                    " joined collective #" + std::to_string(seq) + " of epoch " +
                    std::to_string(c.epoch) + " with a mismatched operation");
    throw WorldAborted(im.abort_reason);
  }
  gate.contributions.emplace(ctx.rank(), std::move(contribution));
  im.bump_locked();
  im.maybe_resolve_gate_locked({c.epoch, seq}, gate);
  im.wait_locked(lk, [&] { return gate.resolved || gate.revoked; });

  // Copy the outcome before cleanup; the gate dies with its last pickup.
  const bool proc_failed = gate.proc_failed;
  const bool revoked = gate.revoked;
  const std::vector<RankId> failed = gate.failed;
  std::vector<double> result = gate.result;
  if (--gate.pickups == 0) im.gates.erase({c.epoch, seq});

  if (revoked) throw CommError(CommErrorKind::Revoked, {}, "communicator revoked");
  if (proc_failed)
    throw CommError(CommErrorKind::ProcFailed, failed,
                    "collective observed failed ranks [" + join_ranks(failed) + "]");
  if (agree_failed) *agree_failed = failed;
  return result;
}

}  // namespace

void RankCtx::barrier(const Comm& c) {
  run_gate(*world_->impl_, *this, c, GateKind::Barrier, digest::mix(1, 0), {0.0}, nullptr);
}

double RankCtx::allreduce_sum(const Comm& c, double v) {
  return run_gate(*world_->impl_, *this, c, GateKind::ReduceSum, digest::mix(2, 0), {v},
                  nullptr)[0];
}

double RankCtx::allreduce_max(const Comm& c, double v) {
  return run_gate(*world_->impl_, *this, c, GateKind::ReduceMax, digest::mix(3, 0), {v},
                  nullptr)[0];
}

bool RankCtx::allreduce_land(const Comm& c, bool v) {
  return run_gate(*world_->impl_, *this, c, GateKind::ReduceLand, digest::mix(4, 0),
                  {v ? 1.0 : 0.0}, nullptr)[0] != 0.0;
}

std::vector<double> RankCtx::allgather(const Comm& c, const std::vector<double>& block) {
  return run_gate(*world_->impl_, *this, c, GateKind::Gather, digest::mix(5, 0), block, nullptr);
}

AgreeResult RankCtx::agree(const Comm& c, bool v) {
  AgreeResult out;
  out.value = run_gate(*world_->impl_, *this, c, GateKind::Agree, digest::mix(6, 0),
                       {v ? 1.0 : 0.0}, &out.failed)[0] != 0.0;
  return out;
}

void RankCtx::send(const Comm& c, RankId dst, int tag, const std::vector<std::uint8_t>& bytes) {
  World::Impl& im = *world_->impl_;
  std::unique_lock<std::mutex> lk(im.mu);
  im.boundary_locked(*this, c, false);
  if (dst < 0 || dst >= im.opts.n_ranks) throw std::logic_error("send: bad destination rank");
  if (!im.ranks[static_cast<std::size_t>(dst)].alive)
    throw CommError(CommErrorKind::ProcFailed, {dst},
                    "send touched failed rank " + std::to_string(dst));
  const auto key = std::make_tuple(c.epoch, rank_, dst, tag);
  im.channels[key].push_back(bytes);
  const std::uint64_t ordinal = im.channel_counts[key]++;
  const std::uint64_t chan =
      digest::mix(digest::mix(static_cast<std::uint64_t>(c.epoch), static_cast<std::uint64_t>(tag)),
                  digest::mix(static_cast<std::uint64_t>(rank_), static_cast<std::uint64_t>(dst)));
  im.fold_event_locked(digest::mix(0x5e4d, digest::mix(digest::mix(chan, ordinal),
                                                       digest::fnv1a64(bytes.data(), bytes.size()))));
  im.bump_locked();
}

std::vector<std::uint8_t> RankCtx::recv(const Comm& c, RankId src, int tag) {
  World::Impl& im = *world_->impl_;
  std::unique_lock<std::mutex> lk(im.mu);
  im.boundary_locked(*this, c, false);
  if (src < 0 || src >= im.opts.n_ranks) throw std::logic_error("recv: bad source rank");
  const auto key = std::make_tuple(c.epoch, src, rank_, tag);
  // Messages already in flight are delivered even if the sender has since
  // died or the epoch was revoked; errors only surface on an empty channel.
  auto ready = [&] {
    auto it = im.channels.find(key);
    return it != im.channels.end() && !it->second.empty();
  };
  im.wait_locked(lk, [&] {
    return ready() || !im.ranks[static_cast<std::size_t>(src)].alive ||
           im.epoch_revoked_locked(c.epoch) || c.epoch != im.epoch;
  });
  if (ready()) {
    auto& q = im.channels[key];
    std::vector<std::uint8_t> msg = std::move(q.front());
    q.pop_front();
    im.bump_locked();
    return msg;
  }
  if (!im.ranks[static_cast<std::size_t>(src)].alive)
    throw CommError(CommErrorKind::ProcFailed, {src},
                    "recv touched failed rank " + std::to_string(src));
  throw CommError(CommErrorKind::Revoked, {}, "communicator revoked");
}

void RankCtx::revoke(const Comm& c) {
  World::Impl& im = *world_->impl_;
  std::unique_lock<std::mutex> lk(im.mu);
  im.boundary_locked(*this, c, true);
  im.revoke_epoch_locked(c.epoch);
}

RepairInfo RankCtx::shrink_and_substitute(const Comm& c) {
  World::Impl& im = *world_->impl_;
  std::unique_lock<std::mutex> lk(im.mu);
  im.boundary_locked(*this, c, true);
  auto& sg = im.shrinks[c.epoch];
  sg.arrived.insert(rank_);
  im.bump_locked();
  im.maybe_resolve_shrink_locked(sg);
  im.wait_locked(lk, [&] { return sg.resolved; });
  const bool insufficient = sg.insufficient;
  const int needed = sg.needed;
  const int available = sg.available;
  RepairInfo info = sg.info;
  if (--sg.pickups == 0) im.shrinks.erase(c.epoch);
  if (insufficient) throw InsufficientSpares(needed, available);
  comm_ = info.comm;
  return info;
}

// ---------------------------------------------------------------------------

World::World(WorldOptions opts) : impl_(std::make_unique<Impl>(opts)), opts_(opts) {}
World::~World() = default;

int World::current_epoch() const {
  std::lock_guard<std::mutex> lk(impl_->mu);
  return impl_->epoch;
}

int World::spares_remaining() const {
  std::lock_guard<std::mutex> lk(impl_->mu);
  return static_cast<int>(impl_->spare_slots.size()) - impl_->next_spare;
}

void World::request_kill(RankId rank) {
  std::lock_guard<std::mutex> lk(impl_->mu);
  if (rank < 0 || rank >= opts_.n_ranks) throw std::logic_error("kill: bad rank");
  auto& st = impl_->ranks[static_cast<std::size_t>(rank)];
  if (st.alive) st.pending_kill = true;
  impl_->bump_locked();
}

void World::abort(const std::string& reason) {
  std::lock_guard<std::mutex> lk(impl_->mu);
  impl_->abort_locked(reason);
}

WorldResult World::run(const RankProgram& program) {
  Impl& im = *impl_;
  im.program = program;

  // Runs one incarnation to completion and records how it ended. A rank may
  // finish, die at a boundary, or unwind because the world aborted.
  auto serve = [&](RankCtx&& ctx) {
    const RankId r = ctx.rank();
    const int inc = ctx.incarnation();
    try {
      const std::int64_t res = im.program(ctx);
      std::lock_guard<std::mutex> lk(im.mu);
      auto& st = im.ranks[static_cast<std::size_t>(r)];
      if (st.incarnation == inc) {
        st.finished = true;
        st.result = res;
        st.outcome = im.aborted ? RankOutcome::Aborted : RankOutcome::Finished;
      }
      // A finish can complete a doomed gate still waiting on this rank.
      for (auto& [key, g] : im.gates)
        if (key.first == im.epoch) im.maybe_resolve_gate_locked(key, g);
      im.bump_locked();
    } catch (const RankKilledSignal&) {
      // die_locked already recorded the death.
    } catch (const WorldAborted&) {
      std::lock_guard<std::mutex> lk(im.mu);
      auto& st = im.ranks[static_cast<std::size_t>(r)];
      if (st.incarnation == inc) {
        st.finished = true;
        st.outcome = RankOutcome::Aborted;
      }
      im.bump_locked();
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lk(im.mu);
      im.abort_locked("rank " + std::to_string(r) + " escaped with: " + e.what());
      auto& st = im.ranks[static_cast<std::size_t>(r)];
      if (st.incarnation == inc) {
        st.finished = true;
        st.outcome = RankOutcome::Aborted;
      }
      im.bump_locked();
    }
  };

  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(opts_.n_ranks + opts_.n_spares));

  for (RankId r = 0; r < opts_.n_ranks; ++r)
    threads.emplace_back([&, r] { serve(RankCtx(this, r, 0, Comm{0, opts_.n_ranks})); });

  // Spares park until a shrink assigns them a rank; each slot serves at most
  // one activation.
  for (int s = 0; s < opts_.n_spares; ++s) {
    threads.emplace_back([&, s] {
      std::optional<Impl::Activation> act;
      {
        std::unique_lock<std::mutex> lk(im.mu);
        im.cv.wait(lk, [&] { return im.spare_slots[static_cast<std::size_t>(s)].has_value() ||
                                    im.shutdown; });
        act = im.spare_slots[static_cast<std::size_t>(s)];
      }
      if (!act) return;
      RankCtx ctx(this, act->rank, act->incarnation, act->repair.comm);
      ctx.adopted_ = true;
      ctx.repair_ = act->repair;
      serve(std::move(ctx));
    });
  }

  {
    std::unique_lock<std::mutex> lk(im.mu);
    // The run is over when every rank has finished or died for good. The
    // watchdog inside wait_locked converts a global stall into an abort,
    // which flips every blocked op to WorldAborted and unwinds the threads.
    try {
      im.wait_locked(lk, [&] { return im.world_done_locked(); });
    } catch (const WorldAborted&) {
    }
    im.shutdown = true;
    im.cv.notify_all();
  }
  for (auto& t : threads) t.join();

  WorldResult out;
  std::lock_guard<std::mutex> lk(im.mu);
  out.aborted = im.aborted;
  out.abort_reason = im.abort_reason;
  out.final_epoch = im.epoch;
  out.repairs = im.repairs;
  out.trace_hash = im.trace_hash;
  out.rank_outcomes.reserve(im.ranks.size());
  out.rank_results.reserve(im.ranks.size());
  for (const auto& st : im.ranks) {
    out.rank_outcomes.push_back(st.outcome);
    out.rank_results.push_back(st.result);
  }
  return out;
}

}  // namespace resilab::runtime
