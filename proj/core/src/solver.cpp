#include "resilab/solver.hpp"

#include <chrono>
#include <cmath>
#include <memory>
#include <optional>

#include "resilab/digest.hpp"

namespace resilab::solver {

using linalg::DenseVector;
using linalg::index_t;

namespace {

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

// -- pure detector primitives --------------------------------------------------

BoundCheckResult bounded_check(const std::vector<double>& column, double frob_norm,
                               double slack) {
  BoundCheckResult out;
  out.bound = frob_norm * slack;
  for (std::size_t i = 0; i < column.size(); ++i) {
    const double mag = std::fabs(column[i]);
    // `!(mag <= bound)` rather than `mag > bound` so NaN fails the check.
    if (!(mag <= out.bound)) {
      out.ok = false;
      out.bad_index = static_cast<int>(i);
      out.value = column[i];
      return out;
    }
  }
  return out;
}

bool monotonicity_violated(double previous, double current) {
  return !(current <= previous * (1.0 + 1e-10));
}

std::size_t sanitize(std::vector<double>& v) {
  std::size_t n = 0;
  for (double& x : v) {
    if (!std::isfinite(x)) {
      x = 0.0;
      ++n;
    }
  }
  return n;
}

// -- state serialization --------------------------------------------------------

std::vector<std::uint8_t> serialize_static(const StaticState& s) {
  checkpoint::ByteWriter w;
  w.i64(s.n_global);
  w.u32(static_cast<std::uint32_t>(s.n_ranks));
  w.i64(s.owned.begin);
  w.i64(s.owned.end);
  w.f64(s.a_frob);
  w.f64(s.b_norm);
  w.i64(s.a_local.n_rows);
  w.i64(s.a_local.n_cols);
  w.u64(s.a_local.row_offsets.size());
  for (index_t v : s.a_local.row_offsets) w.i64(v);
  w.u64(s.a_local.col_indices.size());
  for (index_t v : s.a_local.col_indices) w.i64(v);
  w.doubles(s.a_local.values);
  w.doubles(s.b_local.values);
  return w.take();
}

StaticState deserialize_static(const std::vector<std::uint8_t>& payload) {
  checkpoint::ByteReader r(payload);
  StaticState s;
  s.n_global = r.i64();
  s.n_ranks = static_cast<int>(r.u32());
  s.owned.begin = r.i64();
  s.owned.end = r.i64();
  s.a_frob = r.f64();
  s.b_norm = r.f64();
  s.a_local.n_rows = r.i64();
  s.a_local.n_cols = r.i64();
  s.a_local.row_offsets.resize(r.u64());
  for (auto& v : s.a_local.row_offsets) v = r.i64();
  s.a_local.col_indices.resize(r.u64());
  for (auto& v : s.a_local.col_indices) v = r.i64();
  s.a_local.values = r.doubles();
  s.b_local.values = r.doubles();
  s.b_local.global_offset = s.owned.begin;
  return s;
}

std::vector<std::uint8_t> serialize_dynamic(const DynamicState& d, bool with_basis) {
  checkpoint::ByteWriter w;
  w.u8(with_basis ? 1 : 0);
  w.u64(d.k);
  w.f64(d.r0_norm);
  w.u64(d.injection_clock);
  w.u64(d.committed_clock);
  w.doubles(d.x);
  if (with_basis) {
    w.u64(d.v.size());
    for (const auto& col : d.v) w.doubles(col);
    w.u64(d.z.size());
    for (const auto& col : d.z) w.doubles(col);
    w.u64(d.r_cols.size());
    for (const auto& col : d.r_cols) w.doubles(col);
    w.doubles(d.gc);
    w.doubles(d.gs);
    w.doubles(d.g);
  }
  return w.take();
}

DynamicState deserialize_dynamic(const std::vector<std::uint8_t>& payload) {
  checkpoint::ByteReader r(payload);
  DynamicState d;
  const bool with_basis = r.u8() != 0;
  d.k = r.u64();
  d.r0_norm = r.f64();
  d.injection_clock = r.u64();
  d.committed_clock = r.u64();
  d.x = r.doubles();
  if (with_basis) {
    d.v.resize(r.u64());
    for (auto& col : d.v) col = r.doubles();
    d.z.resize(r.u64());
    for (auto& col : d.z) col = r.doubles();
    d.r_cols.resize(r.u64());
    for (auto& col : d.r_cols) col = r.doubles();
    d.gc = r.doubles();
    d.gs = r.doubles();
    d.g = r.doubles();
  }
  return d;
}

// -- builders -------------------------------------------------------------------

StaticBuilder make_poisson_builder(const linalg::Poisson3DSpec& spec) {
  return [spec](runtime::RankCtx& ctx, const runtime::Comm& comm) {
    StaticState s;
    s.n_global = spec.n();
    s.n_ranks = comm.size;
    s.owned = linalg::partition_rows(s.n_global, comm.size)[static_cast<std::size_t>(ctx.rank())];
    s.a_local = linalg::build_poisson3d_rows(spec, s.owned);
    s.b_local.values.assign(static_cast<std::size_t>(s.owned.size()), 1.0);
    s.b_local.global_offset = s.owned.begin;
    double frob_sq = 0;
    for (double v : s.a_local.values) frob_sq += v * v;
    s.a_frob = std::sqrt(ctx.allreduce_sum(comm, frob_sq));
    s.b_norm = std::sqrt(ctx.allreduce_sum(comm, linalg::dot(s.b_local, s.b_local)));
    return s;
  };
}

StaticBuilder make_csr_builder(std::shared_ptr<const linalg::CsrMatrix> a) {
  return [a](runtime::RankCtx& ctx, const runtime::Comm& comm) {
    StaticState s;
    s.n_global = a->n_rows;
    s.n_ranks = comm.size;
    s.owned = linalg::partition_rows(s.n_global, comm.size)[static_cast<std::size_t>(ctx.rank())];
    // Slice the owned rows out of the shared assembly; columns stay global.
    s.a_local.n_rows = s.owned.size();
    s.a_local.n_cols = a->n_cols;
    s.a_local.row_offsets.push_back(0);
    for (index_t row = s.owned.begin; row < s.owned.end; ++row) {
      for (index_t p = a->row_offsets[static_cast<std::size_t>(row)];
           p < a->row_offsets[static_cast<std::size_t>(row) + 1]; ++p) {
        s.a_local.col_indices.push_back(a->col_indices[static_cast<std::size_t>(p)]);
        s.a_local.values.push_back(a->values[static_cast<std::size_t>(p)]);
      }
      s.a_local.row_offsets.push_back(s.a_local.nnz());
    }
    s.b_local.values.assign(static_cast<std::size_t>(s.owned.size()), 1.0);
    s.b_local.global_offset = s.owned.begin;
    double frob_sq = 0;
    for (double v : s.a_local.values) frob_sq += v * v;
    s.a_frob = std::sqrt(ctx.allreduce_sum(comm, frob_sq));
    s.b_norm = std::sqrt(ctx.allreduce_sum(comm, linalg::dot(s.b_local, s.b_local)));
    return s;
  };
}

// -- the engine -----------------------------------------------------------------

namespace {

/// Applies stored Givens rotations to a fresh projection column, appends the
/// new rotation, and updates the rotated right-hand side. `col` arrives with
/// m+2 entries (m = columns so far) and leaves as the new R column (m+1
/// entries) in `r_cols`.
void apply_givens(std::vector<std::vector<double>>& r_cols, std::vector<double>& gc,
                  std::vector<double>& gs, std::vector<double>& g, std::vector<double> col) {
  const std::size_t m = r_cols.size();
  for (std::size_t l = 0; l < m; ++l) {
    const double a = col[l];
    const double b = col[l + 1];
    col[l] = gc[l] * a + gs[l] * b;
    col[l + 1] = -gs[l] * a + gc[l] * b;
  }
  const double a = col[m];
  const double b = col[m + 1];
  const double r = std::hypot(a, b);
  double c = 1.0, s = 0.0;
  if (r > 0.0) {
    c = a / r;
    s = b / r;
  }
  gc.push_back(c);
  gs.push_back(s);
  col[m] = r;
  col.resize(m + 1);
  r_cols.push_back(std::move(col));
  g.push_back(0.0);
  const double ga = g[m];
  const double gb = g[m + 1];
  g[m] = c * ga + s * gb;
  g[m + 1] = -s * ga + c * gb;
}

/// Back-substitution over the first m rotated columns.
std::vector<double> solve_upper(const std::vector<std::vector<double>>& r_cols,
                                const std::vector<double>& g, std::size_t m) {
  std::vector<double> y(m, 0.0);
  for (std::size_t jj = m; jj-- > 0;) {
    double acc = g[jj];
    for (std::size_t l = jj + 1; l < m; ++l) acc -= r_cols[l][jj] * y[l];
    y[jj] = acc / r_cols[jj][jj];
  }
  return y;
}

struct InnerAttempt {
  bool detected = false;
  int steps = 0;    ///< Arnoldi spmvs performed in this attempt
  int reused = 0;   ///< steps whose work the returned z is built from
  std::vector<double> z;
  // detection details
  int site = 0;  ///< 0 = projection bound, 1 = residual monotonicity
  int detect_step = 0;
  double value = 0;
  double bound = 0;
};

class Engine {
 public:
  Engine(runtime::RankCtx& ctx, const StaticBuilder& builder, const SolverConfig& cfg,
         FaultHooks* hooks, metrics::Metrics& m, metrics::EventLog& log)
      : ctx_(ctx), builder_(builder), cfg_(cfg), hooks_(hooks), m_(m), log_(log) {}

  SolveResult run() {
    const double t_begin = now_seconds();
    comm_ = ctx_.comm();
    try {
      bool booted = false;
      for (;;) {
        try {
          if (!booted) {
            if (ctx_.adopted())
              bootstrap_adopted();
            else
              bootstrap_fresh();
            booted = true;
          }
          outer_loop();
          break;
        } catch (const runtime::CommError&) {
          recover_failure();
          booted = true;
        }
      }
    } catch (const runtime::InsufficientSpares&) {
      result_.status = SolveStatus::InsufficientSpares;
      result_.converged = false;
    } catch (const checkpoint::HolderDead&) {
      result_.status = SolveStatus::HolderDead;
      result_.converged = false;
    } catch (const checkpoint::CorruptCheckpoint&) {
      result_.status = SolveStatus::Error;
      result_.converged = false;
    }
    result_.outers_completed = dyn_.k;
    result_.x_local = dyn_.x;
    if (reporter()) m_.t_total.add(now_seconds() - t_begin);
    return result_;
  }

 private:
  bool reporter() const { return ctx_.rank() == 0; }

  bool window_reporter(const std::vector<runtime::RankId>& failed) const {
    for (int r = 0; r < comm_.size; ++r) {
      bool is_failed = false;
      for (runtime::RankId f : failed) is_failed |= (f == r);
      if (!is_failed) return ctx_.rank() == r;
    }
    return false;
  }

  DenseVector local_vec(std::vector<double> vals) const {
    DenseVector v;
    v.values = std::move(vals);
    v.global_offset = S_.owned.begin;
    return v;
  }

  // counted distributed kernels -------------------------------------------

  DenseVector reliable_spmv(const DenseVector& x) {
    DenseVector y = linalg::dist_spmv(ctx_, comm_, S_.a_local, x);
    if (reporter()) m_.spmv_count.fetch_add(1);
    return y;
  }

  double ddot(const DenseVector& a, const DenseVector& b) {
    return linalg::dist_dot(ctx_, comm_, a, b);
  }

  double dnorm(const DenseVector& a) { return linalg::dist_norm2(ctx_, comm_, a); }

  // bootstrap ---------------------------------------------------------------

  void bootstrap_fresh() {
    S_ = builder_(ctx_, comm_);
    dyn_ = DynamicState{};
    dyn_.x.assign(static_cast<std::size_t>(S_.owned.size()), 0.0);
    init_cycle_from_b();
    if (cfg_.checkpoints_enabled) {
      const double t0 = now_seconds();
      store_state(checkpoint::Kind::Static, 0, serialize_static(S_));
      if (reporter()) m_.t_checkpoint.add(now_seconds() - t0);
    }
  }

  void bootstrap_adopted() {
    comm_ = ctx_.comm();
    do_restore(ctx_.repair().failed);
  }

  /// With x = 0 the initial residual is b itself: no matrix work needed.
  void init_cycle_from_b() {
    dyn_.r0_norm = S_.b_norm;
    dyn_.v.clear();
    dyn_.z.clear();
    dyn_.r_cols.clear();
    dyn_.gc.clear();
    dyn_.gs.clear();
    dyn_.g.clear();
    if (S_.b_norm == 0.0) return;  // trivial system; loop converges immediately
    std::vector<double> v0 = S_.b_local.values;
    for (double& x : v0) x /= S_.b_norm;
    dyn_.v.push_back(std::move(v0));
    dyn_.g.push_back(S_.b_norm);
  }

  /// Rebuilds the outer cycle from the current iterate after a basis-less
  /// restore: one reliable spmv for the new residual.
  void restart_cycle_from_x() {
    DenseVector ax = reliable_spmv(local_vec(dyn_.x));
    DenseVector r = S_.b_local;
    linalg::axpy(-1.0, ax, r);
    const double beta = dnorm(r);
    dyn_.v.clear();
    dyn_.z.clear();
    dyn_.r_cols.clear();
    dyn_.gc.clear();
    dyn_.gs.clear();
    dyn_.g.clear();
    dyn_.r0_norm = S_.b_norm;
    if (beta == 0.0) return;
    for (double& x : r.values) x /= beta;
    dyn_.v.push_back(std::move(r.values));
    dyn_.g.push_back(beta);
  }

  // checkpointing ------------------------------------------------------------

  void store_state(checkpoint::Kind kind, std::uint32_t epoch,
                   const std::vector<std::uint8_t>& payload) {
    const std::size_t bytes = checkpoint::store_blob(ctx_, comm_, store_, kind, epoch, payload);
    m_.bytes_checkpointed.fetch_add(bytes);
    if (reporter()) m_.checkpoints_taken.fetch_add(1);
    const auto& frame =
        kind == checkpoint::Kind::Static ? store_.own_static : store_.own_dynamic;
    metrics::StoreEvent ev;
    ev.kind = static_cast<std::uint8_t>(kind);
    ev.epoch = epoch;
    ev.owner = ctx_.rank();
    ev.frame_digest = digest::fnv1a64(frame->data(), frame->size());
    ev.frame_bytes = frame->size();
    if (log_.keep_frames) ev.frame = *frame;
    log_.add(std::move(ev));
  }

  // failure recovery -----------------------------------------------------------

  void recover_failure() {
    const double t0 = now_seconds();
    for (;;) {
      const runtime::Comm c = ctx_.comm();
      try {
        ctx_.revoke(c);
        ctx_.agree(c, true);
        const runtime::RepairInfo rep = ctx_.shrink_and_substitute(c);
        comm_ = rep.comm;
        if (window_reporter(rep.failed)) {
          m_.failures_observed.fetch_add(rep.failed.size());
          m_.t_pf_exclude.add(now_seconds() - t0);
        }
        do_restore(rep.failed);
        return;
      } catch (const runtime::CommError&) {
        continue;
      }
    }
  }

  /// Shared by surviving ranks and freshly adopted spares; both sides run
  /// the identical collective sequence from here.
  void do_restore(const std::vector<runtime::RankId>& failed) {
    const double t0 = now_seconds();
    const bool wrep = window_reporter(failed);

    // Clock rendezvous: spares need the pre-failure high-water marks to keep
    // replay accounting consistent, and survivors agree on lost progress.
    const std::vector<double> mine = {
        static_cast<double>(committed_clock_ + inflight_steps_),
        static_cast<double>(high_water_cc_),
        static_cast<double>(dyn_.k),
        static_cast<double>(inj_clock_),
        static_cast<double>(high_water_inj_),
    };
    const std::vector<double> all = ctx_.allgather(comm_, mine);
    double max_cc = 0, max_k = 0, max_inj = 0;
    for (std::size_t r = 0; r + 4 < all.size(); r += 5) {
      max_cc = std::max({max_cc, all[r], all[r + 1]});
      max_k = std::max(max_k, all[r + 2]);
      max_inj = std::max({max_inj, all[r + 3], all[r + 4]});
    }
    high_water_cc_ = static_cast<std::uint64_t>(max_cc);
    high_water_inj_ = static_cast<std::uint64_t>(max_inj);

    const checkpoint::RestoreOutcome ro =
        checkpoint::fetch_for_restore(ctx_, comm_, failed, store_);
    if (ro.fetched_static) S_ = deserialize_static(ro.static_payload);

    if (ro.have_dynamic) {
      dyn_ = deserialize_dynamic(ro.dynamic_payload);
      inj_clock_ = dyn_.injection_clock;
      committed_clock_ = dyn_.committed_clock;
      // A basis-less payload leaves the cycle empty; the outer loop rebuilds
      // it from x with one extra spmv.
    } else {
      dyn_ = DynamicState{};
      dyn_.x.assign(static_cast<std::size_t>(S_.owned.size()), 0.0);
      inj_clock_ = 0;
      committed_clock_ = 0;
      init_cycle_from_b();
    }
    inflight_steps_ = 0;
    snapshot_ = checkpoint::SnapshotSlot{};  // any live token died with the old state

    if (wrep) {
      m_.outer_restarts.fetch_add(1);
      m_.pf_lost_steps.fetch_add(high_water_cc_ - committed_clock_);
      m_.recomputed_outers.fetch_add(static_cast<std::uint64_t>(max_k) - dyn_.k);
      m_.t_pf_recover.add(now_seconds() - t0);
    }

    metrics::RestoreEvent ev;
    ev.rank = ctx_.rank();
    ev.epoch = ro.epoch;
    ev.had_dynamic = ro.have_dynamic;
    if (ro.have_dynamic) {
      ev.dynamic_digest = digest::fnv1a64(store_.own_dynamic->data(), store_.own_dynamic->size());
      if (log_.keep_frames) ev.dynamic_frame = *store_.own_dynamic;
    }
    ev.fetched_static = ro.fetched_static;
    if (ro.fetched_static)
      ev.static_digest = digest::fnv1a64(store_.own_static->data(), store_.own_static->size());
    log_.add(std::move(ev));
  }

  // inner solve ----------------------------------------------------------------

  /// One attempt at the inner solve A z = v_k, fixed-length GMRES built in
  /// unreliable mode. Returns either the full solution or a detection
  /// verdict with the clean-prefix solution.
  InnerAttempt gmres_inner(int outer_k) {
    InnerAttempt att;
    const DenseVector v_in = local_vec(dyn_.v.back());

    std::vector<DenseVector> basis;
    std::vector<std::vector<double>> r_cols;
    std::vector<double> gc, gs, g;

    const double beta = dnorm(v_in);
    if (beta == 0.0) {
      att.z.assign(v_in.values.size(), 0.0);
      return att;
    }
    {
      DenseVector v0 = v_in;
      linalg::scale(1.0 / beta, v0);
      basis.push_back(std::move(v0));
    }
    g.push_back(beta);

    auto prefix_solution = [&](std::size_t m) {
      std::vector<double> z(v_in.values.size(), 0.0);
      if (m == 0) return z;
      const std::vector<double> y = solve_upper(r_cols, g, m);
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < z.size(); ++i) z[i] += y[j] * basis[j].values[i];
      return z;
    };

    const bool mono = cfg_.detector == Detector::Monotonicity;
    const bool bounded = cfg_.detector == Detector::Bounded;
    double mono_prev = 0;
    int mono_good_steps = 0;
    std::vector<double> mono_good_z(v_in.values.size(), 0.0);

    int steps = 0;
    for (int i = 0; i < cfg_.inner_iters; ++i) {
      if (mono && i % cfg_.mono_interval == 0) {
        // Explicit residual of the current inner iterate, in reliable mode:
        // one full spmv per check, the price of this detector.
        const double t0 = now_seconds();
        const std::vector<double> zi = prefix_solution(static_cast<std::size_t>(i));
        DenseVector ri = reliable_spmv(local_vec(zi));
        if (reporter()) m_.detector_spmvs.fetch_add(1);
        linalg::scale(-1.0, ri);
        linalg::axpy(1.0, v_in, ri);
        const double resid = dnorm(ri);
        if (reporter()) {
          m_.detector_checks.fetch_add(1);
          m_.t_sdc_detect.add(now_seconds() - t0);
        }
        if (i > 0 && monotonicity_violated(mono_prev, resid)) {
          att.detected = true;
          att.site = 1;
          att.detect_step = i;
          att.steps = steps;
          att.value = resid;
          att.bound = mono_prev;
          att.reused = mono_good_steps;
          att.z = mono_good_z;
          return att;
        }
        mono_prev = resid;
        mono_good_steps = i;
        mono_good_z = zi;
      }

      // Arnoldi step, unreliable mode: the hook may corrupt this rank's
      // block of the product or schedule this rank's death.
      DenseVector w = linalg::dist_spmv(ctx_, comm_, S_.a_local, basis[static_cast<std::size_t>(i)]);
      ++inj_clock_;
      if (hooks_) {
        HookInfo info;
        info.rank = ctx_.rank();
        info.outer_k = outer_k;
        info.inner_step = i;
        info.injection_clock = inj_clock_;
        info.committed_prospect = committed_clock_ + static_cast<std::uint64_t>(i) + 1;
        hooks_->on_inner_spmv(ctx_, info, w.values);
      }
      if (reporter()) m_.spmv_count.fetch_add(1);
      steps = i + 1;
      att.steps = steps;
      inflight_steps_ = static_cast<std::uint64_t>(steps);

      std::vector<double> col;
      col.reserve(static_cast<std::size_t>(i) + 2);
      for (int j = 0; j <= i; ++j) {
        const double h = ddot(w, basis[static_cast<std::size_t>(j)]);
        col.push_back(h);
        linalg::axpy(-h, basis[static_cast<std::size_t>(j)], w);
      }
      const double hsub = dnorm(w);
      col.push_back(hsub);

      if (bounded) {
        const double t0 = now_seconds();
        const BoundCheckResult bc = bounded_check(col, S_.a_frob, cfg_.bound_slack);
        if (reporter()) {
          m_.detector_checks.fetch_add(1);
          m_.t_sdc_detect.add(now_seconds() - t0);
        }
        if (!bc.ok) {
          att.detected = true;
          att.site = 0;
          att.detect_step = i;
          att.value = bc.value;
          att.bound = bc.bound;
          att.reused = i;           // everything before the corrupted column
          att.z = prefix_solution(static_cast<std::size_t>(i));
          return att;
        }
      }

      apply_givens(r_cols, gc, gs, g, std::move(col));
      if (hsub <= 1e-14 * S_.a_frob) break;  // exact solution in this subspace
      linalg::scale(1.0 / hsub, w);
      basis.push_back(std::move(w));
    }

    att.reused = steps;
    att.z = prefix_solution(static_cast<std::size_t>(steps));
    return att;
  }

  // outer loop -----------------------------------------------------------------

  void outer_loop() {
    for (;;) {
      if (dyn_.v.empty()) restart_cycle_from_x();

      // Implicit residual estimate; cheap, so checked every pass. Explicit
      // verification guards the actual exit.
      const double est = dyn_.g.empty() ? 0.0 : std::fabs(dyn_.g.back());
      const double denom = dyn_.r0_norm > 0 ? dyn_.r0_norm : 1.0;
      if (est / denom <= cfg_.tol) {
        const double rel = finalize_solution();
        if (rel <= cfg_.tol) {
          result_.status = SolveStatus::Converged;
          result_.converged = true;
          result_.final_rel_residual = rel;
          return;
        }
        // Estimate lied (finalize consumed the cycle); rebuild and go on.
        continue;
      }
      if (dyn_.k >= static_cast<std::uint64_t>(cfg_.outer_iters)) {
        result_.status = SolveStatus::BudgetExhausted;
        result_.converged = false;
        result_.final_rel_residual = finalize_solution();
        return;
      }

      outer_iteration();
    }
  }

  void outer_iteration() {
    const int k = static_cast<int>(dyn_.k);
    if (hooks_) {
      HookInfo info;
      info.rank = ctx_.rank();
      info.outer_k = k;
      info.injection_clock = inj_clock_;
      info.committed_prospect = committed_clock_;
      hooks_->on_outer_enter(ctx_, info);
    }

    // Soft-error attempt loop: snapshot, attempt, and on detection either
    // roll back and retry or accept the attempt's clean prefix.
    const bool use_snapshots = cfg_.detector != Detector::None;
    std::optional<checkpoint::SnapshotSlot::Token> token;
    if (use_snapshots) token = snapshot_.take(serialize_dynamic(dyn_, true));

    std::vector<double> z;
    int accepted_steps = 0;
    int restarts = 0;
    for (;;) {
      InnerAttempt att = gmres_inner(k);
      inflight_steps_ = 0;
      if (!att.detected) {
        z = std::move(att.z);
        accepted_steps = att.reused;
        break;
      }

      const bool in_replay = inj_clock_ <= high_water_inj_;
      const bool abandoning = restarts >= cfg_.max_sdc_restarts;
      const std::uint64_t lost =
          static_cast<std::uint64_t>(att.steps - (abandoning ? att.reused : 0));
      const double t0 = now_seconds();
      if (reporter()) {
        m_.sdc_detected.fetch_add(1);
        m_.sdc_lost_steps.fetch_add(lost);
        if (in_replay) m_.replay_lost_steps.fetch_add(lost);
        metrics::DetectionEvent ev;
        ev.outer_k = k;
        ev.inner_step = att.detect_step;
        ev.clock = inj_clock_;
        ev.site = att.site;
        ev.value = att.value;
        ev.bound = att.bound;
        ev.attempt_steps = static_cast<std::uint64_t>(att.steps);
        ev.abandoned = abandoning;
        ev.in_replay = in_replay;
        log_.add(std::move(ev));
      }

      if (abandoning) {
        // Accept the last attempt's clean prefix as a degraded
        // preconditioner application rather than spinning forever.
        z = std::move(att.z);
        accepted_steps = att.reused;
        if (reporter()) m_.inner_abandoned.fetch_add(1);
        break;
      }

      ++restarts;
      if (reporter()) m_.inner_restarts.fetch_add(1);
      // Roll the outer state back to the snapshot. The injection clock is
      // deliberately NOT rolled back: the retry must see fresh fault sites.
      DynamicState fresh = deserialize_dynamic(snapshot_.rollback(*token));
      fresh.injection_clock = inj_clock_;
      fresh.committed_clock = committed_clock_;
      dyn_ = std::move(fresh);
      if (reporter()) m_.t_sdc_recover.add(now_seconds() - t0);
    }

    const std::size_t cleaned = sanitize(z);
    if (cleaned) m_.sanitized_values.fetch_add(cleaned);
    // One collective, taken by every rank: a locally-zero block says nothing
    // about the global vector.
    if (dnorm(local_vec(z)) == 0.0) {
      // A fully degenerate preconditioner application stalls the cycle;
      // fall back to the identity so the outer space still grows.
      z = dyn_.v.back();
    }

    // Reliable outer commit: w = A z, orthogonalize against the outer basis,
    // extend the rotated least-squares system.
    DenseVector w = reliable_spmv(local_vec(z));
    dyn_.z.push_back(std::move(z));
    std::vector<double> col;
    col.reserve(dyn_.v.size() + 1);
    for (std::size_t j = 0; j < dyn_.v.size(); ++j) {
      const double h = ddot(w, local_vec(dyn_.v[j]));
      col.push_back(h);
      DenseVector vj = local_vec(dyn_.v[j]);
      linalg::axpy(-h, vj, w);
    }
    const double hsub = dnorm(w);
    col.push_back(hsub);
    apply_givens(dyn_.r_cols, dyn_.gc, dyn_.gs, dyn_.g, std::move(col));

    if (hsub > 1e-14 * S_.a_frob) {
      linalg::scale(1.0 / hsub, w);
      dyn_.v.push_back(std::move(w.values));
    } else {
      // Outer breakdown: the residual estimate is now (numerically) zero and
      // the convergence path will verify and exit; if verification fails the
      // cycle restarts from x.
      dyn_.v.push_back(dyn_.z.back());  // placeholder, never used for spans beyond exit
    }

    committed_clock_ += static_cast<std::uint64_t>(accepted_steps);
    dyn_.k += 1;
    dyn_.injection_clock = inj_clock_;
    dyn_.committed_clock = committed_clock_;
    if (use_snapshots) snapshot_.commit(*token);

    if (cfg_.checkpoints_enabled) {
      const double t0 = now_seconds();
      store_state(checkpoint::Kind::Dynamic, static_cast<std::uint32_t>(dyn_.k),
                  serialize_dynamic(dyn_, cfg_.checkpoint_basis));
      if (reporter()) {
        const double dt = now_seconds() - t0;
        m_.t_checkpoint.add(dt);
        m_.t_checkpoint_dynamic.add(dt);
      }
    }

    // Track recomputation: while the committed clock is below its pre-failure
    // high water mark we are redoing rolled-back work.
    if (committed_clock_ > high_water_cc_) {
      high_water_cc_ = committed_clock_;
      if (recompute_t0_ >= 0) {
        if (reporter()) m_.t_recompute.add(now_seconds() - recompute_t0_);
        recompute_t0_ = -1;
      }
    } else if (recompute_t0_ < 0) {
      recompute_t0_ = now_seconds();
    }
    if (inj_clock_ > high_water_inj_) high_water_inj_ = inj_clock_;
  }

  /// Forms the current solution, measures the explicit relative residual
  /// (one reliable spmv), and leaves the iterate in dyn_.x.
  double finalize_solution() {
    const std::size_t m = dyn_.z.size();
    std::vector<double> x = dyn_.x;
    if (m > 0) {
      const std::vector<double> y = solve_upper(dyn_.r_cols, dyn_.g, m);
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += y[j] * dyn_.z[j][i];
    }
    DenseVector ax = reliable_spmv(local_vec(x));
    DenseVector r = S_.b_local;
    linalg::axpy(-1.0, ax, r);
    const double abs_res = dnorm(r);
    const double rel = dyn_.r0_norm > 0 ? abs_res / dyn_.r0_norm : abs_res;
    dyn_.x = std::move(x);
    // The cycle was consumed into x; a continued solve restarts from here.
    dyn_.v.clear();
    dyn_.z.clear();
    dyn_.r_cols.clear();
    dyn_.gc.clear();
    dyn_.gs.clear();
    dyn_.g.clear();
    result_.final_rel_residual = rel;
    return rel;
  }

  runtime::RankCtx& ctx_;
  const StaticBuilder& builder_;
  SolverConfig cfg_;
  FaultHooks* hooks_;
  metrics::Metrics& m_;
  metrics::EventLog& log_;

  runtime::Comm comm_;
  checkpoint::NeighborStore store_;
  checkpoint::SnapshotSlot snapshot_;
  StaticState S_;
  DynamicState dyn_;

  std::uint64_t inj_clock_ = 0;
  std::uint64_t committed_clock_ = 0;
  std::uint64_t high_water_cc_ = 0;
  std::uint64_t high_water_inj_ = 0;
  std::uint64_t inflight_steps_ = 0;
  double recompute_t0_ = -1;

  SolveResult result_;
};

}  // namespace

SolveResult ft_gmres(runtime::RankCtx& ctx, const StaticBuilder& builder,
                     const SolverConfig& cfg, FaultHooks* hooks, metrics::Metrics& m,
                     metrics::EventLog& log) {
  Engine engine(ctx, builder, cfg, hooks, m, log);
  return engine.run();
}

}  // namespace resilab::solver
