/// Tests for deterministic fault injection: the corruption primitives and
/// plan generators against independently computed oracles, then in-world
/// behavior of the scripted hooks: injection cadence, detection pairing,
/// one-shot process failures, and the committed-step trigger alignment that
/// makes composed-fault runs comparable with single-fault runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "doctest.h"
#include "resilab/faultlab.hpp"
#include "resilab/linalg.hpp"
#include "resilab/metrics.hpp"
#include "resilab/runtime.hpp"
#include "resilab/solver.hpp"
#include "support.hpp"

using namespace resilab;
using faultlab::CorruptionModel;
using faultlab::FailureEvent;
using faultlab::FailureTrigger;
using faultlab::FaultLab;
using faultlab::FaultPlan;

TEST_CASE("flip_bit matches the IEEE-754 bit layout") {
  CHECK(faultlab::flip_bit(1.0, 52) == 0.5);    // lowest exponent bit
  CHECK(faultlab::flip_bit(1.0, 51) == 1.5);    // highest mantissa bit
  CHECK(faultlab::flip_bit(1.0, 63) == -1.0);   // sign
  CHECK(faultlab::flip_bit(1.0, 62) == std::numeric_limits<double>::infinity());
  CHECK(faultlab::flip_bit(2.0, 52) == 4.0);
  CHECK(faultlab::flip_bit(6.0, 0) == 6.000000000000001);
  CHECK(faultlab::flip_bit(-1.5, 63) == 1.5);

  const double neg_zero = faultlab::flip_bit(0.0, 63);
  CHECK(neg_zero == 0.0);
  CHECK(std::signbit(neg_zero));

  // Involution: flipping twice restores the original bit pattern.
  for (double v : {1.0, -3.25, 1e-300, 7.5e200})
    for (int bit : {0, 17, 51, 52, 63}) CHECK(faultlab::flip_bit(faultlab::flip_bit(v, bit), bit) == v);

  CHECK_THROWS_AS(faultlab::flip_bit(1.0, -1), std::invalid_argument);
  CHECK_THROWS_AS(faultlab::flip_bit(1.0, 64), std::invalid_argument);
}

TEST_CASE("uniforms_from_seed is a pinned deterministic stream in (0, 1]") {
  const auto u = faultlab::uniforms_from_seed(7, 3);
  REQUIRE(u.size() == 3);
  // Values recomputed independently from the generator definition.
  CHECK(u[0] == 0x1.28abaf570f248p-4);
  CHECK(u[1] == 0x1.86c3c878846a3p-1);
  CHECK(u[2] == 0x1.3dc851fbe3d25p-1);

  CHECK(faultlab::uniforms_from_seed(7, 3) == u);      // reproducible
  CHECK(faultlab::uniforms_from_seed(8, 3) != u);      // seed-sensitive
  const auto many = faultlab::uniforms_from_seed(123, 1000);
  for (double v : many) CHECK((v > 0.0 && v <= 1.0));
}

TEST_CASE("gaps_from_uniforms rounds exponential gaps up to whole steps") {
  // ceil(-75 ln 0.5) = 52 and ceil(-75 ln 0.25) = 104.
  CHECK(faultlab::gaps_from_uniforms({0.5, 0.25}, 75.0) ==
        std::vector<std::uint64_t>{52, 104});
  // u = 1 gives a zero-length gap, clamped to the minimum of one step.
  CHECK(faultlab::gaps_from_uniforms({1.0}, 75.0) == std::vector<std::uint64_t>{1});

  CHECK_THROWS_AS(faultlab::gaps_from_uniforms({0.0}, 75.0), std::invalid_argument);
  CHECK_THROWS_AS(faultlab::gaps_from_uniforms({1.5}, 75.0), std::invalid_argument);
  CHECK_THROWS_AS(faultlab::gaps_from_uniforms({0.5}, 0.0), std::invalid_argument);
}

TEST_CASE("plan_failures scripts distinct victims at cumulative trigger steps") {
  const std::vector<runtime::RankId> candidates = {0, 1, 2, 3};
  const auto plan = faultlab::plan_failures(75.0, 2, candidates, 7);
  REQUIRE(plan.size() == 2);

  // Triggers are the cumulative sums of the pinned gaps for seed 7
  // (197, 21), and the victim draw removes each pick from the pool.
  CHECK(plan[0].trigger.value == 197);
  CHECK(plan[1].trigger.value == 218);
  CHECK(plan[0].rank == 1);
  CHECK(plan[1].rank == 0);
  for (const auto& ev : plan) {
    CHECK(ev.trigger.space == FailureTrigger::Space::CommittedStep);
    CHECK(std::count(candidates.begin(), candidates.end(), ev.rank) == 1);
  }
  CHECK(plan[0].rank != plan[1].rank);

  // Caller ordering of the candidate pool does not change the plan.
  const auto shuffled = faultlab::plan_failures(75.0, 2, {3, 1, 0, 2}, 7);
  REQUIRE(shuffled.size() == 2);
  CHECK(shuffled[0].rank == plan[0].rank);
  CHECK(shuffled[1].rank == plan[1].rank);
  CHECK(shuffled[0].trigger.value == plan[0].trigger.value);

  CHECK(faultlab::plan_failures(75.0, 0, candidates, 7).empty());
  CHECK_THROWS_AS(faultlab::plan_failures(75.0, 5, candidates, 7), std::invalid_argument);
}

TEST_CASE("arming a fault lab twice is rejected") {
  runtime::World world(runtime::WorldOptions{1, 0, 1.0});
  metrics::Metrics m;
  metrics::EventLog log;
  FaultPlan plan;
  plan.seed = 5;
  FaultLab lab(plan, world, m, log);
  CHECK(lab.plan().seed == 5);
  solver::FaultHooks* hooks = lab.arm();
  CHECK(hooks == &lab);
  CHECK_THROWS_AS(lab.arm(), faultlab::DoubleArm);
}

namespace {

struct LabRun {
  std::vector<solver::SolveResult> results;
  metrics::MetricsSnapshot ms;
  runtime::WorldResult world;
};

LabRun run_with_plan(int ranks, int spares, const linalg::Poisson3DSpec& spec,
                     const solver::SolverConfig& cfg, const FaultPlan& plan,
                     metrics::EventLog* log = nullptr) {
  runtime::World world(runtime::WorldOptions{ranks, spares, 20.0});
  metrics::Metrics m;
  metrics::EventLog own_log;
  metrics::EventLog& lg = log ? *log : own_log;
  FaultLab lab(plan, world, m, lg);
  solver::FaultHooks* hooks = lab.arm();
  auto builder = solver::make_poisson_builder(spec);

  LabRun out;
  out.results.resize(static_cast<std::size_t>(ranks));
  out.world = world.run([&](runtime::RankCtx& ctx) -> std::int64_t {
    solver::SolveResult r = solver::ft_gmres(ctx, builder, cfg, hooks, m, lg);
    const bool ok = r.converged;
    out.results[static_cast<std::size_t>(ctx.rank())] = std::move(r);
    return ok ? 1 : 0;
  });
  out.ms = metrics::snapshot(m);
  return out;
}

bool honest_status(const solver::SolveResult& r) {
  return r.status == solver::SolveStatus::Converged ||
         r.status == solver::SolveStatus::BudgetExhausted;
}

}  // namespace

TEST_CASE("injections land exactly on the clock cadence") {
  const linalg::Poisson3DSpec spec{6, 5, 4};
  solver::SolverConfig cfg;  // no detector: every cadence hit survives
  FaultPlan plan;
  plan.seed = 11;
  plan.sdc_interval = 10;
  plan.model.kind = CorruptionModel::Kind::BitFlip;  // random bit per injection

  metrics::EventLog log;
  auto run = run_with_plan(2, 0, spec, cfg, plan, &log);
  REQUIRE(!run.world.aborted);
  for (const auto& r : run.results) CHECK(honest_status(r));

  // Without a detector no attempt is retried, so the Arnoldi spmv total is
  // exactly 25 per outer and the cadence divides it.
  const std::uint64_t k = run.results[0].outers_completed;
  CHECK(run.ms.sdc_injected == 25 * k / 10);
  CHECK(run.ms.sdc_detected == 0);
  REQUIRE(log.injections.size() == run.ms.sdc_injected);
  for (std::size_t i = 0; i < log.injections.size(); ++i) {
    const auto& ev = log.injections[i];
    CHECK(ev.ordinal == i);
    CHECK(ev.clock == (ev.ordinal + 1) * 10);  // clock multiples of the interval
    CHECK(ev.rank >= 0);
    CHECK(ev.rank < 2);
  }
}

TEST_CASE("sdc_max_ordinals caps how many cadence hits fire") {
  const linalg::Poisson3DSpec spec{6, 5, 4};
  solver::SolverConfig cfg;
  FaultPlan plan;
  plan.seed = 11;
  plan.sdc_interval = 10;
  plan.sdc_max_ordinals = 2;
  metrics::EventLog log;
  auto run = run_with_plan(2, 0, spec, cfg, plan, &log);
  REQUIRE(!run.world.aborted);
  CHECK(run.ms.sdc_injected == 2);
  REQUIRE(log.injections.size() == 2);
  CHECK(log.injections[0].clock == 10);
  CHECK(log.injections[1].clock == 20);
}

TEST_CASE("the bound detector pairs every scale injection immediately") {
  const linalg::Poisson3DSpec spec{6, 5, 4};
  solver::SolverConfig cfg;
  cfg.detector = solver::Detector::Bounded;
  FaultPlan plan;
  plan.seed = 3;
  plan.sdc_interval = 20;
  plan.model.kind = CorruptionModel::Kind::Scale;
  plan.model.factor = 1e6;

  metrics::EventLog log;
  auto run = run_with_plan(2, 0, spec, cfg, plan, &log);
  REQUIRE(!run.world.aborted);
  for (const auto& r : run.results) CHECK(honest_status(r));

  CHECK(run.ms.sdc_injected > 0);
  CHECK(run.ms.sdc_detected == run.ms.sdc_injected);
  REQUIRE(log.detections.size() == log.injections.size());

  // The corrupted column is checked in the same Arnoldi step it was
  // produced, so each detection carries its injection's clock value.
  std::vector<std::uint64_t> inj_clocks, det_clocks;
  for (const auto& e : log.injections) inj_clocks.push_back(e.clock);
  for (const auto& d : log.detections) {
    det_clocks.push_back(d.clock);
    CHECK(d.site == 0);
    CHECK(!d.in_replay);  // no process failure in this run
  }
  std::sort(inj_clocks.begin(), inj_clocks.end());
  std::sort(det_clocks.begin(), det_clocks.end());
  CHECK(det_clocks == inj_clocks);
}

TEST_CASE("an outer-index failure event fires once and recovery completes") {
  const linalg::Poisson3DSpec spec{20, 20, 20};
  solver::SolverConfig cfg;
  cfg.checkpoints_enabled = true;
  FaultPlan plan;
  FailureEvent ev;
  ev.rank = 2;
  ev.trigger.space = FailureTrigger::Space::OuterIndex;
  ev.trigger.value = 2;
  plan.failures = {ev};

  metrics::EventLog log;
  auto run = run_with_plan(4, 1, spec, cfg, plan, &log);
  REQUIRE(!run.world.aborted);
  CHECK(run.ms.failures_observed == 1);
  CHECK(run.ms.outer_restarts == 1);
  CHECK(run.ms.recomputed_outers == 0);
  CHECK(run.ms.pf_lost_steps == 0);  // the kill lands on an outer boundary

  REQUIRE(log.failure_marks.size() == 1);  // the re-entered outer must not re-fire
  CHECK(log.failure_marks[0].rank == 2);
  CHECK(log.failure_marks[0].outer_k == 2);

  for (const auto& r : run.results) {
    CHECK(r.status == solver::SolveStatus::Converged);
    CHECK(r.final_rel_residual <= cfg.tol);
  }
}

TEST_CASE("committed-step triggers fire at one logical position across fault mixes") {
  const linalg::Poisson3DSpec spec{20, 20, 20};
  constexpr int kRanks = 4;
  solver::SolverConfig cfg;
  cfg.checkpoints_enabled = true;

  // Baseline: no faults at all, for the work comparison.
  auto clean = run_with_plan(kRanks, 1, spec, cfg, FaultPlan{});
  REQUIRE(!clean.world.aborted);
  REQUIRE(clean.results[0].outers_completed >= 3);

  // Committed step 60 is step 9 of outer 2 when each outer commits 25.
  FaultPlan pf_only;
  FailureEvent ev;
  ev.rank = 1;
  ev.trigger.space = FailureTrigger::Space::CommittedStep;
  ev.trigger.value = 60;
  pf_only.failures = {ev};

  metrics::EventLog log_a;
  auto a = run_with_plan(kRanks, 1, spec, cfg, pf_only, &log_a);
  REQUIRE(!a.world.aborted);
  CHECK(a.ms.failures_observed == 1);
  CHECK(a.ms.outer_restarts == 1);
  CHECK(a.ms.recomputed_outers == 0);
  // Ten in-flight inner steps (0..9 of the dying attempt) roll back and are
  // re-executed after the restore; nothing else is redone.
  CHECK(a.ms.pf_lost_steps == 10);
  CHECK(a.ms.spmv_count == clean.ms.spmv_count + 10);
  REQUIRE(log_a.failure_marks.size() == 1);
  CHECK(log_a.failure_marks[0].rank == 1);
  CHECK(log_a.failure_marks[0].outer_k == 2);
  CHECK(log_a.failure_marks[0].committed_clock == 60);
  for (const auto& r : a.results) CHECK(r.status == solver::SolveStatus::Converged);

  // Same failure script plus soft-error injection. Retries inflate the
  // injection clock, but the committed clock only counts accepted steps, so
  // the failure fires at the same logical position.
  FaultPlan multi = pf_only;
  multi.seed = 3;
  multi.sdc_interval = 20;
  multi.model.kind = CorruptionModel::Kind::Scale;
  multi.model.factor = 1e6;
  solver::SolverConfig mcfg = cfg;
  mcfg.detector = solver::Detector::Bounded;

  metrics::EventLog log_b;
  auto b = run_with_plan(kRanks, 1, spec, mcfg, multi, &log_b);
  REQUIRE(!b.world.aborted);
  CHECK(b.ms.failures_observed == 1);
  CHECK(b.ms.sdc_injected > 0);
  REQUIRE(log_b.failure_marks.size() == 1);
  CHECK(log_b.failure_marks[0].rank == log_a.failure_marks[0].rank);
  CHECK(log_b.failure_marks[0].committed_clock == log_a.failure_marks[0].committed_clock);
  for (const auto& r : b.results) CHECK(honest_status(r));
}
