/// \file faultlab.hpp
/// Deterministic fault injection. A FaultPlan scripts both fault classes the
/// solver defends against:
///  - silent data corruptions, applied to inner spmv results on a fixed
///    injection-clock cadence, with the victim rank, element, and (for bit
///    flips) bit position drawn from a seeded per-injection stream;
///  - process failures, fired exactly once per event when a rank reaches a
///    scripted outer index or committed inner step.
///
/// Everything is a pure function of (plan, observed clocks), so a replayed
/// execution re-injects identical faults and differently-configured runs
/// see failures at identical logical positions.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "resilab/metrics.hpp"
#include "resilab/runtime.hpp"
#include "resilab/solver.hpp"

namespace resilab::faultlab {

struct CorruptionModel {
  enum class Kind { BitFlip, Scale };
  Kind kind = Kind::BitFlip;
  int bit = -1;           ///< BitFlip: fixed bit position, or -1 to draw per injection
  double factor = 1e6;    ///< Scale: multiplier
};

/// Where a scripted process failure fires.
struct FailureTrigger {
  enum class Space {
    OuterIndex,     ///< at entry to outer iteration `value`
    CommittedStep,  ///< when the victim's committed-step prospect reaches `value`
  };
  Space space = Space::OuterIndex;
  std::uint64_t value = 0;
};

struct FailureEvent {
  runtime::RankId rank = 0;
  FailureTrigger trigger;
};

struct FaultPlan {
  std::uint64_t seed = 0;
  /// Corrupt every `sdc_interval`-th inner spmv (0 disables injection).
  std::uint64_t sdc_interval = 0;
  /// Injection ordinals above this never fire; caps re-injection on replay.
  std::uint64_t sdc_max_ordinals = ~0ull;
  CorruptionModel model;
  std::vector<FailureEvent> failures;
};

/// Flips one bit of the IEEE-754 representation.
double flip_bit(double v, int bit);

/// Exponential inter-arrival gaps, in committed inner steps, rounded up.
/// Split from plan_failures so the uniform-to-gap mapping is testable.
std::vector<std::uint64_t> gaps_from_uniforms(const std::vector<double>& uniforms,
                                              double mean_steps);

/// The uniforms plan_failures feeds to gaps_from_uniforms for `seed`.
std::vector<double> uniforms_from_seed(std::uint64_t seed, int count);

/// Scripts `count` failures with exponentially distributed committed-step
/// triggers (mean `mean_steps`), assigning distinct victim ranks drawn from
/// `candidates` without replacement.
std::vector<FailureEvent> plan_failures(double mean_steps, int count,
                                        const std::vector<runtime::RankId>& candidates,
                                        std::uint64_t seed);

/// Raised by FaultLab::arm when a lab is armed twice.
class DoubleArm : public std::logic_error {
 public:
  DoubleArm() : std::logic_error("fault plan already armed") {}
};

/// Solver fault hooks driven by a FaultPlan. One instance is shared by all
/// rank threads of a World; per-event state is written only by the event's
/// victim rank.
class FaultLab : public solver::FaultHooks {
 public:
  FaultLab(FaultPlan plan, runtime::World& world, metrics::Metrics& m,
           metrics::EventLog& log);

  /// Hands out the hook surface exactly once (pass the result to ft_gmres).
  /// Throws DoubleArm on a second call; the plan is immutable from here.
  solver::FaultHooks* arm();

  void on_inner_spmv(runtime::RankCtx& ctx, const solver::HookInfo& info,
                     std::vector<double>& y) override;
  void on_outer_enter(runtime::RankCtx& ctx, const solver::HookInfo& info) override;

  const FaultPlan& plan() const { return plan_; }

 private:
  void fire_failure(std::size_t event_index, const solver::HookInfo& info);

  FaultPlan plan_;
  runtime::World& world_;
  metrics::Metrics& m_;
  metrics::EventLog& log_;
  bool armed_ = false;
  std::vector<std::uint8_t> fired_;  ///< per failure event; victim-thread written
};

}  // namespace resilab::faultlab
