#include "resilab/faultlab.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <stdexcept>

#include "resilab/digest.hpp"

namespace resilab::faultlab {

double flip_bit(double v, int bit) {
  if (bit < 0 || bit > 63) throw std::invalid_argument("bit position must be in [0, 63]");
  return std::bit_cast<double>(std::bit_cast<std::uint64_t>(v) ^ (1ull << bit));
}

std::vector<std::uint64_t> gaps_from_uniforms(const std::vector<double>& uniforms,
                                              double mean_steps) {
  if (mean_steps <= 0) throw std::invalid_argument("mean gap must be positive");
  std::vector<std::uint64_t> gaps;
  gaps.reserve(uniforms.size());
  for (double u : uniforms) {
    if (!(u > 0.0 && u <= 1.0)) throw std::invalid_argument("uniforms must lie in (0, 1]");
    const double gap = std::ceil(-mean_steps * std::log(u));
    gaps.push_back(gap < 1.0 ? 1 : static_cast<std::uint64_t>(gap));
  }
  return gaps;
}

std::vector<double> uniforms_from_seed(std::uint64_t seed, int count) {
  std::uint64_t state = digest::mix(seed, 0xfa11ull);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    // 53 random bits to [0, 1), then shifted into (0, 1] for the log.
    const double u = static_cast<double>(digest::splitmix64(state) >> 11) * 0x1.0p-53;
    out.push_back(1.0 - u);
  }
  return out;
}

std::vector<FailureEvent> plan_failures(double mean_steps, int count,
                                        const std::vector<runtime::RankId>& candidates,
                                        std::uint64_t seed) {
  if (count < 0 || static_cast<std::size_t>(count) > candidates.size())
    throw std::invalid_argument("cannot script more failures than candidate ranks");
  const std::vector<std::uint64_t> gaps =
      gaps_from_uniforms(uniforms_from_seed(seed, count), mean_steps);

  std::uint64_t state = digest::mix(seed, 0xdeadull);
  std::vector<runtime::RankId> pool = candidates;
  std::sort(pool.begin(), pool.end());  // victim draws ignore caller ordering
  std::vector<FailureEvent> out;
  std::uint64_t at = 0;
  for (int i = 0; i < count; ++i) {
    at += gaps[static_cast<std::size_t>(i)];
    const std::size_t pick = digest::splitmix64(state) % pool.size();
    FailureEvent ev;
    ev.rank = pool[pick];
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(pick));
    ev.trigger.space = FailureTrigger::Space::CommittedStep;
    ev.trigger.value = at;
    out.push_back(ev);
  }
  return out;
}

FaultLab::FaultLab(FaultPlan plan, runtime::World& world, metrics::Metrics& m,
                   metrics::EventLog& log)
    : plan_(std::move(plan)), world_(world), m_(m), log_(log),
      fired_(plan_.failures.size(), 0) {}

solver::FaultHooks* FaultLab::arm() {
  if (armed_) throw DoubleArm();
  armed_ = true;
  return this;
}

void FaultLab::fire_failure(std::size_t event_index, const solver::HookInfo& info) {
  fired_[event_index] = 1;
  metrics::FailureMark mark;
  mark.rank = info.rank;
  mark.outer_k = info.outer_k;
  mark.committed_clock = info.committed_prospect;
  log_.add(std::move(mark));
  // The victim flags itself; the death lands at its next runtime call, so
  // no collective is ever torn mid-operation.
  world_.request_kill(info.rank);
}

void FaultLab::on_inner_spmv(runtime::RankCtx& ctx, const solver::HookInfo& info,
                             std::vector<double>& y) {
  if (plan_.sdc_interval > 0 && info.injection_clock % plan_.sdc_interval == 0) {
    const std::uint64_t ordinal = info.injection_clock / plan_.sdc_interval;
    if (ordinal <= plan_.sdc_max_ordinals) {
      // Every rank derives the same stream; only the drawn victim acts.
      std::uint64_t stream = digest::mix(plan_.seed, ordinal);
      const auto victim =
          static_cast<runtime::RankId>(digest::splitmix64(stream) % static_cast<std::uint64_t>(ctx.n_ranks()));
      if (ctx.rank() == victim && !y.empty()) {
        const std::uint64_t element = digest::splitmix64(stream) % y.size();
        const double before = y[element];
        double after;
        if (plan_.model.kind == CorruptionModel::Kind::BitFlip) {
          const int bit = plan_.model.bit >= 0
                              ? plan_.model.bit
                              : static_cast<int>(digest::splitmix64(stream) % 64);
          after = flip_bit(before, bit);
        } else {
          after = before * plan_.model.factor;
        }
        y[element] = after;
        m_.sdc_injected.fetch_add(1);
        metrics::InjectionEvent ev;
        ev.rank = info.rank;
        ev.ordinal = ordinal - 1;
        ev.clock = info.injection_clock;
        ev.outer_k = info.outer_k;
        ev.inner_step = info.inner_step;
        ev.element = element;
        ev.before = before;
        ev.after = after;
        log_.add(std::move(ev));
      }
    }
  }

  for (std::size_t e = 0; e < plan_.failures.size(); ++e) {
    const FailureEvent& ev = plan_.failures[e];
    if (!fired_[e] && ev.rank == ctx.rank() &&
        ev.trigger.space == FailureTrigger::Space::CommittedStep &&
        ev.trigger.value == info.committed_prospect) {
      fire_failure(e, info);
    }
  }
}

void FaultLab::on_outer_enter(runtime::RankCtx& ctx, const solver::HookInfo& info) {
  for (std::size_t e = 0; e < plan_.failures.size(); ++e) {
    const FailureEvent& ev = plan_.failures[e];
    if (!fired_[e] && ev.rank == ctx.rank() &&
        ev.trigger.space == FailureTrigger::Space::OuterIndex &&
        ev.trigger.value == static_cast<std::uint64_t>(info.outer_k)) {
      fire_failure(e, info);
    }
  }
}

}  // namespace resilab::faultlab
