/// Tests for the simulated SPMD runtime: collective semantics, point to
/// point channels, failure observation, repair, and determinism. Programs
/// only record what they saw; every assertion runs on the main thread after
/// World::run returns, so a wedged world cannot swallow a failure message.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "doctest.h"
#include "resilab/runtime.hpp"
#include "support.hpp"

using namespace resilab::runtime;
using testsupport::run_world;

namespace {

/// Reference fold with the documented shape: combine at stride 1, 2, 4, ...
/// over the contribution array. Written out independently of the library.
double tree_sum(std::vector<double> v) {
  for (std::size_t stride = 1; stride < v.size(); stride *= 2)
    for (std::size_t i = 0; i + stride < v.size(); i += 2 * stride) v[i] += v[i + stride];
  return v[0];
}

std::vector<RankId> sorted_copy(std::vector<RankId> v) {
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace

TEST_CASE("allreduce_sum reduces in fixed binary-tree order") {
  // (1e16 + 1) + (-1e16 + 1) == 0 under the tree, while a left-to-right
  // fold gives 1; the result pins the documented reduction shape.
  const std::vector<double> vals = {1e16, 1.0, -1e16, 1.0};
  std::vector<double> got(4, -1.0);
  auto res = run_world(4, 0, [&](RankCtx& ctx) -> std::int64_t {
    got[static_cast<std::size_t>(ctx.rank())] =
        ctx.allreduce_sum(ctx.comm(), vals[static_cast<std::size_t>(ctx.rank())]);
    return 0;
  });
  CHECK(!res.aborted);
  for (int r = 0; r < 4; ++r) CHECK(got[static_cast<std::size_t>(r)] == 0.0);
  CHECK(tree_sum(vals) == 0.0);
}

TEST_CASE("allreduce_sum matches the reference tree fold bitwise") {
  for (int n : {1, 2, 3, 4, 5, 8}) {
    std::vector<double> vals;
    for (int r = 0; r < n; ++r)
      vals.push_back(std::sin(static_cast<double>(r) + 1.0) * std::pow(10.0, r % 3));
    std::vector<double> got(static_cast<std::size_t>(n), 0.0);
    auto res = run_world(n, 0, [&](RankCtx& ctx) -> std::int64_t {
      got[static_cast<std::size_t>(ctx.rank())] =
          ctx.allreduce_sum(ctx.comm(), vals[static_cast<std::size_t>(ctx.rank())]);
      return 0;
    });
    CHECK(!res.aborted);
    const double expect = tree_sum(vals);
    for (double g : got) CHECK(g == expect);  // bitwise, not approximate
  }
}

TEST_CASE("allreduce_max and allreduce_land agree with hand values") {
  const std::vector<double> vals = {3.0, -7.0, 11.0, 2.0};
  std::vector<double> maxes(4, 0.0);
  std::vector<int> land_all(4, -1), land_one_false(4, -1);
  auto res = run_world(4, 0, [&](RankCtx& ctx) -> std::int64_t {
    const auto r = static_cast<std::size_t>(ctx.rank());
    maxes[r] = ctx.allreduce_max(ctx.comm(), vals[r]);
    land_all[r] = ctx.allreduce_land(ctx.comm(), true) ? 1 : 0;
    land_one_false[r] = ctx.allreduce_land(ctx.comm(), ctx.rank() != 2) ? 1 : 0;
    return 0;
  });
  CHECK(!res.aborted);
  for (int r = 0; r < 4; ++r) {
    CHECK(maxes[static_cast<std::size_t>(r)] == 11.0);
    CHECK(land_all[static_cast<std::size_t>(r)] == 1);
    CHECK(land_one_false[static_cast<std::size_t>(r)] == 0);
  }
}

TEST_CASE("allgather concatenates ragged blocks in rank order") {
  std::vector<std::vector<double>> got(3);
  auto res = run_world(3, 0, [&](RankCtx& ctx) -> std::int64_t {
    std::vector<double> block;
    if (ctx.rank() == 0) block = {1.0, 2.0};
    if (ctx.rank() == 2) block = {5.0};
    // rank 1 contributes an empty block
    got[static_cast<std::size_t>(ctx.rank())] = ctx.allgather(ctx.comm(), block);
    return 0;
  });
  CHECK(!res.aborted);
  const std::vector<double> expect = {1.0, 2.0, 5.0};
  for (int r = 0; r < 3; ++r) CHECK(got[static_cast<std::size_t>(r)] == expect);
}

TEST_CASE("barrier releases nobody until everyone has arrived") {
  constexpr int kRounds = 4;
  std::atomic<int> arrived{0};
  std::vector<int> seen(4 * kRounds, -1);
  auto res = run_world(4, 0, [&](RankCtx& ctx) -> std::int64_t {
    for (int round = 0; round < kRounds; ++round) {
      arrived.fetch_add(1);
      ctx.barrier(ctx.comm());
      // By release time all four arrivals of this round must be in.
      seen[static_cast<std::size_t>(round * 4 + ctx.rank())] = arrived.load();
      ctx.barrier(ctx.comm());  // keep rounds from overlapping
    }
    return 0;
  });
  CHECK(!res.aborted);
  for (int round = 0; round < kRounds; ++round)
    for (int r = 0; r < 4; ++r)
      CHECK(seen[static_cast<std::size_t>(round * 4 + r)] >= 4 * (round + 1));
}

TEST_CASE("point to point channels are FIFO per source, destination, and tag") {
  std::vector<std::vector<std::uint8_t>> in_order;
  std::vector<std::uint8_t> tagged_first, tagged_second;
  auto res = run_world(2, 0, [&](RankCtx& ctx) -> std::int64_t {
    if (ctx.rank() == 0) {
      for (std::uint8_t i = 0; i < 5; ++i) ctx.send(ctx.comm(), 1, 7, {i, std::uint8_t(i + 10)});
      ctx.send(ctx.comm(), 1, 21, {111});  // different tag, sent before tag 22
      ctx.send(ctx.comm(), 1, 22, {222});
    } else {
      for (int i = 0; i < 5; ++i) in_order.push_back(ctx.recv(ctx.comm(), 0, 7));
      tagged_second = ctx.recv(ctx.comm(), 0, 22);  // out of send order across tags
      tagged_first = ctx.recv(ctx.comm(), 0, 21);
    }
    return 0;
  });
  CHECK(!res.aborted);
  REQUIRE(in_order.size() == 5);
  for (std::uint8_t i = 0; i < 5; ++i)
    CHECK(in_order[i] == std::vector<std::uint8_t>{i, std::uint8_t(i + 10)});
  CHECK(tagged_first == std::vector<std::uint8_t>{111});
  CHECK(tagged_second == std::vector<std::uint8_t>{222});
}

TEST_CASE("recv drains buffered messages from a dead sender before failing") {
  std::vector<std::vector<std::uint8_t>> drained;
  int recv_error = -1, send_error = -1;
  std::vector<RankId> recv_failed, send_failed;
  auto res = run_world(2, 0, [&](RankCtx& ctx) -> std::int64_t {
    if (ctx.rank() == 1) {
      ctx.send(ctx.comm(), 0, 5, {1, 2, 3});
      ctx.send(ctx.comm(), 0, 5, {4});
      ctx.world().request_kill(1);
      ctx.barrier(ctx.comm());  // dies at this boundary
      return -1;                // unreachable
    }
    drained.push_back(ctx.recv(ctx.comm(), 1, 5));
    drained.push_back(ctx.recv(ctx.comm(), 1, 5));
    try {
      ctx.recv(ctx.comm(), 1, 5);
    } catch (const CommError& e) {
      recv_error = static_cast<int>(e.kind());
      recv_failed = e.failed();
    }
    try {
      ctx.send(ctx.comm(), 1, 5, {9});
    } catch (const CommError& e) {
      send_error = static_cast<int>(e.kind());
      send_failed = e.failed();
    }
    return 0;
  });
  CHECK(!res.aborted);
  REQUIRE(drained.size() == 2);
  CHECK(drained[0] == std::vector<std::uint8_t>{1, 2, 3});
  CHECK(drained[1] == std::vector<std::uint8_t>{4});
  CHECK(recv_error == static_cast<int>(CommErrorKind::ProcFailed));
  CHECK(recv_failed == std::vector<RankId>{1});
  CHECK(send_error == static_cast<int>(CommErrorKind::ProcFailed));
  CHECK(send_failed == std::vector<RankId>{1});
  CHECK(res.rank_outcomes[0] == RankOutcome::Finished);
  CHECK(res.rank_outcomes[1] == RankOutcome::Dead);
}

TEST_CASE("a failed collective reports the same failed set to every survivor") {
  std::vector<std::vector<RankId>> failed_sets(4);
  std::vector<int> kinds(4, -1);
  auto res = run_world(4, 0, [&](RankCtx& ctx) -> std::int64_t {
    if (ctx.rank() == 2) {
      ctx.world().request_kill(2);
      ctx.allreduce_sum(ctx.comm(), 1.0);  // dies here, never contributes
      return -1;
    }
    try {
      ctx.allreduce_sum(ctx.comm(), 1.0);
    } catch (const CommError& e) {
      kinds[static_cast<std::size_t>(ctx.rank())] = static_cast<int>(e.kind());
      failed_sets[static_cast<std::size_t>(ctx.rank())] = e.failed();
    }
    return 0;
  });
  CHECK(!res.aborted);
  for (int r : {0, 1, 3}) {
    CHECK(kinds[static_cast<std::size_t>(r)] == static_cast<int>(CommErrorKind::ProcFailed));
    CHECK(failed_sets[static_cast<std::size_t>(r)] == std::vector<RankId>{2});
  }
  CHECK(res.rank_outcomes[2] == RankOutcome::Dead);
}

TEST_CASE("agree excuses dead ranks and returns one answer everywhere") {
  std::vector<int> values(4, -1);
  std::vector<std::vector<RankId>> failed(4);
  auto res = run_world(4, 0, [&](RankCtx& ctx) -> std::int64_t {
    if (ctx.rank() == 3) {
      ctx.world().request_kill(3);
      ctx.agree(ctx.comm(), true);  // dies at the boundary
      return -1;
    }
    AgreeResult ag = ctx.agree(ctx.comm(), ctx.rank() != 1);
    values[static_cast<std::size_t>(ctx.rank())] = ag.value ? 1 : 0;
    failed[static_cast<std::size_t>(ctx.rank())] = ag.failed;
    return 0;
  });
  CHECK(!res.aborted);
  for (int r : {0, 1, 2}) {
    CHECK(values[static_cast<std::size_t>(r)] == 0);  // AND over true, false, true
    CHECK(failed[static_cast<std::size_t>(r)] == std::vector<RankId>{3});
  }
}

TEST_CASE("revoke unblocks a pending recv with Revoked") {
  int kind = -1;
  auto res = run_world(2, 0, [&](RankCtx& ctx) -> std::int64_t {
    if (ctx.rank() == 0) {
      try {
        ctx.recv(ctx.comm(), 1, 99);  // nothing is ever sent on this channel
      } catch (const CommError& e) {
        kind = static_cast<int>(e.kind());
      }
    } else {
      ctx.revoke(ctx.comm());
    }
    AgreeResult ag = ctx.agree(ctx.comm(), true);  // usable after revocation
    return ag.value ? 1 : 0;
  });
  CHECK(!res.aborted);
  CHECK(kind == static_cast<int>(CommErrorKind::Revoked));
  CHECK(res.rank_results[0] == 1);
  CHECK(res.rank_results[1] == 1);
}

TEST_CASE("shrink substitutes spares in pool order and bumps the epoch") {
  constexpr int kRanks = 4;
  World world(WorldOptions{kRanks, 2, 5.0});

  std::vector<std::vector<RankId>> barrier_failed(kRanks);
  std::vector<std::vector<RankId>> agree_failed(kRanks);
  std::vector<RepairInfo> repair_seen(kRanks);
  std::vector<int> adopted_flag(kRanks, -1), incarnation_seen(kRanks, -1);
  std::vector<double> sum_seen(kRanks, 0.0);
  std::vector<std::vector<double>> gathered(kRanks);
  int stale_kind = -1;

  auto program = [&](RankCtx& ctx) -> std::int64_t {
    const auto r = static_cast<std::size_t>(ctx.rank());
    Comm c = ctx.comm();
    if (ctx.adopted()) {
      adopted_flag[r] = 1;
      incarnation_seen[r] = ctx.incarnation();
      repair_seen[r] = ctx.repair();
      sum_seen[r] = ctx.allreduce_sum(c, 1.0);
      gathered[r] = ctx.allgather(c, {static_cast<double>(ctx.rank())});
      return 40 + ctx.rank();
    }
    adopted_flag[r] = 0;
    incarnation_seen[r] = ctx.incarnation();
    if (ctx.rank() == 1 || ctx.rank() == 3) {
      ctx.world().request_kill(ctx.rank());
      ctx.barrier(c);  // dies
      return -1;
    }
    try {
      ctx.barrier(c);
    } catch (const CommError& e) {
      barrier_failed[r] = sorted_copy(e.failed());
    }
    ctx.revoke(c);
    AgreeResult ag = ctx.agree(c, true);
    agree_failed[r] = ag.failed;
    RepairInfo rep = ctx.shrink_and_substitute(c);
    repair_seen[r] = rep;
    sum_seen[r] = ctx.allreduce_sum(rep.comm, 1.0);
    gathered[r] = ctx.allgather(rep.comm, {static_cast<double>(ctx.rank())});
    if (ctx.rank() == 0) {
      try {
        ctx.barrier(c);  // pre-repair handle is stale now
      } catch (const CommError& e) {
        stale_kind = static_cast<int>(e.kind());
      }
    }
    return 40 + ctx.rank();
  };

  WorldResult res = world.run(program);
  CHECK(!res.aborted);
  CHECK(res.final_epoch == 1);
  CHECK(world.spares_remaining() == 0);

  const std::vector<RankId> expect_failed = {1, 3};
  for (int r : {0, 2}) {
    CHECK(barrier_failed[static_cast<std::size_t>(r)] == expect_failed);
    CHECK(agree_failed[static_cast<std::size_t>(r)] == expect_failed);
  }
  REQUIRE(res.repairs.size() == 1);
  CHECK(res.repairs[0].failed == expect_failed);

  // Lowest failed rank takes the first pool slot.
  const std::vector<std::pair<RankId, int>> expect_adopted = {{1, 0}, {3, 1}};
  CHECK(res.repairs[0].adopted == expect_adopted);
  for (int r = 0; r < kRanks; ++r) {
    CHECK(repair_seen[static_cast<std::size_t>(r)].failed == expect_failed);
    CHECK(repair_seen[static_cast<std::size_t>(r)].adopted == expect_adopted);
    CHECK(repair_seen[static_cast<std::size_t>(r)].comm.epoch == 1);
  }

  // Replacements ran as adopted incarnation 1; originals were incarnation 0.
  CHECK(adopted_flag == std::vector<int>{0, 1, 0, 1});
  CHECK(incarnation_seen == std::vector<int>{0, 1, 0, 1});

  // The repaired world is fully functional with the adopted members.
  const std::vector<double> expect_gather = {0.0, 1.0, 2.0, 3.0};
  for (int r = 0; r < kRanks; ++r) {
    CHECK(sum_seen[static_cast<std::size_t>(r)] == 4.0);
    CHECK(gathered[static_cast<std::size_t>(r)] == expect_gather);
    CHECK(res.rank_outcomes[static_cast<std::size_t>(r)] == RankOutcome::Finished);
    CHECK(res.rank_results[static_cast<std::size_t>(r)] == 40 + r);
  }
  CHECK(stale_kind == static_cast<int>(CommErrorKind::Revoked));
}

TEST_CASE("shrink throws InsufficientSpares on every participant") {
  std::vector<int> needed(3, -1), available(3, -1);
  auto res = run_world(3, 0, [&](RankCtx& ctx) -> std::int64_t {
    Comm c = ctx.comm();
    if (ctx.rank() == 2) {
      ctx.world().request_kill(2);
      ctx.barrier(c);
      return -1;
    }
    try {
      ctx.barrier(c);
    } catch (const CommError&) {
    }
    ctx.revoke(c);
    ctx.agree(c, true);
    try {
      ctx.shrink_and_substitute(c);
    } catch (const InsufficientSpares& e) {
      needed[static_cast<std::size_t>(ctx.rank())] = e.needed();
      available[static_cast<std::size_t>(ctx.rank())] = e.available();
    }
    return 0;
  });
  CHECK(!res.aborted);
  CHECK(res.final_epoch == 0);  // no repair happened
  for (int r : {0, 1}) {
    CHECK(needed[static_cast<std::size_t>(r)] == 1);
    CHECK(available[static_cast<std::size_t>(r)] == 0);
  }
  CHECK(res.rank_outcomes[2] == RankOutcome::Dead);
}

TEST_CASE("mismatched collectives abort the world") {
  auto res = run_world(2, 0, [&](RankCtx& ctx) -> std::int64_t {
    if (ctx.rank() == 0)
      ctx.allreduce_sum(ctx.comm(), 1.0);
    else
      ctx.allreduce_max(ctx.comm(), 1.0);
    return 0;
  });
  CHECK(res.aborted);
  CHECK(res.abort_reason.find("SPMD violation") != std::string::npos);
  CHECK(res.rank_outcomes[0] == RankOutcome::Aborted);
  CHECK(res.rank_outcomes[1] == RankOutcome::Aborted);
}

TEST_CASE("the watchdog converts a global stall into an abort") {
  auto res = run_world(
      2, 0,
      [&](RankCtx& ctx) -> std::int64_t {
        if (ctx.rank() == 0) ctx.barrier(ctx.comm());  // partner never arrives
        return 0;
      },
      0.25);
  CHECK(res.aborted);
  CHECK(res.abort_reason.find("deadlock watchdog") != std::string::npos);
  CHECK(res.rank_outcomes[0] == RankOutcome::Aborted);
  CHECK(res.rank_outcomes[1] == RankOutcome::Finished);
}

TEST_CASE("identical programs produce identical traces and results") {
  auto program = [](RankCtx& ctx) -> std::int64_t {
    Comm c = ctx.comm();
    double acc = ctx.allreduce_sum(c, 1.5 * (ctx.rank() + 1));
    std::vector<double> all =
        ctx.allgather(c, std::vector<double>(static_cast<std::size_t>(ctx.rank()), acc));
    const RankId next = (ctx.rank() + 1) % ctx.n_ranks();
    const RankId prev = (ctx.rank() + ctx.n_ranks() - 1) % ctx.n_ranks();
    ctx.send(c, next, 3, {static_cast<std::uint8_t>(ctx.rank())});
    std::vector<std::uint8_t> msg = ctx.recv(c, prev, 3);
    ctx.barrier(c);
    return static_cast<std::int64_t>(acc + all.size()) + msg[0];
  };
  auto a = run_world(3, 0, program);
  auto b = run_world(3, 0, program);
  CHECK(!a.aborted);
  CHECK(a.trace_hash == b.trace_hash);
  CHECK(a.final_epoch == b.final_epoch);
  CHECK(a.rank_results == b.rank_results);

  // A one-byte payload change must show up in the trace digest.
  auto program2 = [&](RankCtx& ctx) -> std::int64_t {
    Comm c = ctx.comm();
    double acc = ctx.allreduce_sum(c, 1.5 * (ctx.rank() + 1));
    std::vector<double> all =
        ctx.allgather(c, std::vector<double>(static_cast<std::size_t>(ctx.rank()), acc));
    const RankId next = (ctx.rank() + 1) % ctx.n_ranks();
    const RankId prev = (ctx.rank() + ctx.n_ranks() - 1) % ctx.n_ranks();
    ctx.send(c, next, 3, {static_cast<std::uint8_t>(ctx.rank() + 1)});
    std::vector<std::uint8_t> msg = ctx.recv(c, prev, 3);
    ctx.barrier(c);
    return static_cast<std::int64_t>(acc + all.size()) + msg[0];
  };
  auto d = run_world(3, 0, program2);
  CHECK(a.trace_hash != d.trace_hash);
}

TEST_CASE("a kill requested before run lands at the first runtime call") {
  World world(WorldOptions{2, 0, 5.0});
  world.request_kill(0);
  std::vector<RankId> seen;
  auto res = world.run([&](RankCtx& ctx) -> std::int64_t {
    try {
      ctx.barrier(ctx.comm());
    } catch (const CommError& e) {
      seen = e.failed();
    }
    return 1;
  });
  CHECK(!res.aborted);
  CHECK(res.rank_outcomes[0] == RankOutcome::Dead);
  CHECK(res.rank_outcomes[1] == RankOutcome::Finished);
  CHECK(seen == std::vector<RankId>{0});
}
