/// Microbenchmarks for the kernels the solver spends its time in: the sparse
/// matrix-vector product, checkpoint frame encode/decode, payload digesting,
/// the projection-bound detector check, and one end-to-end distributed solve.
/// Counters carry the correctness story elsewhere; these exist to watch the
/// constant factors.

#include <cstdint>
#include <vector>

#include "benchmark/benchmark.h"

#include "resilab/checkpoint.hpp"
#include "resilab/digest.hpp"
#include "resilab/linalg.hpp"
#include "resilab/metrics.hpp"
#include "resilab/runtime.hpp"
#include "resilab/solver.hpp"

using namespace resilab;

namespace {

void bm_spmv(benchmark::State& state) {
  const linalg::index_t n = state.range(0);
  linalg::Poisson3DSpec spec;
  spec.nx = n;
  spec.ny = n;
  spec.nz = n;
  const auto [a, b] = linalg::build_poisson3d(spec);
  for (auto _ : state) {
    linalg::DenseVector y = linalg::spmv(a, b);
    benchmark::DoNotOptimize(y.values.data());
  }
  state.SetItemsProcessed(state.iterations() * a.nnz());
}

void bm_frame_encode(benchmark::State& state) {
  const std::vector<std::uint8_t> payload(static_cast<std::size_t>(state.range(0)), 0x5a);
  for (auto _ : state) {
    auto frame = checkpoint::encode_frame(checkpoint::Kind::Dynamic, 3, 7, payload);
    benchmark::DoNotOptimize(frame.data());
  }
  state.SetBytesProcessed(state.iterations() * state.range(0));
}

void bm_frame_decode(benchmark::State& state) {
  const std::vector<std::uint8_t> payload(static_cast<std::size_t>(state.range(0)), 0x5a);
  const auto frame = checkpoint::encode_frame(checkpoint::Kind::Dynamic, 3, 7, payload);
  for (auto _ : state) {
    auto decoded = checkpoint::decode_frame(frame);
    benchmark::DoNotOptimize(decoded.payload.data());
  }
  state.SetBytesProcessed(state.iterations() * state.range(0));
}

void bm_fnv1a64(benchmark::State& state) {
  const std::vector<std::uint8_t> data(static_cast<std::size_t>(state.range(0)), 0xa5);
  for (auto _ : state) {
    benchmark::DoNotOptimize(digest::fnv1a64(data.data(), data.size()));
  }
  state.SetBytesProcessed(state.iterations() * state.range(0));
}

void bm_bounded_check(benchmark::State& state) {
  std::vector<double> column(25);
  std::uint64_t s = 9;
  for (double& v : column)
    v = static_cast<double>(digest::splitmix64(s) >> 11) * 0x1.0p-53;
  for (auto _ : state) {
    benchmark::DoNotOptimize(solver::bounded_check(column, 40.0, 1.0 + 1e-6));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(column.size()));
}

/// Whole distributed solve, world construction and teardown included.
void bm_solve_poisson8(benchmark::State& state) {
  const int ranks = static_cast<int>(state.range(0));
  linalg::Poisson3DSpec spec;
  spec.nx = 8;
  spec.ny = 8;
  spec.nz = 8;
  const solver::StaticBuilder builder = solver::make_poisson_builder(spec);
  const solver::SolverConfig cfg;
  for (auto _ : state) {
    runtime::World world(runtime::WorldOptions{ranks, 0, 30.0});
    metrics::Metrics m;
    metrics::EventLog log;
    solver::FaultHooks hooks;
    const runtime::WorldResult wr = world.run([&](runtime::RankCtx& ctx) -> std::int64_t {
      return solver::ft_gmres(ctx, builder, cfg, &hooks, m, log).converged ? 1 : 0;
    });
    if (wr.aborted) state.SkipWithError("solve aborted");
  }
}

}  // namespace

BENCHMARK(bm_spmv)->Arg(16)->Arg(24)->Arg(32);
BENCHMARK(bm_frame_encode)->Arg(1 << 10)->Arg(1 << 16)->Arg(1 << 20);
BENCHMARK(bm_frame_decode)->Arg(1 << 10)->Arg(1 << 16)->Arg(1 << 20);
BENCHMARK(bm_fnv1a64)->Arg(1 << 10)->Arg(1 << 20);
BENCHMARK(bm_bounded_check);
BENCHMARK(bm_solve_poisson8)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
