/// Test oracles, written independently of the library code they check:
/// a dense direct solver, a brute-force 7-point stencil enumerator, and a
/// small harness for running throwaway world programs.

#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "resilab/linalg.hpp"
#include "resilab/runtime.hpp"

namespace testsupport {

/// Gaussian elimination with partial pivoting on a densified copy.
/// O(n^3); intended for n up to ~1000.
std::vector<double> dense_solve(const resilab::linalg::CsrMatrix& a,
                                const std::vector<double>& b);

/// Entries of one 7-point Poisson row, enumerated by neighbor offsets and
/// bounds checks, sorted by column. Row-major x-fastest grid indexing.
std::vector<std::pair<std::int64_t, double>> stencil_row(std::int64_t nx, std::int64_t ny,
                                                         std::int64_t nz, std::int64_t x,
                                                         std::int64_t y, std::int64_t z);

/// Runs `fn` on a fresh world and returns the outcome.
resilab::runtime::WorldResult run_world(int ranks, int spares,
                                        const resilab::runtime::RankProgram& fn,
                                        double watchdog_seconds = 5.0);

}  // namespace testsupport
