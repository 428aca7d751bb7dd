/// \file matrix_market.hpp
/// Minimal Matrix Market reader: coordinate, real or integer values,
/// general or symmetric layout. Enough to pull external test matrices in.

#pragma once

#include <iosfwd>
#include <string>

#include "resilab/linalg.hpp"

namespace resilab::linalg {

/// Parses a Matrix Market stream into CSR. Symmetric inputs are expanded to
/// full storage. Throws std::runtime_error on malformed input and
/// std::invalid_argument on unsupported headers (complex, pattern, array).
CsrMatrix read_matrix_market(std::istream& in);

/// Convenience overload; throws std::runtime_error if the file cannot be read.
CsrMatrix read_matrix_market_file(const std::string& path);

}  // namespace resilab::linalg
