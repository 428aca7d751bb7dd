#include "resilab/matrix_market.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <istream>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace resilab::linalg {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

CsrMatrix read_matrix_market(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("matrix market: empty input");

  std::istringstream header(line);
  std::string banner, object, format, field, symmetry;
  header >> banner >> object >> format >> field >> symmetry;
  if (banner != "%%MatrixMarket")
    throw std::runtime_error("matrix market: missing %%MatrixMarket banner");
  if (lower(object) != "matrix" || lower(format) != "coordinate")
    throw std::invalid_argument("matrix market: only coordinate matrices are supported");
  const std::string f = lower(field);
  if (f != "real" && f != "integer")
    throw std::invalid_argument("matrix market: only real/integer fields are supported");
  const std::string sym = lower(symmetry);
  if (sym != "general" && sym != "symmetric")
    throw std::invalid_argument("matrix market: only general/symmetric layouts are supported");

  do {
    if (!std::getline(in, line)) throw std::runtime_error("matrix market: missing size line");
  } while (line.empty() || line[0] == '%');

  index_t n_rows = 0, n_cols = 0, n_entries = 0;
  {
    std::istringstream sizes(line);
    if (!(sizes >> n_rows >> n_cols >> n_entries))
      throw std::runtime_error("matrix market: malformed size line");
  }
  if (n_rows < 0 || n_cols < 0 || n_entries < 0)
    throw std::runtime_error("matrix market: negative sizes");

  // (row, col, value) triples, 1-based in the file.
  std::vector<std::tuple<index_t, index_t, double>> entries;
  entries.reserve(static_cast<std::size_t>(n_entries));
  for (index_t e = 0; e < n_entries;) {
    if (!std::getline(in, line)) throw std::runtime_error("matrix market: truncated entries");
    if (line.empty() || line[0] == '%') continue;
    std::istringstream row(line);
    index_t i = 0, j = 0;
    double v = 0.0;
    if (!(row >> i >> j >> v)) throw std::runtime_error("matrix market: malformed entry line");
    if (i < 1 || i > n_rows || j < 1 || j > n_cols)
      throw std::runtime_error("matrix market: entry index out of range");
    entries.emplace_back(i - 1, j - 1, v);
    if (sym == "symmetric" && i != j) entries.emplace_back(j - 1, i - 1, v);
    ++e;
  }

  std::sort(entries.begin(), entries.end());
  for (std::size_t p = 1; p < entries.size(); ++p) {
    if (std::get<0>(entries[p]) == std::get<0>(entries[p - 1]) &&
        std::get<1>(entries[p]) == std::get<1>(entries[p - 1]))
      throw std::runtime_error("matrix market: duplicate entry");
  }

  CsrMatrix a;
  a.n_rows = n_rows;
  a.n_cols = n_cols;
  a.row_offsets.assign(static_cast<std::size_t>(n_rows) + 1, 0);
  a.col_indices.reserve(entries.size());
  a.values.reserve(entries.size());
  for (const auto& [i, j, v] : entries) {
    a.col_indices.push_back(j);
    a.values.push_back(v);
    ++a.row_offsets[static_cast<std::size_t>(i) + 1];
  }
  for (std::size_t r = 1; r < a.row_offsets.size(); ++r) a.row_offsets[r] += a.row_offsets[r - 1];
  a.validate();
  return a;
}

CsrMatrix read_matrix_market_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("matrix market: cannot open " + path);
  return read_matrix_market(in);
}

}  // namespace resilab::linalg
