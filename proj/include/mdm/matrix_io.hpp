#ifndef MDM_MATRIX_IO_HPP
#define MDM_MATRIX_IO_HPP

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mdm/error.hpp"
#include "mdm/tensor.hpp"

namespace mdm {

struct NamedMatrix {
  std::string name;
  Tensor values;  // [H,W]
};

namespace detail {

// %.17g round-trips doubles exactly and prints identically across runs
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Plain-text matrix container: one record per matrix, each headed by
// "MDMM <name> <H> <W>" and followed by H rows of W decimal values.
inline void write_mdmm(const std::string& path,
                       const std::vector<NamedMatrix>& mats) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open for writing: " + path);
  for (const NamedMatrix& m : mats) {
    check_shape(m.values.rank() == 2,
                "mdmm: matrix " + m.name + " must be 2-d");
    const std::size_t h = m.values.shape()[0], w = m.values.shape()[1];
    os << "MDMM " << m.name << ' ' << h << ' ' << w << '\n';
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        if (x) os << ' ';
        os << detail::fmt_double(m.values.at(y, x));
      }
      os << '\n';
    }
  }
  if (!os) throw FormatError("write failed: " + path);
}

inline std::vector<NamedMatrix> read_mdmm(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open for reading: " + path);
  std::vector<NamedMatrix> out;
  std::string magic;
  while (is >> magic) {
    if (magic != "MDMM") {
      throw FormatError("bad MDMM record header in " + path);
    }
    NamedMatrix m;
    std::size_t h = 0, w = 0;
    if (!(is >> m.name >> h >> w) || h == 0 || w == 0) {
      throw FormatError("bad MDMM dimensions in " + path);
    }
    m.values = Tensor({h, w});
    for (std::size_t i = 0; i < h * w; ++i) {
      if (!(is >> m.values[i])) {
        throw FormatError("truncated MDMM matrix '" + m.name + "' in " +
                          path);
      }
    }
    out.push_back(std::move(m));
  }
  if (out.empty()) throw FormatError("no MDMM records in " + path);
  return out;
}

inline const NamedMatrix& find_matrix(const std::vector<NamedMatrix>& mats,
                                      const std::string& name) {
  for (const NamedMatrix& m : mats) {
    if (m.name == name) return m;
  }
  throw FormatError("MDMM matrix '" + name + "' not found");
}

}  // namespace mdm

#endif  // MDM_MATRIX_IO_HPP
