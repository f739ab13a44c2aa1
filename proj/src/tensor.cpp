#include "refil/tensor.hpp"

#include <cmath>

namespace refil {

Matrix identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) t(c, r) = m(r, c);
  }
  return t;
}

double max_abs(const Matrix& m) {
  double best = 0.0;
  for (double x : m) best = std::max(best, std::abs(x));
  return best;
}

}  // namespace refil
