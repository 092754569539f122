#include "xmodal/kernels.hpp"

#include <limits>

namespace xmodal::kernels {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

double reduce_max_scalar(const double* x, std::size_t n) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    if (x[i] > m) m = x[i];
  return m;
}

double reduce_sum_scalar(const double* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

double sq_dist_scalar(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(double alpha, double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

void matvec_scalar(const double* w, const double* x, double* y,
                   std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    y[r] = dot_scalar(w + r * cols, x, cols);
}

void matvec_t_scalar(const double* w, const double* u, double* y,
                     std::size_t rows, std::size_t cols) {
  for (std::size_t c = 0; c < cols; ++c) y[c] = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    axpy_scalar(u[r], w + r * cols, y, cols);
}

void ger_scalar(double* a, const double* u, const double* v, double alpha,
                std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r)
    axpy_scalar(alpha * u[r], v, a + r * cols, cols);
}

}  // namespace

const Ops& scalar_ops() {
  static const Ops ops = {dot_scalar,    reduce_max_scalar, reduce_sum_scalar,
                          sq_dist_scalar, axpy_scalar,      scale_scalar,
                          matvec_scalar, matvec_t_scalar,   ger_scalar};
  return ops;
}

}  // namespace xmodal::kernels
