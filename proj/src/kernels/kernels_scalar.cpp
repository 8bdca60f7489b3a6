#include "cotwatch/kernels.hpp"

namespace cotwatch::kernels::detail {
namespace {

void axpy_f32_scalar(double w, const float* x, double* acc, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) acc[i] += w * static_cast<double>(x[i]);
}

void axpy_f64_scalar(double w, const double* x, double* acc, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) acc[i] += w * x[i];
}

void max_f32_scalar(const float* x, double* acc, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    acc[i] = v > acc[i] ? v : acc[i];
  }
}

void scale_f64_scalar(double s, double* acc, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) acc[i] *= s;
}

double dot_f64_scalar(const double* a, const double* b, std::size_t n) {
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

}  // namespace

const KernelTable scalar_table = {
    axpy_f32_scalar, axpy_f64_scalar, max_f32_scalar, scale_f64_scalar, dot_f64_scalar,
};

}  // namespace cotwatch::kernels::detail
