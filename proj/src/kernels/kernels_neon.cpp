#include <arm_neon.h>

#include "cotwatch/kernels.hpp"

namespace cotwatch::kernels::detail {
namespace {

void axpy_f32_neon(double w, const float* x, double* acc, std::size_t n) {
  const float64x2_t vw = vdupq_n_f64(w);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const float32x4_t xf = vld1q_f32(x + i);
    const float64x2_t lo = vcvt_f64_f32(vget_low_f32(xf));
    const float64x2_t hi = vcvt_high_f64_f32(xf);
    // separate mul + add: vfmaq would change rounding vs the scalar path
    vst1q_f64(acc + i, vaddq_f64(vld1q_f64(acc + i), vmulq_f64(vw, lo)));
    vst1q_f64(acc + i + 2, vaddq_f64(vld1q_f64(acc + i + 2), vmulq_f64(vw, hi)));
  }
  for (; i < n; ++i) acc[i] += w * static_cast<double>(x[i]);
}

void axpy_f64_neon(double w, const double* x, double* acc, std::size_t n) {
  const float64x2_t vw = vdupq_n_f64(w);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    vst1q_f64(acc + i, vaddq_f64(vld1q_f64(acc + i), vmulq_f64(vw, vld1q_f64(x + i))));
  }
  for (; i < n; ++i) acc[i] += w * x[i];
}

void max_f32_neon(const float* x, double* acc, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) {
    const float64x2_t v = vcvt_f64_f32(vld1_f32(x + i));
    const float64x2_t a = vld1q_f64(acc + i);
    vst1q_f64(acc + i, vbslq_f64(vcgtq_f64(v, a), v, a));
  }
  for (; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    acc[i] = v > acc[i] ? v : acc[i];
  }
}

void scale_f64_neon(double s, double* acc, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(acc + i, vmulq_n_f64(vld1q_f64(acc + i), s));
  for (; i < n; ++i) acc[i] *= s;
}

double dot_f64_neon(const double* a, const double* b, std::size_t n) {
  float64x2_t s0 = vdupq_n_f64(0.0);
  float64x2_t s1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 = vaddq_f64(s0, vmulq_f64(vld1q_f64(a + i), vld1q_f64(b + i)));
    s1 = vaddq_f64(s1, vmulq_f64(vld1q_f64(a + i + 2), vld1q_f64(b + i + 2)));
  }
  double sum = vaddvq_f64(vaddq_f64(s0, s1));
  for (; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

}  // namespace

const KernelTable neon_table = {
    axpy_f32_neon, axpy_f64_neon, max_f32_neon, scale_f64_neon, dot_f64_neon,
};

}  // namespace cotwatch::kernels::detail
