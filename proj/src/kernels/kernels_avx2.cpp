// Compiled with -mavx2; only reached after a runtime CPU check.
#include <immintrin.h>

#include "cotwatch/kernels.hpp"

namespace cotwatch::kernels::detail {
namespace {

void axpy_f32_avx2(double w, const float* x, double* acc, std::size_t n) {
  const __m256d vw = _mm256_set1_pd(w);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 xf = _mm256_loadu_ps(x + i);
    const __m256d lo = _mm256_cvtps_pd(_mm256_castps256_ps128(xf));
    const __m256d hi = _mm256_cvtps_pd(_mm256_extractf128_ps(xf, 1));
    _mm256_storeu_pd(acc + i, _mm256_add_pd(_mm256_loadu_pd(acc + i), _mm256_mul_pd(vw, lo)));
    _mm256_storeu_pd(acc + i + 4,
                     _mm256_add_pd(_mm256_loadu_pd(acc + i + 4), _mm256_mul_pd(vw, hi)));
  }
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_cvtps_pd(_mm_loadu_ps(x + i));
    _mm256_storeu_pd(acc + i, _mm256_add_pd(_mm256_loadu_pd(acc + i), _mm256_mul_pd(vw, v)));
  }
  for (; i < n; ++i) acc[i] += w * static_cast<double>(x[i]);
}

void axpy_f64_avx2(double w, const double* x, double* acc, std::size_t n) {
  const __m256d vw = _mm256_set1_pd(w);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_loadu_pd(x + i);
    _mm256_storeu_pd(acc + i, _mm256_add_pd(_mm256_loadu_pd(acc + i), _mm256_mul_pd(vw, v)));
  }
  for (; i < n; ++i) acc[i] += w * x[i];
}

void max_f32_avx2(const float* x, double* acc, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d v = _mm256_cvtps_pd(_mm_loadu_ps(x + i));
    // MAXPD returns the second operand unless the first is strictly greater,
    // matching the scalar select.
    _mm256_storeu_pd(acc + i, _mm256_max_pd(v, _mm256_loadu_pd(acc + i)));
  }
  for (; i < n; ++i) {
    const double v = static_cast<double>(x[i]);
    acc[i] = v > acc[i] ? v : acc[i];
  }
}

void scale_f64_avx2(double s, double* acc, std::size_t n) {
  const __m256d vs = _mm256_set1_pd(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(acc + i, _mm256_mul_pd(_mm256_loadu_pd(acc + i), vs));
  for (; i < n; ++i) acc[i] *= s;
}

double dot_f64_avx2(const double* a, const double* b, std::size_t n) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    s0 = _mm256_add_pd(s0, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    s1 = _mm256_add_pd(s1, _mm256_mul_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4)));
  }
  for (; i + 4 <= n; i += 4) {
    s0 = _mm256_add_pd(s0, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  const __m256d s = _mm256_add_pd(s0, s1);
  const __m128d pair = _mm_add_pd(_mm256_castpd256_pd128(s), _mm256_extractf128_pd(s, 1));
  double sum = _mm_cvtsd_f64(_mm_add_sd(pair, _mm_unpackhi_pd(pair, pair)));
  for (; i < n; ++i) sum += a[i] * b[i];
  return sum;
}

}  // namespace

const KernelTable avx2_table = {
    axpy_f32_avx2, axpy_f64_avx2, max_f32_avx2, scale_f64_avx2, dot_f64_avx2,
};

}  // namespace cotwatch::kernels::detail
