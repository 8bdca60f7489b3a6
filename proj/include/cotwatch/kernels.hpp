#pragma once
// Data-parallel inner loops shared by aggregation, probes and the stream engine.
//
// Every kernel has a scalar reference implementation. SIMD variants (AVX2 on
// x86-64, NEON on aarch64) are selected once at runtime from CPU support and
// can be overridden with COTWATCH_KERNELS=scalar|avx2|neon or set_backend().
//
// axpy/max are element-wise and never fused, so all backends agree bitwise.
// dot reassociates the reduction; backends agree to rounding only.

#include <cstddef>
#include <span>
#include <string_view>

namespace cotwatch::kernels {

enum class Backend { scalar, avx2, neon };

struct KernelTable {
  // acc[i] += w * double(x[i])
  void (*axpy_f32)(double w, const float* x, double* acc, std::size_t n);
  // acc[i] += w * x[i]
  void (*axpy_f64)(double w, const double* x, double* acc, std::size_t n);
  // acc[i] = x[i] > acc[i] ? x[i] : acc[i]
  void (*max_f32)(const float* x, double* acc, std::size_t n);
  // acc[i] *= s
  void (*scale_f64)(double s, double* acc, std::size_t n);
  double (*dot_f64)(const double* a, const double* b, std::size_t n);
};

bool backend_supported(Backend b);
const KernelTable& table(Backend b);

Backend active_backend();
void set_backend(Backend b);  // throws std::invalid_argument if unsupported
std::string_view backend_name(Backend b);

namespace detail {
extern const KernelTable scalar_table;
#if defined(__x86_64__) || defined(_M_X64)
extern const KernelTable avx2_table;
#endif
#if defined(__aarch64__)
extern const KernelTable neon_table;
#endif
const KernelTable& active_table();
}  // namespace detail

inline void axpy(double w, std::span<const float> x, std::span<double> acc) {
  detail::active_table().axpy_f32(w, x.data(), acc.data(), acc.size());
}
inline void axpy(double w, std::span<const double> x, std::span<double> acc) {
  detail::active_table().axpy_f64(w, x.data(), acc.data(), acc.size());
}
inline void max_into(std::span<const float> x, std::span<double> acc) {
  detail::active_table().max_f32(x.data(), acc.data(), acc.size());
}
inline void scale(double s, std::span<double> acc) {
  detail::active_table().scale_f64(s, acc.data(), acc.size());
}
inline double dot(std::span<const double> a, std::span<const double> b) {
  return detail::active_table().dot_f64(a.data(), b.data(), a.size());
}

}  // namespace cotwatch::kernels
