#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "cotwatch/kernels.hpp"

namespace cotwatch::kernels {
namespace {

Backend best_supported() {
  if (backend_supported(Backend::avx2)) return Backend::avx2;
  if (backend_supported(Backend::neon)) return Backend::neon;
  return Backend::scalar;
}

Backend initial_backend() {
  if (const char* env = std::getenv("COTWATCH_KERNELS")) {
    const std::string name(env);
    for (Backend b : {Backend::scalar, Backend::avx2, Backend::neon}) {
      if (name == backend_name(b) && backend_supported(b)) return b;
    }
  }
  return best_supported();
}

std::atomic<const KernelTable*>& active_slot() {
  static std::atomic<const KernelTable*> slot{&table(initial_backend())};
  return slot;
}

std::atomic<Backend>& active_id() {
  static std::atomic<Backend> id{initial_backend()};
  return id;
}

}  // namespace

bool backend_supported(Backend b) {
  switch (b) {
    case Backend::scalar:
      return true;
    case Backend::avx2:
#if defined(__x86_64__) || defined(_M_X64)
      return __builtin_cpu_supports("avx2");
#else
      return false;
#endif
    case Backend::neon:
#if defined(__aarch64__)
      return true;
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& table(Backend b) {
  switch (b) {
    case Backend::scalar:
      return detail::scalar_table;
#if defined(__x86_64__) || defined(_M_X64)
    case Backend::avx2:
      return detail::avx2_table;
#endif
#if defined(__aarch64__)
    case Backend::neon:
      return detail::neon_table;
#endif
    default:
      throw std::invalid_argument("kernel backend not compiled in: " + std::string(backend_name(b)));
  }
}

Backend active_backend() { return active_id().load(); }

void set_backend(Backend b) {
  if (!backend_supported(b)) {
    throw std::invalid_argument("kernel backend unsupported on this CPU: " +
                                std::string(backend_name(b)));
  }
  active_slot().store(&table(b));
  active_id().store(b);
}

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::scalar: return "scalar";
    case Backend::avx2: return "avx2";
    case Backend::neon: return "neon";
  }
  return "unknown";
}

namespace detail {
const KernelTable& active_table() { return *active_slot().load(std::memory_order_relaxed); }
}  // namespace detail

}  // namespace cotwatch::kernels
