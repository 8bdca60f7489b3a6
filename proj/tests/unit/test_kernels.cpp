#include <cstring>
#include <random>

#include <gtest/gtest.h>

#include "cotwatch/aggregation.hpp"
#include "cotwatch/kernels.hpp"
#include "test_util.hpp"

using namespace cotwatch;
namespace k = cotwatch::kernels;

namespace {

std::vector<k::Backend> supported() {
  std::vector<k::Backend> out;
  for (auto b : {k::Backend::scalar, k::Backend::avx2, k::Backend::neon}) {
    if (k::backend_supported(b)) out.push_back(b);
  }
  return out;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

struct BackendGuard {
  k::Backend saved = k::active_backend();
  ~BackendGuard() { k::set_backend(saved); }
};

}  // namespace

TEST(Kernels, ScalarAlwaysSupported) {
  EXPECT_TRUE(k::backend_supported(k::Backend::scalar));
  EXPECT_EQ(k::backend_name(k::Backend::scalar), "scalar");
}

TEST(Kernels, UnsupportedBackendRejected) {
  for (auto b : {k::Backend::avx2, k::Backend::neon}) {
    if (!k::backend_supported(b)) {
      EXPECT_THROW(k::set_backend(b), std::invalid_argument);
    }
  }
}

TEST(Kernels, ElementwiseKernelsBitwiseEqualAcrossBackends) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n01(0, 3);
  const auto& ref = k::table(k::Backend::scalar);
  for (auto b : supported()) {
    const auto& tb = k::table(b);
    for (std::size_t n = 0; n < 70; ++n) {
      std::vector<float> xf(n);
      std::vector<double> xd(n), acc(n);
      for (std::size_t i = 0; i < n; ++i) {
        xf[i] = static_cast<float>(n01(rng));
        xd[i] = n01(rng);
        acc[i] = n01(rng);
      }
      const double w = n01(rng);
      auto a1 = acc, a2 = acc;
      ref.axpy_f32(w, xf.data(), a1.data(), n);
      tb.axpy_f32(w, xf.data(), a2.data(), n);
      EXPECT_TRUE(same_bits(a1, a2)) << k::backend_name(b) << " axpy_f32 n=" << n;
      a1 = a2 = acc;
      ref.axpy_f64(w, xd.data(), a1.data(), n);
      tb.axpy_f64(w, xd.data(), a2.data(), n);
      EXPECT_TRUE(same_bits(a1, a2)) << k::backend_name(b) << " axpy_f64 n=" << n;
      a1 = a2 = acc;
      ref.max_f32(xf.data(), a1.data(), n);
      tb.max_f32(xf.data(), a2.data(), n);
      EXPECT_TRUE(same_bits(a1, a2)) << k::backend_name(b) << " max n=" << n;
      a1 = a2 = acc;
      ref.scale_f64(w, a1.data(), n);
      tb.scale_f64(w, a2.data(), n);
      EXPECT_TRUE(same_bits(a1, a2)) << k::backend_name(b) << " scale n=" << n;
    }
  }
}

TEST(Kernels, MaxHandlesSignedZeroLikeScalar) {
  std::vector<float> x = {-0.0f, 0.0f, 1.0f, -1.0f};
  for (auto b : supported()) {
    std::vector<double> ref = {0.0, -0.0, 1.0, -1.0}, got = ref;
    k::table(k::Backend::scalar).max_f32(x.data(), ref.data(), x.size());
    k::table(b).max_f32(x.data(), got.data(), x.size());
    EXPECT_TRUE(same_bits(ref, got)) << k::backend_name(b);
  }
}

TEST(Kernels, DotAgreesToRounding) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01(0, 1);
  for (auto b : supported()) {
    for (std::size_t n = 0; n < 70; ++n) {
      std::vector<double> a(n), c(n);
      double mag = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        a[i] = n01(rng);
        c[i] = n01(rng);
        mag += std::abs(a[i] * c[i]);
      }
      const double r = k::table(k::Backend::scalar).dot_f64(a.data(), c.data(), n);
      const double g = k::table(b).dot_f64(a.data(), c.data(), n);
      EXPECT_LE(std::abs(r - g), 1e-12 * std::max(1.0, mag)) << k::backend_name(b) << " n=" << n;
    }
  }
}

TEST(Kernels, AggregationUnchangedByBackendForElementwiseSchemes) {
  BackendGuard guard;
  std::mt19937_64 rng(17);
  testutil::TrajShape shape;
  shape.d = 13;
  shape.max_tokens = 12;
  for (int rep = 0; rep < 20; ++rep) {
    const auto traj = testutil::random_trajectory(rng, shape, "k");
    for (auto kind : {SchemeKind::step_mean, SchemeKind::global_mean, SchemeKind::global_linear,
                      SchemeKind::global_exp, SchemeKind::max_pool, SchemeKind::surprisal_weighted,
                      SchemeKind::bottom5_weighted}) {
      k::set_backend(k::Backend::scalar);
      const auto ref = batch_aggregate(traj, AggregationScheme::of(kind));
      for (auto b : supported()) {
        k::set_backend(b);
        const auto got = batch_aggregate(traj, AggregationScheme::of(kind));
        for (std::size_t t = 0; t < ref.size(); ++t) {
          EXPECT_TRUE(same_bits(ref[t].vector, got[t].vector)) << to_string(kind) << " " << k::backend_name(b);
        }
      }
    }
  }
}
