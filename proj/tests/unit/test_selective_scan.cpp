#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "moemamba/errors.hpp"
#include "moemamba/mamba.hpp"

using namespace moemamba;
using moemamba::testing::TensorD;
using moemamba::testing::uniform_tensor;

namespace {

double max_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(ScanElement, CombineIsAssociative) {
  const ScanElement<double> x{0.5, 1.0}, y{-0.25, 2.0}, z{3.0, -1.5};
  const auto left = combine(combine(x, y), z);
  const auto right = combine(x, combine(y, z));
  EXPECT_DOUBLE_EQ(left.a, right.a);
  EXPECT_DOUBLE_EQ(left.b, right.b);
  // Identity element (1, 0).
  const auto id = combine(ScanElement<double>{1.0, 0.0}, x);
  EXPECT_EQ(id.a, x.a);
  EXPECT_EQ(id.b, x.b);
}

TEST(LinearRecurrence, ParallelMatchesSequentialForAllSmallLengths) {
  Rng rng(3);
  for (std::size_t len = 1; len <= 33; ++len) {
    const TensorD a = uniform_tensor({len, 3}, rng, -1.0, 1.0, false);
    const TensorD b = uniform_tensor({len, 3}, rng, -1.0, 1.0, false);
    std::vector<double> hs(len * 3), hp(len * 3);
    linear_recurrence_sequential(a.data().data(), b.data().data(), hs.data(), len, 3);
    linear_recurrence_parallel(a.data().data(), b.data().data(), hp.data(), len, 3);
    EXPECT_LT(max_diff(hs, hp), 1e-13) << "length " << len;
  }
}

TEST(LinearRecurrence, HandWorkedValues) {
  // h = 2h + 1 from h_{-1} = 0: 1, 3, 7.
  const std::vector<double> a{2, 2, 2}, b{1, 1, 1};
  std::vector<double> h(3);
  linear_recurrence_parallel(a.data(), b.data(), h.data(), 3, 1);
  EXPECT_DOUBLE_EQ(h[0], 1);
  EXPECT_DOUBLE_EQ(h[1], 3);
  EXPECT_DOUBLE_EQ(h[2], 7);
}

TEST(SelectiveScan, SingleStateMatchesClosedForm) {
  // ds = 1, Ed = 1, abar = 0.5, bu = 1, c = 2, D = 0: y_t = 2 * (2 - 2^-t).
  const std::size_t L = 5;
  const TensorD a({1, L, 1, 1}, std::vector<double>(L, 0.5));
  const TensorD bu({1, L, 1, 1}, std::vector<double>(L, 1.0));
  const TensorD c({1, L, 1}, std::vector<double>(L, 2.0));
  const TensorD d({1}, {0.0});
  const TensorD u({1, L, 1}, std::vector<double>(L, 1.0));
  for (const TensorD& y : {selective_scan_sequential(a, bu, c, d, u), selective_scan_parallel(a, bu, c, d, u)}) {
    for (std::size_t t = 0; t < L; ++t) EXPECT_NEAR(y.data()[t], 2.0 * (2.0 - std::pow(0.5, double(t))), 1e-15);
  }
}

TEST(SelectiveScan, FusedMatchesDiscretizeThenScan) {
  Rng rng(11);
  for (std::size_t L : {1, 4, 17}) {
    const TensorD delta = uniform_tensor({2, L, 3}, rng, 0.01, 1.0, false);
    const TensorD a = uniform_tensor({3, 4}, rng, -3.0, -0.1, false);
    const TensorD b = uniform_tensor({2, L, 4}, rng, -1.0, 1.0, false);
    const TensorD c = uniform_tensor({2, L, 4}, rng, -1.0, 1.0, false);
    const TensorD d = uniform_tensor({3}, rng, -1.0, 1.0, false);
    const TensorD u = uniform_tensor({2, L, 3}, rng, -1.0, 1.0, false);
    const Discretized<double> disc = discretize(delta, a, b, c, u);
    const TensorD ref = selective_scan_sequential(disc.a_bar, disc.bu_bar, disc.c, d, u);
    EXPECT_LT(max_diff(selective_scan_fused(delta, a, b, c, d, u).data(), ref.data()), 1e-14);
    EXPECT_LT(max_diff(selective_scan_parallel(disc.a_bar, disc.bu_bar, disc.c, d, u).data(), ref.data()), 1e-13);
  }
}

TEST(SelectiveScan, FusedGradientsMatchUnfused) {
  Rng rng(12);
  const TensorD delta = uniform_tensor({2, 6, 3}, rng, 0.01, 1.0);
  const TensorD a = uniform_tensor({3, 2}, rng, -3.0, -0.1);
  const TensorD b = uniform_tensor({2, 6, 2}, rng);
  const TensorD c = uniform_tensor({2, 6, 2}, rng);
  const TensorD d = uniform_tensor({3}, rng);
  const TensorD u = uniform_tensor({2, 6, 3}, rng);
  const TensorD w = uniform_tensor({2, 6, 3}, rng, -1.0, 1.0, false);
  const std::vector<TensorD> inputs{delta, a, b, c, d, u};

  auto grads = [&](bool fused) {
    for (const auto& t : inputs) t.zero_grad();
    TensorD y;
    if (fused) {
      y = selective_scan_fused(delta, a, b, c, d, u);
    } else {
      const Discretized<double> disc = discretize(delta, a, b, c, u);
      y = selective_scan_parallel(disc.a_bar, disc.bu_bar, disc.c, d, u);
    }
    sum(mul(y, w)).backward();
    std::vector<std::vector<double>> g;
    for (const auto& t : inputs) g.emplace_back(t.grad().begin(), t.grad().end());
    return g;
  };
  const auto gf = grads(true);
  const auto gu = grads(false);
  for (std::size_t i = 0; i < inputs.size(); ++i) EXPECT_LT(max_diff(gf[i], gu[i]), 1e-12) << "input " << i;
}

TEST(SelectiveScan, ZeroOrderHoldForAEulerForB) {
  const TensorD delta({1, 1, 1}, {0.3});
  const TensorD a({1, 1}, {-2.0});
  const TensorD b({1, 1, 1}, {0.7});
  const TensorD c({1, 1, 1}, {1.0});
  const TensorD u({1, 1, 1}, {1.5});
  const Discretized<double> d = discretize(delta, a, b, c, u);
  EXPECT_DOUBLE_EQ(d.a_bar.data()[0], std::exp(0.3 * -2.0));
  EXPECT_DOUBLE_EQ(d.bu_bar.data()[0], 0.3 * 0.7 * 1.5);
}

TEST(SelectiveScan, OutputAtTDependsOnlyOnInputsUpToT) {
  Rng rng(5);
  const std::size_t L = 9;
  const TensorD delta = uniform_tensor({1, L, 2}, rng, 0.01, 1.0, false);
  const TensorD a = uniform_tensor({2, 3}, rng, -2.0, -0.1, false);
  const TensorD b = uniform_tensor({1, L, 3}, rng, -1.0, 1.0, false);
  const TensorD c = uniform_tensor({1, L, 3}, rng, -1.0, 1.0, false);
  const TensorD d = uniform_tensor({2}, rng, -1.0, 1.0, false);
  TensorD u = uniform_tensor({1, L, 2}, rng, -1.0, 1.0, false);
  const TensorD y0 = selective_scan_fused(delta, a, b, c, d, u);
  u.mutable_data()[6 * 2 + 1] += 1.0;  // perturb t = 6
  const TensorD y1 = selective_scan_fused(delta, a, b, c, d, u);
  for (std::size_t i = 0; i < 6 * 2; ++i) EXPECT_EQ(y0.data()[i], y1.data()[i]);
  EXPECT_NE(y0.data()[6 * 2 + 1], y1.data()[6 * 2 + 1]);
}

TEST(SelectiveScan, RejectsMismatchedShapes) {
  const TensorD a({1, 2, 1, 1}, {0.5, 0.5});
  const TensorD c({1, 2, 1}, {1, 1});
  const TensorD d({1}, {0.0});
  const TensorD u({1, 2, 1}, {1, 1});
  EXPECT_THROW(selective_scan_sequential(a, TensorD({1, 3, 1, 1}, {1, 1, 1}), c, d, u), ShapeError);
  EXPECT_THROW(selective_scan_parallel(a, a, c, TensorD({2}, {0, 0}), u), ShapeError);
}
