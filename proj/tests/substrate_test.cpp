#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "denosent/errors.hpp"
#include "denosent/grad_check.hpp"
#include "denosent/ops.hpp"
#include "denosent/rng.hpp"
#include "denosent/tensor.hpp"

namespace denosent {
namespace {

using D = Tensor<double>;
using F = Tensor<float>;

D random_tensor(Shape dims, std::uint64_t seed, double scale = 1.0) {
  RngStream rng(seed, 7);
  std::vector<double> v(shape_size(dims));
  for (auto& x : v) x = scale * rng.normal();
  return D(std::move(dims), std::move(v));
}

// ---- RngStream -------------------------------------------------------------

TEST(RngStream, SameSeedAndStreamReplay) {
  RngStream a(11, 3), b(11, 3);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(RngStream, DistinctStreamsDiffer) {
  RngStream a(11, 3), b(11, 4);
  int equal = 0;
  for (int i = 0; i < 100; ++i) equal += a.next_u64() == b.next_u64();
  EXPECT_EQ(equal, 0);
}

TEST(RngStream, ForkIsPureFunctionOfParentIdentity) {
  RngStream parent(5, 1);
  const auto f1 = parent.fork("x");
  parent.next_u64();
  EXPECT_EQ(parent.fork("x").fork(3), parent.fork("x").fork(3));
  EXPECT_FALSE(parent.fork("x") == parent.fork("y"));
  (void)f1;
}

TEST(RngStream, UniformMomentsAndRange) {
  RngStream rng(1, 0);
  double sum = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / n, 0.5, 0.01);
}

TEST(RngStream, BelowStaysInRange) {
  RngStream rng(2, 0);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) ++counts[rng.below(7)];
  for (int c : counts) EXPECT_GT(c, 800);
}

// ---- Tensor ----------------------------------------------------------------

TEST(Tensor, ConstructionValidatesShape) {
  EXPECT_THROW(F({2, 0}, {}), InvalidShape);
  EXPECT_THROW(F({2, 2}, {1, 2, 3}), InvalidShape);
  const F t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.dim(1), 3u);
}

TEST(Tensor, ForwardRejectsNonFinite) {
  const F big({1}, {3e38f});
  EXPECT_THROW(ops::add(big, big), NonFinite);
}

TEST(Tensor, GradientsAccumulateUntilZeroed) {
  D x({2}, {1.0, 2.0}, true);
  ops::sum(ops::scale(x, 3.0)).backward();
  ops::sum(ops::scale(x, 3.0)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
}

TEST(Tensor, NoGradGuardSkipsRecording) {
  D x({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  const auto y = ops::sum(x);
  EXPECT_FALSE(y.requires_grad());
}

// ---- softmax ---------------------------------------------------------------

TEST(Softmax, SymmetricAndShiftInvariant) {
  const auto a = ops::softmax_rows(F({1, 2}, {0.f, 0.f}));
  EXPECT_NEAR(a.at(0), 0.5, 1e-7);
  EXPECT_NEAR(a.at(1), 0.5, 1e-7);
  for (float c : {-50.f, 0.f, 7.5f, 80.f}) {
    const auto b = ops::softmax_rows(F({3}, {c, c, c}));
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(b.at(i), 1.0 / 3.0, 1e-6);
  }
}

TEST(Softmax, MatchesExtendedPrecisionOracle) {
  const auto s = ops::softmax_rows(F({3}, {1.f, 2.f, 3.f}));
  long double z = 0.0L;
  for (int i = 1; i <= 3; ++i) z += std::exp(static_cast<long double>(i));
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(s.at(i), static_cast<double>(std::exp(static_cast<long double>(i + 1)) / z), 1e-6);
  }
  EXPECT_NEAR(s.at(0), 0.0900, 1e-4);
  EXPECT_NEAR(s.at(2), 0.6652, 1e-4);
}

TEST(Softmax, RowsSumToOneAndShiftBy1000) {
  const auto x = random_tensor({4, 9}, 3, 5.0);
  const auto a = ops::softmax_rows(x);
  std::vector<double> shifted(x.values().begin(), x.values().end());
  for (auto& v : shifted) v += 1000.0;
  const auto b = ops::softmax_rows(D({4, 9}, shifted));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 9; ++j) {
      s += a.at(r * 9 + j);
      EXPECT_NEAR(a.at(r * 9 + j), b.at(r * 9 + j), 1e-6);
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

// ---- layer norm ------------------------------------------------------------

TEST(LayerNorm, ConstantRowMapsToBias) {
  const auto y = ops::layer_norm(F({1, 4}, {5, 5, 5, 5}), F::full({4}, 1.f), F::zeros({4}));
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(y.at(i), 0.0, 1e-6);
}

TEST(LayerNorm, StandardizedRowUpToEps) {
  const auto y = ops::layer_norm(F({1, 2}, {1, -1}), F::full({2}, 1.f), F::zeros({2}));
  EXPECT_NEAR(y.at(0), 1.0, 1e-4);
  EXPECT_NEAR(y.at(1), -1.0, 1e-4);
}

TEST(LayerNorm, RandomRowMatchesFloat64Oracle) {
  const auto x = random_tensor({1, 8}, 4, 2.0);
  const auto gain = random_tensor({8}, 5);
  const auto bias = random_tensor({8}, 6);
  const auto y = ops::layer_norm(x, gain, bias, 1e-5);
  double mean = 0.0, var = 0.0;
  for (double v : x.values()) mean += v;
  mean /= 8.0;
  for (double v : x.values()) var += (v - mean) * (v - mean);
  var /= 8.0;
  for (std::size_t i = 0; i < 8; ++i) {
    const double expect = (x.at(i) - mean) / std::sqrt(var + 1e-5) * gain.at(i) + bias.at(i);
    EXPECT_NEAR(y.at(i), expect, 1e-12);
  }
}

TEST(LayerNorm, RowStatisticsBeforeAffine) {
  const auto x = random_tensor({5, 16}, 9, 3.0);
  const auto y = ops::layer_norm(x, D::full({16}, 1.0), D::zeros({16}));
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t j = 0; j < 16; ++j) m += y.at(r * 16 + j);
    m /= 16.0;
    for (std::size_t j = 0; j < 16; ++j) v += (y.at(r * 16 + j) - m) * (y.at(r * 16 + j) - m);
    EXPECT_NEAR(m, 0.0, 1e-5);
    EXPECT_NEAR(v / 16.0, 1.0, 1e-5);
  }
}

TEST(LayerNorm, GainWidthMismatch) {
  EXPECT_THROW(ops::layer_norm(F::zeros({2, 4}), F::zeros({3}), F::zeros({4})), InvalidShape);
}

// ---- dropout ---------------------------------------------------------------

TEST(Dropout, ZeroRateIsIdentity) {
  const auto x = random_tensor({50}, 1);
  const auto r = ops::dropout(x, 0.0, RngStream(1, 1));
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(r.output.at(i), x.at(i));
    EXPECT_EQ(r.mask.at(i), 1.0);
  }
}

TEST(Dropout, RejectsRatesOutsideUnitInterval) {
  const auto x = F::full({4}, 1.f);
  EXPECT_THROW(ops::dropout(x, 1.0, RngStream(1)), InvalidParameter);
  EXPECT_THROW(ops::dropout(x, -0.1, RngStream(1)), InvalidParameter);
}

TEST(Dropout, ZeroFractionWithinBinomialBounds) {
  // n = 10^4, p = 0.825: sd = sqrt(n p (1-p)) / n ~ 0.0038, so [0.80, 0.85]
  // is more than 6.5 sd wide on each side.
  const auto x = F::full({10000}, 1.f);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = ops::dropout(x, 0.825, RngStream(seed, 2));
    std::size_t zeros = 0;
    for (float m : r.mask.values()) zeros += m == 0.f;
    const double frac = static_cast<double>(zeros) / 10000.0;
    EXPECT_GE(frac, 0.80);
    EXPECT_LE(frac, 0.85);
  }
}

TEST(Dropout, SurvivorsScaledAndExpectationPreserved) {
  const auto x = F::full({2000}, 2.f);
  double mean_sum = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto r = ops::dropout(x, 0.825, RngStream(seed, 9));
    double s = 0.0;
    for (std::size_t i = 0; i < 2000; ++i) {
      if (r.mask.at(i) != 0.f) EXPECT_NEAR(r.output.at(i), 2.0 / 0.175, 1e-4);
      s += r.output.at(i);
    }
    mean_sum += s / 2000.0;
  }
  EXPECT_NEAR(mean_sum / 100.0, 2.0, 0.1);
}

TEST(Dropout, SameStreamSameMask) {
  const auto x = F::full({300}, 1.f);
  const auto a = ops::dropout(x, 0.5, RngStream(4, 4));
  const auto b = ops::dropout(x, 0.5, RngStream(4, 4));
  for (std::size_t i = 0; i < 300; ++i) EXPECT_EQ(a.mask.at(i), b.mask.at(i));
}

TEST(Dropout, GradientFlowsOnlyThroughSurvivors) {
  D x = D::full({200}, 1.0, true);
  const auto r = ops::dropout(x, 0.6, RngStream(3));
  ops::sum(r.output).backward();
  for (std::size_t i = 0; i < 200; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], r.mask.at(i) / 0.4);
}

TEST(Dropout, RowStreamsMakeRowsIndependentOfBatchmates) {
  const RngStream a(1, 1), b(2, 2), c(3, 3);
  const auto x2 = F::full({2, 5, 4}, 1.f);
  const auto x3 = F::full({3, 5, 4}, 1.f);
  const std::vector<RngStream> s2{a, c};
  const std::vector<RngStream> s3{b, a, c};
  const auto r2 = ops::dropout_rows(x2, 0.5, s2);
  const auto r3 = ops::dropout_rows(x3, 0.5, s3);
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(r2.mask.at(i), r3.mask.at(20 + i));
    EXPECT_EQ(r2.mask.at(20 + i), r3.mask.at(40 + i));
  }
}

// ---- cross entropy ---------------------------------------------------------

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  const std::vector<ops::TokenId> targets{0, 3, 2, 1};
  const std::vector<std::uint8_t> mask{1, 1, 1, 1};
  const auto loss = ops::cross_entropy_mean(F::zeros({1, 4, 4}), targets, mask);
  EXPECT_NEAR(loss.item(), std::log(4.0), 1e-6);
}

TEST(CrossEntropy, NearDeltaLogitsGiveNearZero) {
  std::vector<float> v(2 * 5, -20.f);
  v[1] = 20.f;
  v[5 + 4] = 20.f;
  const std::vector<ops::TokenId> targets{1, 4};
  const std::vector<std::uint8_t> mask{1, 1};
  EXPECT_LT(ops::cross_entropy_mean(F({1, 2, 5}, v), targets, mask).item(), 1e-6);
}

TEST(CrossEntropy, RandomCaseMatchesFloat64Oracle) {
  const auto logits = random_tensor({2, 3, 5}, 12, 2.0);
  const std::vector<ops::TokenId> targets{4, 0, 2, 1, 3, 3};
  const std::vector<std::uint8_t> mask{1, 1, 0, 1, 1, 1};
  double total = 0.0;
  int count = 0;
  for (std::size_t p = 0; p < 6; ++p) {
    if (!mask[p]) continue;
    double mx = -1e300;
    for (std::size_t v = 0; v < 5; ++v) mx = std::max(mx, logits.at(p * 5 + v));
    double z = 0.0;
    for (std::size_t v = 0; v < 5; ++v) z += std::exp(logits.at(p * 5 + v) - mx);
    total += -(logits.at(p * 5 + targets[p]) - mx - std::log(z));
    ++count;
  }
  EXPECT_NEAR(ops::cross_entropy_mean(logits, targets, mask).item(), total / count, 1e-12);
  EXPECT_NEAR(ops::cross_entropy(logits, targets, mask, ops::Reduction::kSum).item(), total, 1e-12);
}

TEST(CrossEntropy, Errors) {
  const auto logits = F::zeros({1, 2, 3});
  const std::vector<ops::TokenId> ok{0, 1};
  const std::vector<ops::TokenId> bad{0, 3};
  EXPECT_THROW(ops::cross_entropy_mean(logits, ok, std::vector<std::uint8_t>{0, 0}), DegenerateBatch);
  EXPECT_THROW(ops::cross_entropy_mean(logits, bad, std::vector<std::uint8_t>{1, 1}), InvalidToken);
}

// ---- grad check ------------------------------------------------------------

TEST(GradCheck, ConstantFunctionHasZeroGradient) {
  D x = random_tensor({3}, 1);
  const auto report = grad_check<double>(
      [&] { return ops::add(ops::scale(ops::sum(x), 0.0), D::scalar(4.0)); }, {{"x", x}});
  EXPECT_EQ(report.max_rel_error, 0.0);
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(GradCheck, LinearFunctionHasGradientThree) {
  D x = random_tensor({4}, 2);
  const auto report = grad_check<double>([&] { return ops::sum(ops::scale(x, 3.0)); }, {{"x", x}});
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 3.0);
  EXPECT_LT(report.max_rel_error, 1e-8);
}

TEST(GradCheck, NonDeterministicFunctionIsRejected) {
  D x = random_tensor({4}, 2);
  std::uint64_t calls = 0;
  auto f = [&] { return ops::sum(ops::dropout(x, 0.5, RngStream(calls++)).output); };
  EXPECT_THROW(grad_check<double>(f, {{"x", x}}), ContractViolation);
}

}  // namespace
}  // namespace denosent
