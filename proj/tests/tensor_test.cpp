#include "dpenmt/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace dpenmt;

namespace {

// Independent triple-loop matrix product used as oracle for matmul.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t l = 0; l < k; ++l) c[i * n + j] += a[i * k + l] * b[l * n + j];
  return c;
}

DTensor random_dtensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  DTensor t(std::move(shape));
  fill_uniform(t, lo, hi, seed);
  return t;
}

// Scalar loss with informative per-element gradients: sum(y * w) for a
// fixed non-trainable weight tensor.
DTensor weighted_sum(const DTensor& y, std::uint64_t seed) {
  DTensor w(y.shape());
  fill_uniform(w, 0.25, 1.75, seed);
  return sum(mul(y, w));
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  DTensor eye({2, 2}, {1, 0, 0, 1});
  DTensor m({2, 2}, {1, 2, 3, 4});
  DTensor c = matmul(eye, m);
  EXPECT_EQ(c.data(), m.data());
}

TEST(Matmul, MatchesNaiveOracle) {
  DTensor a({2, 2}, {1, 2, 3, 4});
  DTensor b({2, 2}, {5, 6, 7, 8});
  DTensor c = matmul(a, b);
  std::vector<double> want = naive_matmul(a.data(), b.data(), 2, 2, 2);
  EXPECT_EQ(want, (std::vector<double>{19, 22, 43, 50}));
  EXPECT_EQ(c.data(), want);

  DTensor ra = random_dtensor({5, 7}, 11);
  DTensor rb = random_dtensor({7, 3}, 12);
  DTensor rc = matmul(ra, rb);
  std::vector<double> oracle = naive_matmul(ra.data(), rb.data(), 5, 7, 3);
  for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(rc.data()[i], oracle[i], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  DTensor a({2, 3});
  DTensor b({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected dimension_error";
  } catch (const dimension_error& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2 x 3]"), std::string::npos);
  }
}

TEST(Softmax, SymmetricInput) {
  DTensor x({2}, {0, 0});
  DTensor y = softmax(x, 0);
  EXPECT_DOUBLE_EQ(y.data()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.data()[1], 0.5);
}

TEST(Softmax, StableUnderLargeLogits) {
  DTensor x({2}, {1000, 0});
  DTensor y = softmax(x, 0);
  EXPECT_TRUE(std::isfinite(y.data()[0]));
  EXPECT_NEAR(y.data()[0], 1.0, 1e-12);
  EXPECT_NEAR(y.data()[1], 0.0, 1e-12);
}

TEST(Softmax, HandEvaluatedLogs) {
  DTensor x({3}, {std::log(1.0), std::log(2.0), std::log(3.0)});
  DTensor y = softmax(x, 0);
  EXPECT_NEAR(y.data()[0], 1.0 / 6.0, 1e-12);
  EXPECT_NEAR(y.data()[1], 2.0 / 6.0, 1e-12);
  EXPECT_NEAR(y.data()[2], 3.0 / 6.0, 1e-12);
}

TEST(Softmax, SumsToOneIncludingExtremes) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    DTensor x = random_dtensor({4, 6}, seed, -1e4, 1e4);
    DTensor y = softmax(x, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_GE(y.data()[r * 6 + j], 0.0);
        s += y.data()[r * 6 + j];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Softmax, AxisZeroOfMatrix) {
  DTensor x({2, 2}, {0, 1, 0, 3});
  DTensor y = softmax(x, 0);
  EXPECT_NEAR(y.data()[0] + y.data()[2], 1.0, 1e-12);
  EXPECT_NEAR(y.data()[1] + y.data()[3], 1.0, 1e-12);
  EXPECT_THROW(softmax(x, 2), dimension_error);
}

TEST(LayerNorm, ConstantRowCollapsesToBias) {
  DTensor x({2, 3}, {5, 5, 5, -2, -2, -2});
  DTensor g({3}, {1, 1, 1});
  DTensor b({3}, {0, 0, 0});
  DTensor y = layer_norm(x, g, b, 1e-6);
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(LayerNorm, HandMeanVariance) {
  DTensor x({1, 2}, {1, 3});
  DTensor g({2}, {1, 1});
  DTensor b({2}, {0, 0});
  DTensor y = layer_norm(x, g, b, 0.0);
  EXPECT_NEAR(y.data()[0], -1.0, 1e-12);
  EXPECT_NEAR(y.data()[1], 1.0, 1e-12);
}

TEST(LayerNorm, ZeroGainYieldsBias) {
  DTensor x = random_dtensor({3, 4}, 7);
  DTensor g({4}, std::vector<double>(4, 0.0));
  DTensor b({4}, {0.5, -1, 2, 0});
  DTensor y = layer_norm(x, g, b, 1e-6);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(y.data()[r * 4 + j], b.data()[j]);
}

TEST(LayerNorm, DimensionMismatch) {
  DTensor x({2, 3});
  DTensor g({4});
  DTensor b({4});
  EXPECT_THROW(layer_norm(x, g, b, 1e-6), dimension_error);
}

TEST(CrossEntropy, UniformLogits) {
  DTensor logits({2, 4}, std::vector<double>(8, 0.7));
  DTensor loss = cross_entropy(logits, {1, 3}, {1, 1});
  EXPECT_NEAR(loss.item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, ConfidentCorrect) {
  DTensor logits({1, 4}, {10, 0, 0, 0});
  DTensor loss = cross_entropy(logits, {0}, {1});
  EXPECT_LT(loss.item(), 1e-3);
}

TEST(CrossEntropy, HandBinaryCase) {
  DTensor logits({2, 2}, {0, 0, 0, 0});
  DTensor loss = cross_entropy(logits, {0, 1}, {1, 1});
  EXPECT_NEAR(loss.item(), std::log(2.0), 1e-12);
}

TEST(CrossEntropy, MaskedPositionsExcluded) {
  DTensor logits({2, 2}, {0, 0, 99, -99});
  DTensor loss = cross_entropy(logits, {0, 1}, {1, 0});
  EXPECT_NEAR(loss.item(), std::log(2.0), 1e-12);
}

TEST(CrossEntropy, AllMaskedIsDegenerateBatch) {
  DTensor logits({2, 2});
  EXPECT_THROW(cross_entropy(logits, {0, 1}, {0, 0}), input_error);
}

TEST(CrossEntropy, TargetOutOfRange) {
  DTensor logits({1, 2});
  EXPECT_THROW(cross_entropy(logits, {5}, {1}), contract_error);
}

TEST(Mse, IdenticalInputsGiveZero) {
  DTensor a = random_dtensor({3, 3}, 5);
  EXPECT_DOUBLE_EQ(mse(a, a).item(), 0.0);
}

TEST(Mse, HandValue) {
  DTensor a({2}, {0, 0});
  DTensor b({2}, {3, 4});
  EXPECT_DOUBLE_EQ(mse(a, b).item(), 12.5);
  DTensor u({1}, {1.0});
  DTensor z({1}, {0.0});
  EXPECT_DOUBLE_EQ(mse(u, z).item(), 1.0);
}

TEST(Mse, ShapeMismatch) {
  DTensor a({2});
  DTensor b({3});
  EXPECT_THROW(mse(a, b), dimension_error);
}

TEST(Backward, SumGivesOnes) {
  DTensor x = random_dtensor({2, 3}, 9);
  x.set_requires_grad(true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 1.0);
}

TEST(Backward, MseGradientWithMeanFactor) {
  DTensor x({1}, {2.0}, true);
  DTensor zero({1}, {0.0});
  backward(mse(x, zero));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
}

TEST(Backward, FanOutAccumulates) {
  DTensor x = random_dtensor({4}, 3);
  x.set_requires_grad(true);
  DTensor y = scale(x, 1.0);
  backward(sum(add(y, y)));
  for (double g : x.grad()) EXPECT_DOUBLE_EQ(g, 2.0);
}

TEST(Backward, SharedSubexpressionEqualsExpandedGraph) {
  DTensor a = random_dtensor({3, 3}, 21);
  DTensor b = random_dtensor({3, 3}, 22);
  a.set_requires_grad(true);
  b.set_requires_grad(true);

  DTensor shared_y = matmul(a, b);
  backward(sum(mul(shared_y, shared_y)));
  std::vector<double> ga = a.grad(), gb = b.grad();

  a.zero_grad();
  b.zero_grad();
  // Expanded: rebuild the subexpression separately on each use.
  backward(sum(mul(matmul(a, b), matmul(a, b))));
  EXPECT_EQ(a.grad(), ga);
  EXPECT_EQ(b.grad(), gb);
}

TEST(Backward, NonScalarLossRejected) {
  DTensor x = random_dtensor({2, 2}, 1);
  x.set_requires_grad(true);
  DTensor y = scale(x, 2.0);
  EXPECT_THROW(backward(y), contract_error);
}

TEST(Backward, ZeroGradIsCallerResponsibility) {
  DTensor x({2}, {1, 1}, true);
  backward(sum(x));
  backward(sum(x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);  // accumulated across calls
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Determinism, ForwardIsBitIdentical) {
  DTensor a = random_dtensor({8, 8}, 31);
  DTensor b = random_dtensor({8, 8}, 32);
  DTensor c1 = matmul(a, b);
  DTensor c2 = matmul(a, b);
  EXPECT_EQ(c1.data(), c2.data());
  DTensor s1 = softmax(c1, 1);
  DTensor s2 = softmax(c2, 1);
  EXPECT_EQ(s1.data(), s2.data());
}

TEST(Dropout, IsIdentity) {
  DTensor x = random_dtensor({4, 4}, 17);
  DTensor y = dropout(x, 0.3);
  EXPECT_EQ(y.data(), x.data());
  EXPECT_THROW(dropout(x, 1.0), config_error);
}

TEST(EmbeddingRows, GatherAndErrors) {
  DTensor table({3, 2}, {0, 1, 10, 11, 20, 21});
  DTensor out = embedding_rows(table, {2, 0, 2});
  EXPECT_EQ(out.data(), (std::vector<double>{20, 21, 0, 1, 20, 21}));
  EXPECT_THROW(embedding_rows(table, {3}), contract_error);
  EXPECT_THROW(embedding_rows(table, {-1}), contract_error);
}

TEST(NoGrad, SuppressesGraphRecording) {
  DTensor a = random_dtensor({2, 2}, 41);
  a.set_requires_grad(true);
  NoGradGuard guard;
  DTensor c = matmul(a, a);
  EXPECT_FALSE(c.requires_grad());
}

// ---------------------------------------------------------------
// Finite-difference checks for every primitive, 3 seeds, eps = 1e-4,
// double precision, max relative error < 1e-4.
// ---------------------------------------------------------------

constexpr double kEps = 1e-4;
constexpr double kTol = 1e-4;

TEST(GradCheck, Matmul) {
  for (std::uint64_t seed : {101u, 102u, 103u}) {
    DTensor a = random_dtensor({3, 4}, seed);
    DTensor b = random_dtensor({4, 2}, seed + 50);
    double err = grad_check<double>([&] { return sum(matmul(a, b)); }, {a, b}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, MatmulWeighted) {
  for (std::uint64_t seed : {111u, 112u, 113u}) {
    DTensor a = random_dtensor({3, 4}, seed);
    DTensor b = random_dtensor({4, 2}, seed + 50);
    double err =
        grad_check<double>([&] { return weighted_sum(matmul(a, b), 999); }, {a, b}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, Transpose) {
  for (std::uint64_t seed : {121u, 122u, 123u}) {
    DTensor a = random_dtensor({3, 5}, seed);
    double err = grad_check<double>([&] { return weighted_sum(transpose(a), 7); }, {a}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, AddMulScale) {
  for (std::uint64_t seed : {131u, 132u, 133u}) {
    DTensor a = random_dtensor({4, 3}, seed);
    DTensor b = random_dtensor({4, 3}, seed + 50);
    double err = grad_check<double>(
        [&] { return weighted_sum(scale(add(a, mul(a, b)), 0.7), 8); }, {a, b}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, AddBias) {
  for (std::uint64_t seed : {141u, 142u, 143u}) {
    DTensor x = random_dtensor({5, 3}, seed);
    DTensor b = random_dtensor({3}, seed + 50);
    double err = grad_check<double>([&] { return weighted_sum(add_bias(x, b), 9); }, {x, b}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, Relu) {
  for (std::uint64_t seed : {151u, 152u, 153u}) {
    // Keep inputs away from the kink at zero.
    DTensor x = random_dtensor({4, 4}, seed, 0.05, 1.0);
    std::mt19937_64 rng(seed + 50);
    for (auto& v : x.data())
      if (rng() & 1) v = -v;
    double err = grad_check<double>([&] { return weighted_sum(relu(x), 10); }, {x}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, Softmax) {
  for (std::uint64_t seed : {161u, 162u, 163u}) {
    DTensor x = random_dtensor({3, 5}, seed, -2.0, 2.0);
    double err = grad_check<double>([&] { return weighted_sum(softmax(x, 1), 11); }, {x}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, LayerNorm) {
  for (std::uint64_t seed : {171u, 172u, 173u}) {
    DTensor x = random_dtensor({4, 6}, seed);
    DTensor g = random_dtensor({6}, seed + 50, 0.5, 1.5);
    DTensor b = random_dtensor({6}, seed + 60);
    double err = grad_check<double>(
        [&] { return weighted_sum(layer_norm(x, g, b, 1e-5), 12); }, {x, g, b}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, CrossEntropy) {
  for (std::uint64_t seed : {181u, 182u, 183u}) {
    DTensor logits = random_dtensor({5, 7}, seed, -2.0, 2.0);
    std::vector<int> targets{0, 3, 6, 2, 1};
    std::vector<std::uint8_t> mask{1, 1, 0, 1, 1};
    double err = grad_check<double>(
        [&] { return cross_entropy(logits, targets, mask, 0.0); }, {logits}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, CrossEntropyWithLabelSmoothing) {
  for (std::uint64_t seed : {191u, 192u, 193u}) {
    DTensor logits = random_dtensor({4, 6}, seed, -2.0, 2.0);
    std::vector<int> targets{5, 0, 2, 4};
    std::vector<std::uint8_t> mask{1, 1, 1, 1};
    double err = grad_check<double>(
        [&] { return cross_entropy(logits, targets, mask, 0.1); }, {logits}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, Mse) {
  for (std::uint64_t seed : {201u, 202u, 203u}) {
    DTensor a = random_dtensor({3, 4}, seed);
    DTensor b = random_dtensor({3, 4}, seed + 50);
    double err = grad_check<double>([&] { return mse(a, b); }, {a, b}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, MseAtMinimumHasNearZeroGrad) {
  DTensor c = random_dtensor({3}, 77);
  DTensor x(c.shape(), c.data(), true);
  backward(mse(x, c));
  for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-12);
}

TEST(GradCheck, MaskedRowMse) {
  for (std::uint64_t seed : {211u, 212u, 213u}) {
    DTensor a = random_dtensor({5, 3}, seed);
    DTensor b = random_dtensor({5, 3}, seed + 50);
    std::vector<std::uint8_t> mask{1, 0, 1, 1, 0};
    double err = grad_check<double>([&] { return masked_row_mse(a, b, mask); }, {a, b}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, SliceAndConcat) {
  for (std::uint64_t seed : {221u, 222u, 223u}) {
    DTensor x = random_dtensor({4, 6}, seed);
    DTensor y = random_dtensor({4, 2}, seed + 50);
    double err = grad_check<double>(
        [&] {
          DTensor left = slice_cols(x, 0, 3);
          DTensor mid = slice_rows(x, 0, 4);
          return weighted_sum(concat_cols<double>({left, y, slice_cols(mid, 3, 3)}), 13);
        },
        {x, y}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, ScaledDotAttention) {
  for (std::uint64_t seed : {231u, 232u, 233u}) {
    const std::size_t batch = 2, q_len = 3, k_len = 4, d = 6, heads = 2;
    DTensor q = random_dtensor({batch * q_len, d}, seed);
    DTensor k = random_dtensor({batch * k_len, d}, seed + 50);
    DTensor v = random_dtensor({batch * k_len, d}, seed + 60);
    double err = grad_check<double>(
        [&] {
          return weighted_sum(
              scaled_dot_attention<double>(q, k, v, nullptr, heads, batch, q_len, k_len), 14);
        },
        {q, k, v}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(GradCheck, ScaledDotAttentionWithMask) {
  const std::size_t batch = 2, q_len = 3, k_len = 3, d = 4, heads = 2;
  auto mask = std::make_shared<std::vector<double>>(batch * q_len * k_len, 0.0);
  // Causal pattern in batch 0; one blocked key in batch 1.
  for (std::size_t i = 0; i < q_len; ++i)
    for (std::size_t j = i + 1; j < k_len; ++j) (*mask)[i * k_len + j] = -1e9;
  for (std::size_t i = 0; i < q_len; ++i) (*mask)[q_len * k_len + i * k_len + 2] = -1e9;
  for (std::uint64_t seed : {241u, 242u, 243u}) {
    DTensor q = random_dtensor({batch * q_len, d}, seed);
    DTensor k = random_dtensor({batch * k_len, d}, seed + 50);
    DTensor v = random_dtensor({batch * k_len, d}, seed + 60);
    double err = grad_check<double>(
        [&] {
          return weighted_sum(
              scaled_dot_attention<double>(q, k, v, mask, heads, batch, q_len, k_len), 15);
        },
        {q, k, v}, kEps);
    EXPECT_LT(err, kTol);
  }
}

TEST(Attention, SinglePositionReturnsValueRow) {
  DTensor q = random_dtensor({1, 4}, 61);
  DTensor k = random_dtensor({1, 4}, 62);
  DTensor v = random_dtensor({1, 4}, 63);
  DTensor out = scaled_dot_attention<double>(q, k, v, nullptr, 2, 1, 1, 1);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.data()[j], v.data()[j], 1e-12);
}

TEST(Attention, MaskBlocksAllButOneKey) {
  DTensor q = random_dtensor({1, 4}, 71);
  DTensor k = random_dtensor({3, 4}, 72);
  DTensor v = random_dtensor({3, 4}, 73);
  auto mask = std::make_shared<std::vector<double>>(std::vector<double>{-1e9, 0.0, -1e9});
  DTensor out = scaled_dot_attention<double>(q, k, v, mask, 1, 1, 1, 3);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_DOUBLE_EQ(out.data()[j], v.data()[1 * 4 + j]);
}

TEST(Attention, IdenticalKeysGiveUniformWeights) {
  DTensor q = random_dtensor({1, 4}, 81);
  std::vector<double> krow = random_dtensor({1, 4}, 82).data();
  std::vector<double> kd(krow);
  kd.insert(kd.end(), krow.begin(), krow.end());
  DTensor k({2, 4}, kd);
  DTensor v({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  DTensor out = scaled_dot_attention<double>(q, k, v, nullptr, 1, 1, 1, 2);
  EXPECT_NEAR(out.data()[0], 0.5, 1e-12);
  EXPECT_NEAR(out.data()[1], 0.5, 1e-12);
}
