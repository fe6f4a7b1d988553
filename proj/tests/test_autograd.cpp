#include <gtest/gtest.h>

#include "bifit/attention.hpp"
#include "bifit/nn.hpp"
#include "gradcheck.hpp"

using namespace bifit;
using bifit::testkit::check_leaf;
using bifit::testkit::random_leaf;
using bifit::testkit::weighted_sum;

namespace {
constexpr double kTol = 1e-6;
}

TEST(Tensor, ShapeAndAccess) {
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2);
  EXPECT_EQ(t.cols(), 3);
  t.at(1, 2) = 4;
  EXPECT_EQ(t[5], 4);
  EXPECT_THROW(Tensor<float>({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Autograd, BackwardRequiresScalarRoot) {
  Rng rng(1);
  auto x = random_leaf({2, 2}, rng);
  EXPECT_THROW(backward(relu(x)), ContractError);
}

TEST(Autograd, NoGradGuardSkipsRecording) {
  Rng rng(1);
  auto x = random_leaf({2, 2}, rng);
  {
    NoGradGuard ng;
    auto y = sum_all(relu(x));
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(sum_all(x).requires_grad());
}

TEST(Autograd, LeafGradientsAccumulateUntilCleared) {
  Var<double> x(Tensor<double>({1}, std::vector<double>{3.0}), true);
  backward(sum_all(scale(x, 2.0)));
  backward(sum_all(scale(x, 2.0)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Autograd, SharedSubexpressionGetsBothPaths) {
  Var<double> x(Tensor<double>({1}, std::vector<double>{2.0}), true);
  Var<double> y = mul(x, x);
  backward(sum_all(add(y, y)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);  // d(2x²)/dx
}

TEST(OpsGradient, Elementwise) {
  Rng rng(2);
  auto a = random_leaf({3, 4}, rng), b = random_leaf({3, 4}, rng);
  for (auto f : std::vector<std::function<Var<double>()>>{
           [&] { return weighted_sum(add(a, b)); }, [&] { return weighted_sum(sub(a, b)); },
           [&] { return weighted_sum(mul(a, b)); }, [&] { return weighted_sum(scale(a, 0.3)); },
           [&] { return weighted_sum(gelu(a)); }, [&] { return weighted_sum(sigmoid(a)); },
           [&] { return weighted_sum(tanh(a)); }}) {
    EXPECT_LT(check_leaf(a, f).rel_error, kTol);
  }
  EXPECT_LT(check_leaf(b, [&] { return weighted_sum(mul(a, b)); }).rel_error, kTol);
}

TEST(OpsGradient, ReluAwayFromKink) {
  Tensor<double> t({2, 3}, std::vector<double>{-1.2, 0.4, 2.0, -0.3, 0.9, -2.2});
  Var<double> x(t, true);
  EXPECT_LT(check_leaf(x, [&] { return weighted_sum(relu(x)); }).rel_error, kTol);
}

TEST(OpsGradient, MatmulLinearRowvec) {
  Rng rng(3);
  auto x = random_leaf({5, 4}, rng), w = random_leaf({4, 3}, rng), b = random_leaf({3}, rng);
  auto f = [&] { return weighted_sum(linear(x, w, b)); };
  EXPECT_LT(check_leaf(x, f).rel_error, kTol);
  EXPECT_LT(check_leaf(w, f).rel_error, kTol);
  EXPECT_LT(check_leaf(b, f).rel_error, kTol);
  auto g = [&] { return weighted_sum(add_rowvec(matmul(x, w), b)); };
  EXPECT_LT(check_leaf(b, g).rel_error, kTol);
  EXPECT_THROW(matmul(x, x), DimensionError);
}

TEST(OpsGradient, Norms) {
  Rng rng(4);
  auto x = random_leaf({6, 8}, rng), g = random_leaf({8}, rng), b = random_leaf({8}, rng);
  auto ln = [&] { return weighted_sum(layer_norm(x, g, b)); };
  EXPECT_LT(check_leaf(x, ln).rel_error, kTol);
  EXPECT_LT(check_leaf(g, ln).rel_error, kTol);
  EXPECT_LT(check_leaf(b, ln).rel_error, kTol);
  // Two images of 3 pixels each, 4 groups of 2 channels.
  auto gn = [&] { return weighted_sum(group_norm(x, 2, 4, g, b)); };
  EXPECT_LT(check_leaf(x, gn).rel_error, kTol);
  EXPECT_LT(check_leaf(g, gn).rel_error, kTol);
  EXPECT_LT(check_leaf(b, gn).rel_error, kTol);
}

TEST(Ops, LayerNormRowsAreStandardised) {
  Rng rng(5);
  auto x = random_leaf({3, 16}, rng, 4.0);
  Var<double> g(Tensor<double>({16}, 1.0)), b(Tensor<double>({16}, 0.0));
  auto y = layer_norm(x, g, b).value();
  for (int r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (int c = 0; c < 16; ++c) m += y.at(r, c) / 16;
    for (int c = 0; c < 16; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 16;
    EXPECT_NEAR(m, 0, 1e-12);
    EXPECT_NEAR(v, 1, 1e-4);
  }
}

TEST(OpsGradient, Im2colAndUpsample) {
  Rng rng(6);
  auto x = random_leaf({2 * 4 * 4, 3}, rng);
  EXPECT_LT(check_leaf(x, [&] { return weighted_sum(im2col(x, 2, 4, 4, 3, 2, 1)); }).rel_error, kTol);
  EXPECT_LT(check_leaf(x, [&] { return weighted_sum(upsample2x(x, 2, 4, 4)); }).rel_error, kTol);
}

TEST(Ops, Im2colLayout) {
  // One 2x2 single-channel image, 3x3 kernel, pad 1, stride 1: centre tap of
  // every patch is the pixel itself.
  Var<double> x(Tensor<double>({4, 1}, std::vector<double>{1, 2, 3, 4}));
  auto cols = im2col(x, 1, 2, 2, 3, 1, 1).value();
  ASSERT_EQ(cols.rows(), 4);
  ASSERT_EQ(cols.cols(), 9);
  for (int p = 0; p < 4; ++p) EXPECT_EQ(cols.at(p, 4), p + 1);
  EXPECT_EQ(cols.at(0, 0), 0);  // top-left tap of pixel (0,0) is padding
  EXPECT_EQ(cols.at(0, 8), 4);  // bottom-right tap of pixel (0,0) is pixel (1,1)
}

TEST(OpsGradient, Structural) {
  Rng rng(7);
  auto a = random_leaf({3, 4}, rng), b = random_leaf({2, 4}, rng), c = random_leaf({3, 2}, rng);
  EXPECT_LT(check_leaf(a, [&] { return weighted_sum(concat_rows<double>({a, b})); }).rel_error, kTol);
  EXPECT_LT(check_leaf(a, [&] { return weighted_sum(concat_cols<double>({a, c})); }).rel_error, kTol);
  EXPECT_LT(check_leaf(a, [&] { return weighted_sum(slice_rows(a, 1, 2)); }).rel_error, kTol);
  EXPECT_LT(check_leaf(a, [&] { return weighted_sum(slice_cols(a, 1, 2)); }).rel_error, kTol);
  EXPECT_LT(check_leaf(a, [&] { return weighted_sum(gather_rows(a, {2, 0, 2, 1})); }).rel_error, kTol);
  EXPECT_LT(check_leaf(a, [&] { return weighted_sum(repeat_rows(a, 3)); }).rel_error, kTol);
  EXPECT_LT(check_leaf(a, [&] { return weighted_sum(mean_rows(a)); }).rel_error, kTol);
  EXPECT_LT(check_leaf(a, [&] { return weighted_sum(reshape(a, {2, 6})); }).rel_error, kTol);
  EXPECT_LT(check_leaf(a, [&] { return weighted_sum(add_n<double>({a, a, a})); }).rel_error, kTol);
  EXPECT_LT(check_leaf(a, [&] { return weighted_sum(embedding(a, {1, 1, 0})); }).rel_error, kTol);
}

TEST(Ops, ErrorPaths) {
  Rng rng(8);
  auto a = random_leaf({3, 4}, rng), b = random_leaf({2, 3}, rng);
  EXPECT_THROW(add(a, b), DimensionError);
  EXPECT_THROW(concat_rows<double>({a, b}), DimensionError);
  EXPECT_THROW(gather_rows(a, {3}), DimensionError);
  EXPECT_THROW(embedding(a, {5}), InputError);
  EXPECT_THROW(mean_rows(Var<double>(Tensor<double>({0, 4}))), InputError);
}

TEST(Attention, GradientAllInputs) {
  Rng rng(9);
  auto q = random_leaf({6, 8}, rng), k = random_leaf({10, 8}, rng), v = random_leaf({10, 8}, rng);
  auto f = [&] { return weighted_sum(attention(q, k, v, 2, 2)); };
  EXPECT_LT(check_leaf(q, f).rel_error, kTol);
  EXPECT_LT(check_leaf(k, f).rel_error, kTol);
  EXPECT_LT(check_leaf(v, f).rel_error, kTol);
}

TEST(Attention, SingleKeyCopiesValue) {
  Rng rng(10);
  auto q = random_leaf({3, 4}, rng), k = random_leaf({1, 4}, rng), v = random_leaf({1, 4}, rng);
  auto out = attention(q, k, v, 1).value();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(out.at(r, c), v.value().at(0, c));
}

TEST(Attention, GroupsAreIndependent) {
  Rng rng(11);
  auto q = random_leaf({4, 4}, rng), k = random_leaf({6, 4}, rng), v = random_leaf({6, 4}, rng);
  auto full = attention(q, k, v, 2, 2).value();
  auto first = attention(slice_rows(q, 0, 2), slice_rows(k, 0, 3), slice_rows(v, 0, 3), 2).value();
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(full.at(r, c), first.at(r, c), 1e-14);
}

TEST(Attention, LogRecordsStochasticRows) {
  Rng rng(12);
  AttentionLog<double> log;
  {
    AttentionLogScope<double> scope(log);
    attention(random_leaf({5, 8}, rng), random_leaf({7, 8}, rng), random_leaf({7, 8}, rng), 4);
  }
  ASSERT_FALSE(log.weights.empty());
  for (const auto& m : log.weights)
    for (int r = 0; r < m.rows(); ++r) {
      double s = 0;
      for (int c = 0; c < m.cols(); ++c) {
        EXPECT_GE(m.at(r, c), 0);
        s += m.at(r, c);
      }
      EXPECT_NEAR(s, 1, 1e-12);
    }
}

TEST(Attention, ErrorPaths) {
  Rng rng(13);
  auto q = random_leaf({2, 4}, rng), k = random_leaf({3, 4}, rng);
  EXPECT_THROW(attention(q, Var<double>(Tensor<double>({0, 4})), Var<double>(Tensor<double>({0, 4})), 1), InputError);
  EXPECT_THROW(attention(q, k, random_leaf({2, 4}, rng), 1), DimensionError);
  EXPECT_THROW(attention(q, k, k, 3), DimensionError);
}

TEST(Rng, DeterministicStreamAndState) {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.next(), b.next());
  const auto s = a.state();
  const double x = a.normal();
  Rng c;
  c.set_state(s);
  EXPECT_EQ(c.normal(), x);
}

TEST(ParamStore, RejectsDuplicatesAndUnknownNames) {
  ParamStore<float> ps;
  Rng rng(1);
  ps.xavier("w", 3, 4, rng);
  EXPECT_THROW(ps.zeros("w", {2}), ContractError);
  EXPECT_THROW(ps.get("missing"), ContractError);
  EXPECT_EQ(ps.count(), 12u);
}
