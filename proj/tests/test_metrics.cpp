#include <gtest/gtest.h>

#include <chrono>

#include "bifit/metrics.hpp"
#include "bifit/nn.hpp"
#include "metric_oracle.hpp"

using namespace bifit;
using namespace bifit::testkit;

namespace {
std::vector<std::uint8_t> square(int H, int W, int y0, int x0, int side) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(H) * W, 0);
  for (int y = y0; y < y0 + side; ++y)
    for (int x = x0; x < x0 + side; ++x) m[y * W + x] = 1;
  return m;
}
}  // namespace

TEST(RegionSimilarity, HandCounts) {
  // gt covers the left half of a 4x4 image, pred its top half of that.
  std::vector<std::uint8_t> gt(16, 0), pred(16, 0);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 2; ++x) gt[y * 4 + x] = 1;
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) pred[y * 4 + x] = 1;
  EXPECT_EQ(region_similarity(pred, gt), 0.5);
  EXPECT_EQ(region_similarity(gt, gt), 1.0);
  EXPECT_EQ(region_similarity(std::vector<std::uint8_t>(16, 0), std::vector<std::uint8_t>(16, 0)), 1.0);
  std::vector<std::uint8_t> other(16, 0);
  other[15] = 1;
  EXPECT_EQ(region_similarity(other, gt), 0.0);
  EXPECT_THROW(region_similarity(std::vector<std::uint8_t>(15, 0), gt), ContractError);
}

TEST(ContourAccuracy, OnePixelShiftIsWithinTolerance) {
  ASSERT_GE(boundary_tolerance(64, 64), 1);
  const auto gt = square(64, 64, 20, 20, 16);
  EXPECT_EQ(contour_accuracy(square(64, 64, 20, 21, 16), gt, 64, 64), 1.0);
  EXPECT_EQ(contour_accuracy(square(64, 64, 21, 20, 16), gt, 64, 64), 1.0);
  // A diagonal shift moves the corner sqrt(2) px, outside the radius-1 disk.
  const double diag = contour_accuracy(square(64, 64, 21, 21, 16), gt, 64, 64);
  EXPECT_LT(diag, 1.0);
  EXPECT_GT(diag, 0.95);
  EXPECT_LT(contour_accuracy(square(64, 64, 20, 26, 16), gt, 64, 64), 1.0);
}

TEST(ContourAccuracy, EmptyAndIdentical) {
  const auto gt = square(16, 16, 4, 4, 5);
  const std::vector<std::uint8_t> empty(256, 0);
  EXPECT_EQ(contour_accuracy(empty, gt, 16, 16), 0.0);
  EXPECT_EQ(contour_accuracy(gt, empty, 16, 16), 0.0);
  EXPECT_EQ(contour_accuracy(empty, empty, 16, 16), 1.0);
  EXPECT_EQ(contour_accuracy(gt, gt, 16, 16), 1.0);
  EXPECT_THROW(contour_accuracy(gt, gt, 16, 15), ContractError);
}

TEST(ContourAccuracy, ToleranceFollowsImageDiagonal) {
  EXPECT_EQ(boundary_tolerance(3, 3), 1);
  EXPECT_EQ(boundary_tolerance(64, 64), 1);
  EXPECT_EQ(boundary_tolerance(128, 128), 2);
  EXPECT_EQ(boundary_tolerance(480, 854), 8);
}

TEST(ContourAccuracy, SymmetricInArguments) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::uint8_t> a(64), b(64);
    for (int k = 0; k < 64; ++k) {
      a[k] = rng.uniform() < 0.4;
      b[k] = rng.uniform() < 0.4;
    }
    EXPECT_EQ(contour_accuracy(a, b, 8, 8), contour_accuracy(b, a, 8, 8));
    EXPECT_EQ(region_similarity(a, b), region_similarity(b, a));
  }
}

TEST(JAndF, ArithmeticMeans) {
  const auto r = j_and_f({0.6}, {0.8});
  EXPECT_DOUBLE_EQ(r.jf, 0.7);
  EXPECT_DOUBLE_EQ(average_samples({{0.4, 0.0, 0.2}, {0.8, 0.0, 0.4}}).j, 0.6);
  EXPECT_THROW(j_and_f({}, {}), ContractError);
  EXPECT_THROW(j_and_f({0.1, 0.2}, {0.3}), ContractError);
  EXPECT_THROW(average_samples({}), ContractError);
}

TEST(PrecisionAtK, CountsStrictlyAbove) {
  EXPECT_DOUBLE_EQ(precision_at_k({0.6, 0.4, 0.8}, 0.5), 2.0 / 3);
  EXPECT_EQ(precision_at_k({1.0, 1.0}, 0.9), 1.0);
  EXPECT_EQ(precision_at_k({0.3, 0.7}, 0.95), 0.0);
  EXPECT_THROW(precision_at_k({}, 0.5), ContractError);
}

TEST(PrecisionAtK, MonotoneNonIncreasingInK) {
  Rng rng(2);
  std::vector<double> ious(100);
  for (auto& v : ious) v = rng.uniform();
  double prev = 1.0;
  for (int k = 0; k <= 100; ++k) {
    const double p = precision_at_k(ious, k / 100.0);
    EXPECT_LE(p, prev);
    prev = p;
  }
}

TEST(MeanAveragePrecision, ThresholdEnumeration) {
  EXPECT_DOUBLE_EQ(map_over_thresholds({0.6}), 0.2);
  EXPECT_EQ(map_over_thresholds({1.0, 1.0}), 1.0);
  EXPECT_EQ(map_over_thresholds({0.0}), 0.0);
  EXPECT_EQ(map_thresholds().size(), 10u);
}

TEST(OverallMeanIou, HandArithmetic) {
  const auto r = overall_and_mean_iou({2, 3}, {8, 4});
  EXPECT_DOUBLE_EQ(r.overall, 5.0 / 12);
  EXPECT_DOUBLE_EQ(r.mean, 0.5);
  const auto one = overall_and_mean_iou({3}, {7});
  EXPECT_DOUBLE_EQ(one.overall, one.mean);
  // An empty frame counts as IoU 1 for the mean and adds nothing to the sums.
  const auto z = overall_and_mean_iou({0, 2}, {0, 4});
  EXPECT_DOUBLE_EQ(z.overall, 0.5);
  EXPECT_DOUBLE_EQ(z.mean, 0.75);
}

TEST(MetricOracle, AllThreeByThreePairsWithinAMinute) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto s = check_all_3x3_pairs();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_EQ(s.pairs, 512LL * 512);
  EXPECT_EQ(s.mismatches, 0) << s.first_mismatch;
  EXPECT_LT(secs, 60.0);
}

TEST(MetricsAccumulator, ReportJsonAndCsv) {
  MetricsAccumulator acc;
  const auto gt = square(8, 8, 2, 2, 4);
  std::vector<std::uint8_t> two(gt);
  two.insert(two.end(), gt.begin(), gt.end());
  acc.add_sample(two, two, 2, 8, 8);
  const auto r = acc.report();
  EXPECT_EQ(r.jf, 1.0);
  EXPECT_EQ(r.samples, 1);
  EXPECT_EQ(r.frames, 2);
  const auto j = r.to_json();
  for (const char* k : {"j", "f", "jf", "precision_at_0.5", "precision_at_0.9", "overall_iou", "mean_iou", "map"})
    EXPECT_TRUE(j.contains(k)) << k;
  const auto header = MetricsReport::csv_header(), row = r.csv_row();
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
  EXPECT_THROW(acc.add_sample(gt, gt, 2, 8, 8), ContractError);
  EXPECT_THROW(MetricsAccumulator{}.report(), ContractError);
}
