#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "gsdyn/metrics.hpp"
#include "support.hpp"

namespace gsdyn {
namespace {

using testing::Gen;

double chamfer_oracle(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  double sa = 0.0, sb = 0.0;
  for (const auto& p : a) {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& q : b) m = std::min(m, (p - q).squaredNorm());
    sa += std::sqrt(m);
  }
  for (const auto& q : b) {
    double m = std::numeric_limits<double>::infinity();
    for (const auto& p : a) m = std::min(m, (p - q).squaredNorm());
    sb += std::sqrt(m);
  }
  return 0.5 * (sa / a.size() + sb / b.size());
}

// Exhaustive minimum over permutations; the per-permutation sum runs in row
// order, the same order the library accumulates in.
double emd_oracle(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  std::vector<std::size_t> perm(a.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[perm[i]]).norm();
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(a.size());
}

TEST(Chamfer, HandCases) {
  const std::vector<Vec3> a{{0, 0, 0}}, b{{1, 0, 0}};
  EXPECT_EQ(metrics::chamfer(a, b), 1.0);
  Gen g(1);
  const auto p = g.points(10);
  EXPECT_EQ(metrics::chamfer(p, p), 0.0);
  EXPECT_THROW(metrics::chamfer(std::vector<Vec3>{}, p), Error);
}

TEST(Chamfer, MatchesBruteForceExactly) {
  Gen g(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = g.points(8), b = g.points(8);
    EXPECT_EQ(metrics::chamfer(a, b), chamfer_oracle(a, b));
  }
}

TEST(Emd, HandCases) {
  const std::vector<Vec3> a{{0, 0, 0}, {1, 0, 0}}, b{{1, 0, 0}, {0, 0, 0}};
  EXPECT_EQ(metrics::emd(a, b), 0.0);
  EXPECT_EQ(metrics::emd(a, a), 0.0);
  EXPECT_THROW(metrics::emd(a, std::vector<Vec3>{}), Error);
}

TEST(Emd, MatchesPermutationOracleExactly) {
  Gen g(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = g.points(6), b = g.points(6);
    EXPECT_EQ(metrics::emd(a, b), emd_oracle(a, b)) << "trial " << trial;
  }
}

TEST(Emd, SubsamplesToSmallerSet) {
  Gen g(4);
  const auto a = g.points(300), b = g.points(200);
  const double e1 = metrics::emd(a, b, 64, 7);
  EXPECT_EQ(e1, metrics::emd(a, b, 64, 7));
  EXPECT_GT(e1, 0.0);
  // Unequal sizes below the cap subsample the larger set only.
  const auto c = g.points(5);
  EXPECT_NO_THROW(metrics::emd(a, c));
}

TEST(MetricProperties, SymmetryAndChamferBelowEmd) {
  Gen g(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = static_cast<std::size_t>(g.integer(1, 20));
    const auto a = g.points(n), b = g.points(n);
    EXPECT_EQ(metrics::chamfer(a, b), metrics::chamfer(b, a));
    EXPECT_NEAR(metrics::emd(a, b), metrics::emd(b, a), 1e-12);
    EXPECT_LE(metrics::chamfer(a, b), metrics::emd(a, b) + 1e-12);
  }
}

std::vector<std::vector<Vec3>> tracks(Gen& g, std::size_t t, std::size_t n) {
  std::vector<std::vector<Vec3>> out;
  for (std::size_t f = 0; f < t; ++f) out.push_back(g.points(n));
  return out;
}

TEST(TrackEval, PerfectPrediction) {
  Gen g(6);
  const auto gt = tracks(g, 5, 7);
  const auto ev = metrics::track_eval(gt, gt);
  EXPECT_EQ(ev.mte_mm, 0.0);
  EXPECT_EQ(ev.delta_avg, 100.0);
  EXPECT_EQ(ev.survival, 100.0);
}

TEST(TrackEval, ConstantFourMillimeters) {
  Gen g(7);
  const auto gt = tracks(g, 6, 9);
  auto pred = gt;
  for (auto& f : pred)
    for (auto& p : f) p += Vec3(0.004, 0, 0);
  const auto ev = metrics::track_eval(pred, gt);
  EXPECT_EQ(ev.delta_per_threshold, (std::vector<double>{0.0, 100.0, 100.0, 100.0}));
  EXPECT_EQ(ev.delta_avg, 75.0);
  EXPECT_NEAR(ev.mte_mm, 4.0, 1e-9);
}

TEST(TrackEval, SurvivalStopsAtFirstFailure) {
  Gen g(8);
  const std::size_t frames = 10, n = 4;
  const auto gt = tracks(g, frames, n);
  auto pred = gt;
  for (std::size_t t = frames / 2; t < frames; ++t) pred[t][2] += Vec3(1.0, 0, 0);
  pred[frames - 1][2] = gt[frames - 1][2];  // recovering later does not count
  const auto ev = metrics::track_eval(pred, gt);
  EXPECT_NEAR(ev.survival, 100.0 * (frames * (n - 1) + frames / 2) / (frames * n), 1e-12);

  metrics::TrackEvalOptions per_frame;
  per_frame.survival_mode = metrics::SurvivalMode::kPerFrame;
  const auto ev2 = metrics::track_eval(pred, gt, per_frame);
  EXPECT_NEAR(ev2.survival, 100.0 * (frames * n - (frames / 2 - 1)) / (frames * n), 1e-12);
}

TEST(TrackEval, ShapeMismatchThrows) {
  Gen g(9);
  const auto a = tracks(g, 3, 4), b = tracks(g, 4, 4), c = tracks(g, 3, 5);
  EXPECT_THROW(metrics::track_eval(a, b), Error);
  EXPECT_THROW(metrics::track_eval(a, c), Error);
}

TEST(TrackEval, PropertyScalingErrorsUpIsMonotone) {
  Gen g(10);
  for (int trial = 0; trial < 50; ++trial) {
    const auto gt = tracks(g, 5, 6);
    std::vector<std::vector<Vec3>> err;
    for (std::size_t t = 0; t < 5; ++t) {
      std::vector<Vec3> row;
      for (std::size_t i = 0; i < 6; ++i) row.push_back(g.vec(-0.3, 0.3) * g.uniform(0.0, 0.1));
      err.push_back(row);
    }
    auto with_scale = [&](double s) {
      auto pred = gt;
      for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t i = 0; i < 6; ++i) pred[t][i] += s * err[t][i];
      return metrics::track_eval(pred, gt);
    };
    const double s = g.uniform(1.0, 20.0);
    const auto lo = with_scale(1.0), hi = with_scale(s);
    EXPECT_LE(hi.delta_avg, lo.delta_avg);
    EXPECT_LE(hi.survival, lo.survival);
    EXPECT_GE(hi.mte_mm, lo.mte_mm - 1e-12);
    EXPECT_GE(lo.delta_avg, 0.0);
    EXPECT_LE(lo.delta_avg, 100.0);
  }
}

TEST(TrackEval2d, OnAxisErrorConvertsBackToMeters) {
  CameraModel cam;
  const std::vector<std::vector<Vec3>> gt{{Vec3(0, 0, 1.0)}};
  const std::vector<std::vector<Vec3>> pred{{Vec3(0.004, 0, 1.0)}};
  const auto ev = metrics::track_eval_2d(pred, gt, cam);
  EXPECT_NEAR(ev.mte_mm, 4.0, 1e-9);
  const std::vector<std::vector<Vec3>> behind{{Vec3(0, 0, -1.0)}};
  EXPECT_EQ(metrics::track_eval_2d(behind, behind, cam).delta_avg, 100.0);
}

}  // namespace
}  // namespace gsdyn
