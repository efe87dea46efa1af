#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "gsdyn/camera.hpp"
#include "gsdyn/geom.hpp"

namespace gsdyn::metrics {

/// Symmetric Chamfer distance: the average of the two mean nearest-neighbor
/// distances.
inline double chamfer(std::span<const Vec3> a, std::span<const Vec3> b) {
  if (a.empty() || b.empty()) throw Error("chamfer: empty point set");
  auto directed = [](std::span<const Vec3> from, std::span<const Vec3> to) {
    double sum = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, (p - q).squaredNorm());
      sum += std::sqrt(best);
    }
    return sum / static_cast<double>(from.size());
  };
  return 0.5 * (directed(a, b) + directed(b, a));
}

/// Minimum-cost perfect matching on a square cost matrix (row-major, n x n).
/// Returns assignment[row] = column. Shortest augmenting path with potentials.
inline std::vector<std::size_t> hungarian(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw Error("hungarian: cost matrix is not n x n");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based internally; column 0 is a virtual source.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= n; ++j) assignment[match[j] - 1] = j - 1;
  return assignment;
}

inline constexpr std::size_t kEmdCap = 128;

/// Earth mover's distance: mean matched distance under the optimal one-to-one
/// assignment. Both sets are uniformly subsampled (seeded) to
/// min(|A|, |B|, cap) points first; a set already of that size is used whole.
inline double emd(std::span<const Vec3> a, std::span<const Vec3> b, std::size_t cap = kEmdCap,
                  std::uint64_t seed = 0) {
  if (a.empty() || b.empty()) throw Error("emd: empty point set");
  const std::size_t m = std::min({a.size(), b.size(), cap});
  std::mt19937_64 rng(seed);
  auto pick = [&](std::span<const Vec3> s) {
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (s.size() > m) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(m);
      std::sort(idx.begin(), idx.end());
    }
    return gather(s, idx);
  };
  const auto pa = pick(a);
  const auto pb = pick(b);
  std::vector<double> cost(m * m);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) cost[i * m + j] = (pa[i] - pb[j]).norm();
  const auto assign = hungarian(cost, m);
  double sum = 0.0;
  for (std::size_t i = 0; i < m; ++i) sum += cost[i * m + assign[i]];
  return sum / static_cast<double>(m);
}

enum class SurvivalMode {
  kUntilFirstFailure,  // a track stops counting at its first failure
  kPerFrame,           // every (t, i) pair below the threshold counts
};

struct TrackEvalOptions {
  std::vector<double> thresholds_mm{2.0, 4.0, 8.0, 16.0};
  double survival_threshold_m = 0.5;
  SurvivalMode survival_mode = SurvivalMode::kUntilFirstFailure;
};

struct TrackEval {
  double mte_mm = 0.0;
  double delta_avg = 0.0;  // percent
  double survival = 0.0;   // percent
  std::vector<double> delta_per_threshold;  // percent, one per threshold
};

namespace detail {

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

// errors_m[t][i] in meters; NaN marks a pair that cannot be evaluated.
inline TrackEval summarize(const std::vector<std::vector<double>>& errors_m, const TrackEvalOptions& opt) {
  TrackEval ev;
  std::vector<double> all_mm;
  const std::size_t frames = errors_m.size();
  const std::size_t tracks = frames ? errors_m[0].size() : 0;
  for (const auto& row : errors_m)
    for (double e : row)
      if (!std::isnan(e)) all_mm.push_back(e * 1000.0);
  ev.mte_mm = median(all_mm);
  // Errors at or below a threshold count as accurate. The slack absorbs
  // representation noise in values that are nominally on the threshold.
  for (double thr : opt.thresholds_mm) {
    std::size_t ok = 0;
    for (double e : all_mm) ok += e <= thr * (1.0 + 1e-9) ? 1 : 0;
    ev.delta_per_threshold.push_back(all_mm.empty() ? 100.0 : 100.0 * static_cast<double>(ok) / all_mm.size());
  }
  ev.delta_avg = ev.delta_per_threshold.empty()
                     ? 0.0
                     : std::accumulate(ev.delta_per_threshold.begin(), ev.delta_per_threshold.end(), 0.0) /
                           static_cast<double>(ev.delta_per_threshold.size());
  std::size_t alive = 0, total = 0;
  for (std::size_t i = 0; i < tracks; ++i) {
    bool failed = false;
    for (std::size_t t = 0; t < frames; ++t) {
      const double e = errors_m[t][i];
      if (std::isnan(e)) continue;
      ++total;
      const bool ok = e < opt.survival_threshold_m;
      if (opt.survival_mode == SurvivalMode::kUntilFirstFailure) {
        failed = failed || !ok;
        alive += failed ? 0 : 1;
      } else {
        alive += ok ? 1 : 0;
      }
    }
  }
  ev.survival = total ? 100.0 * static_cast<double>(alive) / static_cast<double>(total) : 100.0;
  return ev;
}

inline void check_shapes(const std::vector<std::vector<Vec3>>& pred, const std::vector<std::vector<Vec3>>& gt) {
  if (pred.size() != gt.size())
    throw Error("track_eval: frame count mismatch (" + std::to_string(pred.size()) + " vs " +
                std::to_string(gt.size()) + ")");
  for (std::size_t t = 0; t < pred.size(); ++t)
    if (pred[t].size() != gt[t].size() || pred[t].size() != pred[0].size())
      throw Error("track_eval: point count mismatch in frame " + std::to_string(t));
}

}  // namespace detail

/// Tracking metrics over aligned T x N trajectories (meters in, mm / % out).
inline TrackEval track_eval(const std::vector<std::vector<Vec3>>& pred, const std::vector<std::vector<Vec3>>& gt,
                            const TrackEvalOptions& opt = {}) {
  detail::check_shapes(pred, gt);
  std::vector<std::vector<double>> err(pred.size());
  for (std::size_t t = 0; t < pred.size(); ++t) {
    err[t].resize(pred[t].size());
    for (std::size_t i = 0; i < pred[t].size(); ++i) err[t][i] = (pred[t][i] - gt[t][i]).norm();
  }
  return detail::summarize(err, opt);
}

/// Image-space variant: both tracks are projected through `camera` and the
/// pixel error is converted back to meters at the ground-truth depth, so the
/// same mm thresholds apply. Points behind the camera are skipped.
inline TrackEval track_eval_2d(const std::vector<std::vector<Vec3>>& pred, const std::vector<std::vector<Vec3>>& gt,
                               const CameraModel& camera, const TrackEvalOptions& opt = {}) {
  detail::check_shapes(pred, gt);
  std::vector<std::vector<double>> err(pred.size());
  const double f = 0.5 * (camera.fx + camera.fy);
  for (std::size_t t = 0; t < pred.size(); ++t) {
    err[t].assign(pred[t].size(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t i = 0; i < pred[t].size(); ++i) {
      const auto pp = camera.project(pred[t][i]);
      const auto pg = camera.project(gt[t][i]);
      if (!pp || !pg) continue;
      err[t][i] = (*pp - *pg).norm() * camera.to_camera(gt[t][i]).z() / f;
    }
  }
  return detail::summarize(err, opt);
}

}  // namespace gsdyn::metrics
