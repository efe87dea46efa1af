#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gsdyn/dyn_model.hpp"
#include "gsdyn/log.hpp"
#include "gsdyn/metrics.hpp"
#include "gsdyn/parallel.hpp"
#include "gsdyn/synth_world.hpp"

namespace gsdyn {

enum class CostMode { kCorrespondence, kChamfer };

inline std::string to_text(CostMode m) { return m == CostMode::kCorrespondence ? "correspondence" : "chamfer"; }
inline void from_text(const std::string& s, CostMode& m) {
  if (s == "correspondence") m = CostMode::kCorrespondence;
  else if (s == "chamfer") m = CostMode::kChamfer;
  else throw Error("unknown cost mode '" + s + "' (correspondence, chamfer)");
}

struct PlanConfig {
  int horizon = 10;
  int num_samples = 64;
  double noise_sigma = 0.02;  // m, per waypoint step
  double temperature = 0.05;  // 0 selects the single best sample
  bool normalize_costs = true;  // temperature is relative to the sample cost spread
  Vec3 bounds_lo{-0.35, -0.35, 0.0};
  Vec3 bounds_hi{0.35, 0.35, 0.15};
  double max_step = 0.02;  // m per step
  int mppi_iters = 3;      // refinement iterations per replanning step
  int mpc_steps = 10;
  CostMode cost = CostMode::kCorrespondence;
  int threads = 0;
  std::uint64_t rng_seed = 0;

  template <class F>
  void visit(F&& f) {
    f("horizon", horizon);
    f("num_samples", num_samples);
    f("noise_sigma", noise_sigma);
    f("temperature", temperature);
    f("normalize_costs", normalize_costs);
    f("bounds_lo", bounds_lo);
    f("bounds_hi", bounds_hi);
    f("max_step", max_step);
    f("mppi_iters", mppi_iters);
    f("mpc_steps", mpc_steps);
    f("cost", cost);
    f("threads", threads);
    f("rng_seed", rng_seed);
  }

  Aabb bounds() const { return {bounds_lo, bounds_hi}; }

  void validate() const {
    if (horizon < 1 || num_samples < 1 || mppi_iters < 1 || mpc_steps < 0 || threads < 0)
      throw Error("plan: horizon, num_samples and mppi_iters must be at least 1");
    if (!(noise_sigma > 0.0)) throw Error("plan: noise_sigma must be positive");
    if (!(temperature >= 0.0)) throw Error("plan: temperature must be non-negative");
    if (!(max_step > 0.0)) throw Error("plan: max_step must be positive");
    if (!(bounds_hi.array() >= bounds_lo.array()).all()) throw Error("plan: bounds_hi must not be below bounds_lo");
  }
};

/// Mean squared distance between corresponding vertices.
inline double cost(std::span<const Vec3> pred, std::span<const Vec3> target) {
  if (pred.size() != target.size() || pred.empty())
    throw Error("cost: predicted and target states differ in size (" + std::to_string(pred.size()) + " vs " +
                std::to_string(target.size()) + ")");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]).squaredNorm();
  return s / static_cast<double>(pred.size());
}

/// Correspondence-free variant: symmetric mean squared nearest-neighbor distance.
inline double chamfer_cost(std::span<const Vec3> pred, std::span<const Vec3> target) {
  if (pred.empty() || target.empty()) throw Error("cost: empty state");
  auto directed = [](std::span<const Vec3> a, std::span<const Vec3> b) {
    double s = 0.0;
    for (const auto& p : a) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : b) best = std::min(best, (p - q).squaredNorm());
      s += best;
    }
    return s / static_cast<double>(a.size());
  };
  return 0.5 * (directed(pred, target) + directed(target, pred));
}

inline double cost(std::span<const Vec3> pred, std::span<const Vec3> target, CostMode mode) {
  return mode == CostMode::kCorrespondence ? cost(pred, target) : chamfer_cost(pred, target);
}

/// Turns per-step deltas into waypoints from `start`: every step is cut to
/// max_step and every waypoint projected into the bounds. Projection onto a
/// box is non-expansive, so the cut survives it. `deltas` is rewritten to the
/// steps actually taken.
inline std::vector<Vec3> clamp_plan(const Vec3& start, std::vector<Vec3>& deltas, const PlanConfig& c) {
  const Aabb box = c.bounds();
  std::vector<Vec3> out;
  out.reserve(deltas.size());
  Vec3 prev = start;
  for (auto& d : deltas) {
    Vec3 step = d;
    const double len = step.norm();
    if (!(len <= c.max_step)) step *= len > 0.0 && std::isfinite(len) ? c.max_step / len : 0.0;
    const Vec3 next = box.clamp(prev + step);
    d = next - prev;
    out.push_back(next);
    prev = next;
  }
  return out;
}

/// MPPI sample weights. Temperature 0 puts all weight on the first minimum.
/// Non-finite costs get zero weight.
inline std::vector<double> mppi_weights(std::span<const double> costs, double temperature, bool normalize) {
  std::vector<double> w(costs.size(), 0.0);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t best = costs.size();
  for (std::size_t i = 0; i < costs.size(); ++i) {
    if (!std::isfinite(costs[i])) continue;
    if (costs[i] < lo) {
      lo = costs[i];
      best = i;
    }
    hi = std::max(hi, costs[i]);
  }
  if (best == costs.size()) throw Error("mppi: every sampled rollout produced a non-finite cost");
  if (temperature == 0.0) {
    w[best] = 1.0;
    return w;
  }
  const double spread = normalize ? std::max(hi - lo, 1e-300) : 1.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < costs.size(); ++i) {
    if (!std::isfinite(costs[i])) continue;
    w[i] = std::exp(-(costs[i] - lo) / (spread * temperature));
    sum += w[i];
  }
  for (auto& x : w) x /= sum;
  return w;
}

struct PlanResult {
  std::vector<Vec3> actions;     // H absolute effector waypoints
  std::vector<Vec3> deltas;      // the same plan as per-step moves from the start
  double predicted_cost = 0.0;   // terminal cost of `actions` under the model
  std::vector<double> cost_trace;  // best cost after each iteration
  std::vector<double> weight_sums;  // per iteration, for checking normalization
};

/// Everything sampled during one mppi_plan call, for inspection.
struct MppiTrace {
  std::vector<std::vector<std::vector<Vec3>>> waypoints;  // [iteration][sample][step]
  std::vector<std::vector<double>> costs;                 // [iteration][sample]
  std::vector<std::vector<double>> weights;               // [iteration][sample]
};

namespace detail {

inline std::uint64_t plan_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * (a + 1)) ^ (0xc2b2ae3d27d4eb4fULL * (b + 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Sampling-based trajectory optimization over the learned model. Each of
/// `mppi_iters` iterations perturbs the mean plan K times (sample 0 is the
/// unperturbed mean when K > 1), rolls every sample out, and moves the mean to
/// the weighted average. The best plan seen is returned.
inline PlanResult mppi_plan(const DynModelParams& params, const ControlGraph& g0, std::span<const Vec3> target,
                            const PlanConfig& c, std::span<const Vec3> warm_start = {}, std::uint64_t stream = 0,
                            MppiTrace* trace = nullptr) {
  c.validate();
  if (c.cost == CostMode::kCorrespondence && target.size() != g0.num_objects())
    throw Error("mppi: target has " + std::to_string(target.size()) + " vertices, graph has " +
                std::to_string(g0.num_objects()));
  const Vec3 start = g0.positions.back();
  if (!c.bounds().contains(start, 1e-9)) throw Error("mppi: effector starts outside the action bounds");
  const std::size_t h = static_cast<std::size_t>(c.horizon);
  const std::size_t kk = static_cast<std::size_t>(c.num_samples);
  const std::size_t no = g0.num_objects();

  std::vector<Vec3> mean(h, Vec3::Zero());
  for (std::size_t i = 0; i < std::min(h, warm_start.size()); ++i) mean[i] = warm_start[i];
  clamp_plan(start, mean, c);

  PlanResult best;
  best.predicted_cost = std::numeric_limits<double>::infinity();
  std::vector<std::vector<Vec3>> samples(kk), waypoints(kk);
  std::vector<double> costs(kk);
  auto evaluate = [&](const std::vector<Vec3>& actions) {
    try {
      const auto frames = rollout(params, g0, actions);
      const std::span<const Vec3> objects(frames.back().data(), no);
      return cost(objects, target, c.cost);
    } catch (const Error&) {
      return std::numeric_limits<double>::quiet_NaN();
    }
  };

  for (int it = 0; it < c.mppi_iters; ++it) {
    std::mt19937_64 rng(detail::plan_seed(c.rng_seed, stream, static_cast<std::uint64_t>(it)));
    std::normal_distribution<double> noise(0.0, c.noise_sigma);
    for (std::size_t s = 0; s < kk; ++s) {
      samples[s] = mean;
      if (kk > 1 && s == 0) continue;
      for (auto& d : samples[s]) d += Vec3(noise(rng), noise(rng), noise(rng));
    }
    for (std::size_t s = 0; s < kk; ++s) waypoints[s] = clamp_plan(start, samples[s], c);
    parallel_for(kk, static_cast<unsigned>(c.threads), [&](std::size_t s) { costs[s] = evaluate(waypoints[s]); });

    const auto w = mppi_weights(costs, c.temperature, c.normalize_costs);
    if (trace) {
      trace->waypoints.push_back(waypoints);
      trace->costs.push_back(costs);
      trace->weights.push_back(w);
    }
    double wsum = 0.0;
    for (std::size_t s = 0; s < kk; ++s) {
      wsum += w[s];
      if (std::isfinite(costs[s]) && costs[s] < best.predicted_cost) {
        best.predicted_cost = costs[s];
        best.actions = waypoints[s];
        best.deltas = samples[s];
      }
    }
    best.weight_sums.push_back(wsum);
    std::fill(mean.begin(), mean.end(), Vec3::Zero());
    for (std::size_t s = 0; s < kk; ++s)
      for (std::size_t i = 0; i < h; ++i) mean[i] += w[s] * samples[s][i];
    best.cost_trace.push_back(best.predicted_cost);
  }
  // The final mean is usually better than any single sample.
  auto final_actions = clamp_plan(start, mean, c);
  const double final_cost = evaluate(final_actions);
  if (std::isfinite(final_cost) && final_cost < best.predicted_cost) {
    best.predicted_cost = final_cost;
    best.actions = std::move(final_actions);
    best.deltas = mean;
    best.cost_trace.back() = final_cost;
  }
  return best;
}

// --- closed loop --------------------------------------------------------------

struct MpcResult {
  std::vector<Vec3> actions;                  // executed waypoints
  std::vector<double> chamfer;                // dense Chamfer to target, before each step and after the last
  std::vector<double> predicted_cost;         // planner's terminal cost at each step
  std::vector<std::vector<Vec3>> frames;      // dense states, initial first
  std::vector<std::size_t> control_indices;   // tracked particles used as vertices
};

/// Replans every step, executes the first waypoint in `world`, and re-observes
/// the same control particles.
inline MpcResult mpc_execute(const DynModelParams& params, World& world, std::span<const Vec3> target_dense,
                             const PlanConfig& c) {
  c.validate();
  if (target_dense.size() != world.positions().size())
    throw Error("mpc: target has " + std::to_string(target_dense.size()) + " particles, world has " +
                std::to_string(world.positions().size()));
  const auto& mc = params.config;
  const std::size_t k = static_cast<std::size_t>(mc.k);
  MpcResult out;
  out.control_indices = farthest_point_sample(world.positions(), MinSpacing{mc.d_v});
  const std::vector<Vec3> target = c.cost == CostMode::kCorrespondence
                                       ? gather(target_dense, out.control_indices)
                                       : gather(target_dense, farthest_point_sample(target_dense, MinSpacing{mc.d_v}));
  HistorySource hist;
  hist.object_frames.push_back(world.positions());
  hist.effector_positions.push_back(world.effector());
  out.frames.push_back(world.positions());
  out.chamfer.push_back(metrics::chamfer(world.positions(), target_dense));
  std::vector<Vec3> warm;
  const double table = world.config().table_height;
  for (int step = 0; step < c.mpc_steps; ++step) {
    HistorySource recent;
    const std::size_t from = hist.object_frames.size() > k + 1 ? hist.object_frames.size() - (k + 1) : 0;
    recent.object_frames.assign(hist.object_frames.begin() + static_cast<std::ptrdiff_t>(from), hist.object_frames.end() - 1);
    recent.effector_positions.assign(hist.effector_positions.begin() + static_cast<std::ptrdiff_t>(from),
                                     hist.effector_positions.end() - 1);
    const auto g = build_graph_at(out.control_indices, world.positions(), world.effector(), mc.d_e, k,
                                  recent.object_frames.empty() ? HistorySource{} : recent, table);
    const auto plan = mppi_plan(params, g, target, c, warm, static_cast<std::uint64_t>(step));
    const Vec3 before = world.effector();
    const auto prev = world.positions();
    world.step(plan.actions.front());
    for (std::size_t i = 0; i < prev.size(); ++i)
      if (!((world.positions()[i] - prev[i]).norm() < 0.1))
        throw Error("mpc: simulation exploded at step " + std::to_string(step) + "; use a smaller timestep");
    log::debug("mpc step " + std::to_string(step) + ": moved " + to_text((plan.actions.front() - before).norm()) +
               " m, predicted cost " + to_text(plan.predicted_cost));
    out.actions.push_back(plan.actions.front());
    out.predicted_cost.push_back(plan.predicted_cost);
    hist.object_frames.push_back(world.positions());
    hist.effector_positions.push_back(world.effector());
    out.frames.push_back(world.positions());
    out.chamfer.push_back(metrics::chamfer(world.positions(), target_dense));
    // Warm start: drop the executed step, repeat the last one.
    warm.assign(plan.deltas.begin() + 1, plan.deltas.end());
    warm.push_back(plan.deltas.back());
  }
  return out;
}

// --- task scenarios -------------------------------------------------------------

enum class ScenarioKind { kRopeStraighten, kBlobRelocate, kHold };

inline std::string to_text(ScenarioKind s) {
  switch (s) {
    case ScenarioKind::kRopeStraighten: return "rope-straighten";
    case ScenarioKind::kBlobRelocate: return "blob-relocate";
    case ScenarioKind::kHold: return "hold";
  }
  return "?";
}
inline void from_text(const std::string& s, ScenarioKind& k) {
  if (s == "rope-straighten") k = ScenarioKind::kRopeStraighten;
  else if (s == "blob-relocate") k = ScenarioKind::kBlobRelocate;
  else if (s == "hold") k = ScenarioKind::kHold;
  else throw Error("unknown scenario '" + s + "' (rope-straighten, blob-relocate, hold)");
}

/// A start state, where the effector begins, and a target state.
struct Scenario {
  WorldConfig world;
  std::vector<Vec3> initial;
  Vec3 effector_start = Vec3::Zero();
  std::vector<Vec3> target;
  Vec3 bounds_lo = Vec3::Zero(), bounds_hi = Vec3::Zero();  // action bounds suited to the task
};

/// Bent rope with the gripper on one end. The target is where a scripted pull
/// of that end leaves the rope, so it is reachable by construction.
inline Scenario rope_straightening(WorldConfig w, std::uint64_t seed, double pull = 0.12, double bend = 1.0) {
  w.object = ObjectKind::kRope;
  w.effector = EffectorKind::kGripper;
  w.rng_seed = seed;
  w.initial_bend = bend;
  Scenario sc;
  sc.world = w;
  sc.initial = initial_positions(w);
  sc.effector_start = sc.initial.front();
  const std::size_t back = std::min<std::size_t>(8, sc.initial.size() - 1);
  Vec3 dir = sc.initial.front() - sc.initial[back];
  dir.z() = 0.0;
  dir.normalize();
  const double speed = 0.015;
  std::vector<Vec3> script{sc.effector_start};
  const int steps = static_cast<int>(std::ceil(pull / speed));
  for (int s = 1; s <= steps; ++s) script.push_back(w.workspace().clamp(sc.effector_start + (pull * s / steps) * dir));
  for (int s = 0; s < 4; ++s) script.push_back(script.back());
  sc.target = simulate(w, script, sc.initial).positions.back();
  sc.bounds_lo = w.workspace_lo;
  sc.bounds_hi = w.workspace_hi;
  sc.bounds_lo.z() = sc.bounds_hi.z() = w.table_height;  // drag along the table
  return sc;
}

/// Blob pushed sideways: the target is the start state translated by `shift`.
inline Scenario blob_relocation(WorldConfig w, std::uint64_t seed, double shift = 0.2) {
  w.object = ObjectKind::kBlob;
  w.effector = EffectorKind::kPusher;
  w.rng_seed = seed;
  Scenario sc;
  sc.world = w;
  sc.initial = initial_positions(w);
  const double a = 2.0 * std::numbers::pi * static_cast<double>(seed % 8) / 8.0;
  const Vec3 dir(std::cos(a), std::sin(a), 0.0);
  const Vec3 mid = centroid(sc.initial);
  double reach = 0.0;
  for (const auto& p : sc.initial) reach = std::max(reach, (p - mid).dot(dir));
  sc.effector_start = w.workspace().clamp(Vec3(mid.x(), mid.y(), w.table_height) -
                                          (reach + w.pusher_radius + 0.01) * dir);
  for (const auto& p : sc.initial) sc.target.push_back(p + shift * dir);
  sc.bounds_lo = w.workspace_lo;
  sc.bounds_hi = w.workspace_hi;
  sc.bounds_lo.z() = sc.bounds_hi.z() = w.table_height;
  return sc;
}

/// Target equals the start; any motion only adds error.
inline Scenario hold_still(WorldConfig w, std::uint64_t seed) {
  w.rng_seed = seed;
  Scenario sc;
  sc.world = w;
  sc.initial = initial_positions(w);
  sc.target = sc.initial;
  sc.effector_start = w.effector == EffectorKind::kGripper ? sc.initial.front()
                                                            : centroid(sc.initial) + Vec3(0.0, 0.0, 0.1);
  sc.effector_start = w.workspace().clamp(sc.effector_start);
  sc.bounds_lo = w.workspace_lo;
  sc.bounds_hi = w.workspace_hi;
  return sc;
}

inline Scenario make_scenario(ScenarioKind kind, const WorldConfig& w, std::uint64_t seed) {
  switch (kind) {
    case ScenarioKind::kRopeStraighten: return rope_straightening(w, seed);
    case ScenarioKind::kBlobRelocate: return blob_relocation(w, seed);
    case ScenarioKind::kHold: return hold_still(w, seed);
  }
  throw Error("unknown scenario");
}

/// Plan settings with the action box narrowed to the scenario's bounds.
inline PlanConfig for_scenario(PlanConfig c, const Scenario& sc) {
  c.bounds_lo = c.bounds_lo.cwiseMax(sc.bounds_lo);
  c.bounds_hi = c.bounds_hi.cwiseMin(sc.bounds_hi);
  if (!(c.bounds_hi.array() >= c.bounds_lo.array()).all())
    throw Error("plan bounds do not overlap the scenario's action bounds");
  return c;
}

}  // namespace gsdyn
