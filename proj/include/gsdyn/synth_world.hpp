#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "gsdyn/config.hpp"
#include "gsdyn/gaussians.hpp"
#include "gsdyn/geom.hpp"
#include "gsdyn/io.hpp"

namespace gsdyn {

enum class ObjectKind { kRope, kCloth, kBlob };
enum class EffectorKind : std::uint8_t { kPusher = 0, kGripper = 1 };

inline std::string to_text(ObjectKind k) {
  switch (k) {
    case ObjectKind::kRope: return "rope";
    case ObjectKind::kCloth: return "cloth";
    case ObjectKind::kBlob: return "blob";
  }
  return "?";
}
inline void from_text(const std::string& s, ObjectKind& k) {
  if (s == "rope") k = ObjectKind::kRope;
  else if (s == "cloth") k = ObjectKind::kCloth;
  else if (s == "blob") k = ObjectKind::kBlob;
  else throw Error("unknown object kind '" + s + "' (rope, cloth, blob)");
}
inline std::string to_text(EffectorKind k) { return k == EffectorKind::kPusher ? "pusher" : "gripper"; }
inline void from_text(const std::string& s, EffectorKind& k) {
  if (s == "pusher") k = EffectorKind::kPusher;
  else if (s == "gripper") k = EffectorKind::kGripper;
  else throw Error("unknown effector kind '" + s + "' (pusher, gripper)");
}

/// Mass-spring world description. Lengths in meters, time in seconds.
struct WorldConfig {
  ObjectKind object = ObjectKind::kRope;
  EffectorKind effector = EffectorKind::kGripper;

  int rope_particles = 64;
  double rope_length = 0.5;
  int cloth_rows = 10;
  int cloth_cols = 10;
  double cloth_spacing = 0.025;
  Vec3 blob_radii{0.06, 0.045, 0.035};
  double blob_spacing = 0.02;
  double initial_bend = 0.6;  // radians of random heading variation along a rope
  Vec3 object_center{0.0, 0.0, 0.0};

  double particle_mass = 0.002;
  double stiffness = 400.0;          // N/m, stretch springs
  double bend_ratio = 0.01;          // bend spring stiffness / stiffness
  double shear_ratio = 0.25;         // cloth shear springs
  double lattice_ratio = 0.2;        // blob lattice springs (each particle has up to 26)
  double cloth_compression = 0.05;   // cloth springs resist compression this much less (fabric buckles)
  double damping = 0.1;              // N s/m along each spring
  double drag = 1.0;                 // 1/s, global velocity damping
  double friction = 0.4;             // Coulomb coefficient against the table
  double gravity = 9.81;
  double timestep = 1e-3;
  double fps = 15.0;
  double table_height = 0.0;

  double pusher_radius = 0.015;
  double pusher_height = 0.08;
  double contact_stiffness = 1000.0;
  double contact_damping = 0.5;
  double grasp_radius = 0.012;

  int frames = 150;
  Vec3 workspace_lo{-0.35, -0.35, 0.0};
  Vec3 workspace_hi{0.35, 0.35, 0.15};
  double max_action_step = 0.05;
  double action_speed_min = 0.005;
  double action_speed_max = 0.02;
  double lift_height = 0.03;
  std::uint64_t rng_seed = 0;

  template <class F>
  void visit(F&& f) {
    f("object", object);
    f("effector", effector);
    f("rope_particles", rope_particles);
    f("rope_length", rope_length);
    f("cloth_rows", cloth_rows);
    f("cloth_cols", cloth_cols);
    f("cloth_spacing", cloth_spacing);
    f("blob_radii", blob_radii);
    f("blob_spacing", blob_spacing);
    f("initial_bend", initial_bend);
    f("object_center", object_center);
    f("particle_mass", particle_mass);
    f("stiffness", stiffness);
    f("bend_ratio", bend_ratio);
    f("shear_ratio", shear_ratio);
    f("lattice_ratio", lattice_ratio);
    f("cloth_compression", cloth_compression);
    f("damping", damping);
    f("drag", drag);
    f("friction", friction);
    f("gravity", gravity);
    f("timestep", timestep);
    f("fps", fps);
    f("table_height", table_height);
    f("pusher_radius", pusher_radius);
    f("pusher_height", pusher_height);
    f("contact_stiffness", contact_stiffness);
    f("contact_damping", contact_damping);
    f("grasp_radius", grasp_radius);
    f("frames", frames);
    f("workspace_lo", workspace_lo);
    f("workspace_hi", workspace_hi);
    f("max_action_step", max_action_step);
    f("action_speed_min", action_speed_min);
    f("action_speed_max", action_speed_max);
    f("lift_height", lift_height);
    f("rng_seed", rng_seed);
  }

  Aabb workspace() const { return {workspace_lo, workspace_hi}; }
  int substeps_per_frame() const { return std::max(1, static_cast<int>(std::lround(1.0 / (fps * timestep)))); }

  void validate() const {
    if (!(timestep > 0.0)) throw Error("world: timestep must be positive");
    if (!(stiffness > 0.0)) throw Error("world: stiffness must be positive");
    if (!(fps > 0.0)) throw Error("world: fps must be positive");
    if (!(particle_mass > 0.0)) throw Error("world: particle_mass must be positive");
    if (rope_particles < 2 || cloth_rows < 2 || cloth_cols < 2) throw Error("world: particle counts must be at least 2");
    if (!(rope_length > 0.0 && cloth_spacing > 0.0 && blob_spacing > 0.0)) throw Error("world: sizes must be positive");
    if (frames < 2) throw Error("world: frames must be at least 2");
    if (!(action_speed_min > 0.0 && action_speed_max >= action_speed_min && action_speed_max < max_action_step))
      throw Error("world: action speeds must satisfy 0 < min <= max < max_action_step");
    if (!(workspace_hi.array() > workspace_lo.array()).all()) throw Error("world: empty workspace");
  }
};

/// Dense particle tracks and the synchronized end-effector positions.
struct TrackedSequence {
  std::vector<std::vector<Vec3>> positions;   // T x N
  std::vector<Vec3> actions;                  // T
  EffectorKind effector_kind = EffectorKind::kGripper;
  std::vector<std::vector<std::uint8_t>> grasp_mask;  // T x N, gripper only (all zero for a pusher)
  double fps = 15.0;
  double table_height = 0.0;

  std::size_t frames() const { return positions.size(); }
  std::size_t particles() const { return positions.empty() ? 0 : positions[0].size(); }
};

struct Spring {
  std::uint32_t i, j;
  double rest;
  double k;
  double k_compressed;  // used when shorter than rest
};

// --- object construction ----------------------------------------------------

inline std::vector<Vec3> initial_positions(const WorldConfig& c) {
  std::mt19937_64 rng(c.rng_seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  const double yaw = two_pi * 0.5 * (unit(rng) + 1.0);
  std::vector<Vec3> pts;
  switch (c.object) {
    case ObjectKind::kRope: {
      const int n = c.rope_particles;
      const double ds = c.rope_length / (n - 1);
      double amp[3], phase[3];
      for (int m = 0; m < 3; ++m) {
        amp[m] = unit(rng) * c.initial_bend / (m + 1);
        phase[m] = two_pi * 0.5 * (unit(rng) + 1.0);
      }
      Vec3 p = Vec3::Zero();
      pts.push_back(p);
      for (int i = 1; i < n; ++i) {
        const double s = (i - 0.5) / (n - 1);
        double heading = yaw;
        for (int m = 0; m < 3; ++m) heading += amp[m] * std::sin(two_pi * (m + 1) * 0.5 * s + phase[m]);
        p += ds * Vec3(std::cos(heading), std::sin(heading), 0.0);
        pts.push_back(p);
      }
      break;
    }
    case ObjectKind::kCloth: {
      const Mat3 rot = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
      for (int r = 0; r < c.cloth_rows; ++r)
        for (int k = 0; k < c.cloth_cols; ++k) pts.push_back(rot * Vec3(k * c.cloth_spacing, r * c.cloth_spacing, 0.0));
      break;
    }
    case ObjectKind::kBlob: {
      const Mat3 rot = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
      const Vec3 r = c.blob_radii;
      const double h = c.blob_spacing;
      for (double x = -r.x(); x <= r.x() + 1e-12; x += h)
        for (double y = -r.y(); y <= r.y() + 1e-12; y += h)
          for (double z = -r.z(); z <= r.z() + 1e-12; z += h) {
            const Vec3 q(x / r.x(), y / r.y(), z / r.z());
            if (q.squaredNorm() <= 1.0 + 1e-9) pts.push_back(rot * Vec3(x, y, z));
          }
      if (pts.size() < 2) throw Error("world: blob is smaller than its lattice spacing");
      break;
    }
  }
  // Center horizontally on object_center and rest the lowest particle on the table.
  Vec3 shift = c.object_center - centroid(pts);
  double zmin = pts[0].z();
  for (const auto& p : pts) zmin = std::min(zmin, p.z());
  shift.z() = c.table_height - zmin;
  for (auto& p : pts) {
    p += shift;
    if (c.object != ObjectKind::kBlob) p.z() = c.table_height;
  }
  return pts;
}

inline std::vector<Spring> build_springs(const WorldConfig& c, const std::vector<Vec3>& rest) {
  std::vector<Spring> springs;
  const double squash = c.object == ObjectKind::kCloth ? c.cloth_compression : 1.0;
  auto add = [&](std::size_t i, std::size_t j, double len, double k) {
    springs.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j), len, k, k * squash});
  };
  const double k = c.stiffness;
  switch (c.object) {
    case ObjectKind::kRope: {
      const double ds = c.rope_length / (c.rope_particles - 1);
      for (std::size_t i = 0; i + 1 < rest.size(); ++i) add(i, i + 1, ds, k);
      for (std::size_t i = 0; i + 2 < rest.size(); ++i) add(i, i + 2, 2.0 * ds, k * c.bend_ratio);
      break;
    }
    case ObjectKind::kCloth: {
      const int rows = c.cloth_rows, cols = c.cloth_cols;
      const double h = c.cloth_spacing;
      auto id = [cols](int r, int q) { return static_cast<std::size_t>(r * cols + q); };
      for (int r = 0; r < rows; ++r)
        for (int q = 0; q < cols; ++q) {
          if (q + 1 < cols) add(id(r, q), id(r, q + 1), h, k);
          if (r + 1 < rows) add(id(r, q), id(r + 1, q), h, k);
          if (q + 1 < cols && r + 1 < rows) {
            add(id(r, q), id(r + 1, q + 1), h * std::sqrt(2.0), k * c.shear_ratio);
            add(id(r, q + 1), id(r + 1, q), h * std::sqrt(2.0), k * c.shear_ratio);
          }
          if (q + 2 < cols) add(id(r, q), id(r, q + 2), 2.0 * h, k * c.bend_ratio);
          if (r + 2 < rows) add(id(r, q), id(r + 2, q), 2.0 * h, k * c.bend_ratio);
        }
      break;
    }
    case ObjectKind::kBlob: {
      const double reach = 1.75 * c.blob_spacing;
      for (std::size_t i = 0; i < rest.size(); ++i)
        for (std::size_t j = i + 1; j < rest.size(); ++j) {
          const double d = (rest[i] - rest[j]).norm();
          if (d < reach) add(i, j, d, k * c.lattice_ratio);
        }
      break;
    }
  }
  return springs;
}

// --- simulation ---------------------------------------------------------------

/// Stateful mass-spring world advanced one output frame at a time by
/// semi-implicit Euler substeps.
class World {
 public:
  World(const WorldConfig& config, std::vector<Vec3> positions, const Vec3& effector_start)
      : cfg_(config), pos_(std::move(positions)), vel_(pos_.size(), Vec3::Zero()), effector_(effector_start) {
    cfg_.validate();
    if (pos_.size() < 2) throw Error("world: need at least two particles");
    springs_ = build_springs(cfg_, pos_);
    grasped_.assign(pos_.size(), 0);
    offsets_.assign(pos_.size(), Vec3::Zero());
    if (cfg_.effector == EffectorKind::kGripper) {
      bool any = false;
      for (std::size_t i = 0; i < pos_.size(); ++i)
        if ((pos_[i] - effector_).norm() <= cfg_.grasp_radius) {
          grasped_[i] = 1;
          any = true;
        }
      if (!any) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < pos_.size(); ++i)
          if ((pos_[i] - effector_).squaredNorm() < (pos_[best] - effector_).squaredNorm()) best = i;
        grasped_[best] = 1;
      }
      for (std::size_t i = 0; i < pos_.size(); ++i)
        if (grasped_[i]) offsets_[i] = pos_[i] - effector_;
    }
  }

  World(const WorldConfig& config, const Vec3& effector_start)
      : World(config, initial_positions(config), effector_start) {}

  const WorldConfig& config() const { return cfg_; }
  const std::vector<Vec3>& positions() const { return pos_; }
  const std::vector<Vec3>& velocities() const { return vel_; }
  const Vec3& effector() const { return effector_; }
  const std::vector<std::uint8_t>& grasp_mask() const { return grasped_; }

  double kinetic_energy() const {
    double e = 0.0;
    for (const auto& v : vel_) e += 0.5 * cfg_.particle_mass * v.squaredNorm();
    return e;
  }

  /// Moves the effector linearly to `target` over one output frame.
  void step(const Vec3& target) {
    const int n = cfg_.substeps_per_frame();
    const Vec3 start = effector_;
    Vec3 prev = start;
    for (int s = 1; s <= n; ++s) {
      const double a = static_cast<double>(s) / n;
      const Vec3 cur = (1.0 - a) * start + a * target;
      substep(prev, cur);
      prev = cur;
    }
    effector_ = target;
  }

 private:
  void substep(const Vec3& eff_prev, const Vec3& eff) {
    const double dt = cfg_.timestep;
    const double m = cfg_.particle_mass;
    const std::size_t n = pos_.size();
    force_.assign(n, Vec3(0.0, 0.0, -m * cfg_.gravity));
    for (const auto& s : springs_) {
      const Vec3 d = pos_[s.j] - pos_[s.i];
      const double len = d.norm();
      if (len <= 0.0) continue;
      const Vec3 dir = d / len;
      const double k = len < s.rest ? s.k_compressed : s.k;
      const double f = k * (len - s.rest) + cfg_.damping * (vel_[s.j] - vel_[s.i]).dot(dir);
      force_[s.i] += f * dir;
      force_[s.j] -= f * dir;
    }
    const Vec3 eff_vel = (eff - eff_prev) / dt;
    if (cfg_.effector == EffectorKind::kPusher) {
      const Vec3 axis(0.0, 0.0, cfg_.pusher_height);
      for (std::size_t i = 0; i < n; ++i) {
        const double t = std::clamp((pos_[i] - eff).dot(axis) / axis.squaredNorm(), 0.0, 1.0);
        Vec3 normal = pos_[i] - (eff + t * axis);
        const double dist = normal.norm();
        if (dist >= cfg_.pusher_radius) continue;
        normal = dist > 1e-12 ? Vec3(normal / dist) : Vec3::UnitX();
        const double approach = std::min(0.0, (vel_[i] - eff_vel).dot(normal));
        force_[i] += (cfg_.contact_stiffness * (cfg_.pusher_radius - dist) - cfg_.contact_damping * approach) * normal;
      }
    }
    const double keep = std::max(0.0, 1.0 - cfg_.drag * dt);
    const double table = cfg_.table_height;
    for (std::size_t i = 0; i < n; ++i) {
      if (grasped_[i]) continue;
      Vec3 v = (vel_[i] + force_[i] * (dt / m)) * keep;
      Vec3 p = pos_[i];
      if (p.z() + dt * v.z() < table) {
        // Contact: remove the normal velocity and apply a Coulomb friction impulse.
        const double dvn = std::max(0.0, -v.z());
        v.z() = 0.0;
        const double vt = std::hypot(v.x(), v.y());
        const double cap = cfg_.friction * dvn;
        if (vt <= cap) {
          v.x() = 0.0;
          v.y() = 0.0;
        } else {
          const double scale = (vt - cap) / vt;
          v.x() *= scale;
          v.y() *= scale;
        }
        p.x() += dt * v.x();
        p.y() += dt * v.y();
        p.z() = table;
      } else {
        p += dt * v;
      }
      pos_[i] = p;
      vel_[i] = v;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!grasped_[i]) continue;
      pos_[i] = eff + offsets_[i];
      vel_[i] = eff_vel;
    }
  }

  WorldConfig cfg_;
  std::vector<Vec3> pos_, vel_, force_;
  std::vector<Spring> springs_;
  std::vector<std::uint8_t> grasped_;
  std::vector<Vec3> offsets_;
  Vec3 effector_;
};

inline void check_action_script(const WorldConfig& c, const std::vector<Vec3>& script) {
  if (script.size() < 2) throw Error("action script must have at least two frames");
  for (std::size_t t = 0; t < script.size(); ++t) {
    if (!script[t].allFinite()) throw Error("action script: non-finite waypoint at frame " + std::to_string(t));
    if (t > 0 && (script[t] - script[t - 1]).norm() >= c.max_action_step)
      throw Error("action script: step " + std::to_string(t) + " exceeds " + to_text(c.max_action_step) + " m");
  }
}

/// Runs the world from `initial` under the script and records every frame.
inline TrackedSequence simulate(const WorldConfig& config, const std::vector<Vec3>& action_script,
                                const std::vector<Vec3>& initial) {
  config.validate();
  check_action_script(config, action_script);
  World world(config, initial, action_script[0]);
  TrackedSequence seq;
  seq.effector_kind = config.effector;
  seq.fps = config.fps;
  seq.table_height = config.table_height;
  seq.positions.push_back(world.positions());
  seq.actions.push_back(action_script[0]);
  seq.grasp_mask.push_back(world.grasp_mask());
  for (std::size_t t = 1; t < action_script.size(); ++t) {
    world.step(action_script[t]);
    const auto& now = world.positions();
    const auto& before = seq.positions.back();
    for (std::size_t i = 0; i < now.size(); ++i) {
      const double disp = (now[i] - before[i]).norm();
      if (!(disp < 0.1))
        throw Error("simulation exploded at frame " + std::to_string(t) + " (particle " + std::to_string(i) +
                    " moved " + to_text(disp) + " m); use a smaller timestep");
    }
    seq.positions.push_back(now);
    seq.actions.push_back(action_script[t]);
    seq.grasp_mask.push_back(world.grasp_mask());
  }
  return seq;
}

inline TrackedSequence simulate(const WorldConfig& config, const std::vector<Vec3>& action_script) {
  return simulate(config, action_script, initial_positions(config));
}

// --- scripted actions ---------------------------------------------------------

namespace detail {

// Appends waypoints moving from the current end of `script` to `goal` at
// `speed` m/frame, with an optional sinusoidal lift of height `lift`.
inline void move_to(std::vector<Vec3>& script, const Vec3& goal, double speed, double lift, std::size_t max_len) {
  const Vec3 start = script.back();
  const double dist = (goal - start).norm();
  const int steps = std::max(1, static_cast<int>(std::ceil(dist / speed)));
  for (int s = 1; s <= steps && script.size() < max_len; ++s) {
    const double a = static_cast<double>(s) / steps;
    Vec3 p = (1.0 - a) * start + a * goal;
    p.z() += lift * std::sin(std::numbers::pi * a);
    script.push_back(p);
  }
}

inline void hold(std::vector<Vec3>& script, int frames, std::size_t max_len) {
  for (int i = 0; i < frames && script.size() < max_len; ++i) script.push_back(script.back());
}

}  // namespace detail

/// Random gripper drags (grasp, lift, move, place) or pusher sweeps for the
/// object described by `config`. Deterministic per seed; every waypoint lies in
/// the workspace and consecutive waypoints are closer than max_action_step.
inline std::vector<Vec3> sample_action_script(const WorldConfig& config, std::uint64_t rng_seed) {
  config.validate();
  const auto pts = initial_positions(config);
  const Aabb ws = config.workspace();
  const std::size_t len = static_cast<std::size_t>(config.frames);
  const double table = config.table_height;
  std::mt19937_64 rng(rng_seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  auto random_dir = [&]() {
    const double a = uniform(0.0, 2.0 * std::numbers::pi);
    return Vec3(std::cos(a), std::sin(a), 0.0);
  };
  auto speed = [&]() { return uniform(config.action_speed_min, config.action_speed_max); };
  std::vector<Vec3> script;
  script.reserve(len);

  if (config.effector == EffectorKind::kGripper) {
    std::size_t grasp;
    if (config.object == ObjectKind::kRope && u01(rng) < 0.6) {
      const std::size_t band = std::max<std::size_t>(1, pts.size() / 10);
      const std::size_t k = static_cast<std::size_t>(uniform(0.0, static_cast<double>(band)));
      grasp = u01(rng) < 0.5 ? std::min(k, pts.size() - 1) : pts.size() - 1 - std::min(k, pts.size() - 1);
    } else {
      grasp = std::min(pts.size() - 1, static_cast<std::size_t>(uniform(0.0, static_cast<double>(pts.size()))));
    }
    script.push_back(ws.clamp(pts[grasp]));
    detail::hold(script, static_cast<int>(uniform(0.0, 4.0)), len);
    while (script.size() < len) {
      const Vec3 from = script.back();
      Vec3 goal = from + uniform(0.04, 0.2) * random_dir();
      goal.z() = table;
      goal = ws.clamp(goal);
      const double lift = u01(rng) < 0.4 ? uniform(0.0, config.lift_height) : 0.0;
      detail::move_to(script, goal, speed(), lift, len);
      detail::hold(script, static_cast<int>(uniform(0.0, 8.0)), len);
    }
  } else {
    const double transit = std::min(ws.hi.z(), table + 0.12);
    const Vec3 first = pts[static_cast<std::size_t>(uniform(0.0, static_cast<double>(pts.size() - 1)))];
    script.push_back(ws.clamp(Vec3(first.x(), first.y(), transit)));
    while (script.size() < len) {
      const Vec3 contact = pts[static_cast<std::size_t>(uniform(0.0, static_cast<double>(pts.size() - 1)))];
      const Vec3 dir = random_dir();
      Vec3 start = contact - uniform(0.04, 0.08) * dir;
      Vec3 end = contact + uniform(0.03, 0.1) * dir;
      start.z() = end.z() = table;
      start = ws.clamp(start);
      end = ws.clamp(end);
      detail::move_to(script, ws.clamp(Vec3(start.x(), start.y(), transit)), config.action_speed_max, 0.0, len);
      detail::move_to(script, start, config.action_speed_max, 0.0, len);
      detail::move_to(script, end, speed(), 0.0, len);
      detail::hold(script, static_cast<int>(uniform(0.0, 5.0)), len);
      detail::move_to(script, ws.clamp(Vec3(end.x(), end.y(), transit)), config.action_speed_max, 0.0, len);
    }
  }
  for (auto& p : script) p = ws.clamp(p);
  return script;
}

// --- dataset files ------------------------------------------------------------

inline constexpr char kEpisodeMagic[] = "GSDYNEP1";
inline constexpr std::uint32_t kEpisodeVersion = 1;

/// Layout: magic, u32 version, u64 T, u64 N, u8 effector_kind, f64 fps,
/// f64 table_height, f64 positions[T][N][3], f64 actions[T][3], u8 grasp[T][N].
inline void write_episode(const std::filesystem::path& path, const TrackedSequence& seq) {
  const std::size_t t_count = seq.frames(), n = seq.particles();
  io::BinaryWriter w(path);
  w.magic(kEpisodeMagic);
  w.scalar<std::uint32_t>(kEpisodeVersion);
  w.scalar<std::uint64_t>(t_count);
  w.scalar<std::uint64_t>(n);
  w.scalar<std::uint8_t>(static_cast<std::uint8_t>(seq.effector_kind));
  w.scalar<double>(seq.fps);
  w.scalar<double>(seq.table_height);
  for (const auto& frame : seq.positions) {
    if (frame.size() != n) throw Error("write_episode: particle count changes over time");
    for (const auto& p : frame) w.doubles(p.data(), 3);
  }
  if (seq.actions.size() != t_count) throw Error("write_episode: action count differs from frame count");
  for (const auto& a : seq.actions) w.doubles(a.data(), 3);
  for (std::size_t t = 0; t < t_count; ++t)
    for (std::size_t i = 0; i < n; ++i)
      w.scalar<std::uint8_t>(t < seq.grasp_mask.size() && i < seq.grasp_mask[t].size() ? seq.grasp_mask[t][i] : 0);
  w.finish();
}

inline TrackedSequence read_episode(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic(kEpisodeMagic);
  const auto version = r.scalar<std::uint32_t>();
  if (version != kEpisodeVersion) throw Error("'" + path.string() + "': unsupported episode version");
  const auto t_count = static_cast<std::size_t>(r.scalar<std::uint64_t>());
  const auto n = static_cast<std::size_t>(r.scalar<std::uint64_t>());
  if (t_count > (1u << 24) || n > (1u << 24)) throw Error("'" + path.string() + "': implausible episode size");
  TrackedSequence seq;
  const auto kind = r.scalar<std::uint8_t>();
  if (kind > 1) throw Error("'" + path.string() + "': unknown effector kind");
  seq.effector_kind = static_cast<EffectorKind>(kind);
  seq.fps = r.scalar<double>();
  seq.table_height = r.scalar<double>();
  seq.positions.assign(t_count, std::vector<Vec3>(n));
  for (auto& frame : seq.positions)
    for (auto& p : frame) r.doubles(p.data(), 3);
  seq.actions.resize(t_count);
  for (auto& a : seq.actions) r.doubles(a.data(), 3);
  seq.grasp_mask.assign(t_count, std::vector<std::uint8_t>(n));
  for (auto& frame : seq.grasp_mask)
    for (auto& g : frame) g = r.scalar<std::uint8_t>();
  return seq;
}

/// One Gaussian per particle: fixed palette colors, isotropic scale of half
/// the mean nearest-neighbor distance, identity rotation.
inline GaussianCloud cloud_from_particles(const std::vector<Vec3>& pts) {
  static const Rgb kPalette[] = {{0.85, 0.33, 0.10}, {0.93, 0.69, 0.13}, {0.47, 0.67, 0.19},
                                 {0.30, 0.75, 0.93}, {0.49, 0.18, 0.56}, {0.64, 0.08, 0.18}};
  constexpr std::size_t kColors = std::size(kPalette);
  const std::size_t n = pts.size();
  if (n == 0) throw Error("cloud_from_particles: no particles");
  double mean_nn = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) best = std::min(best, (pts[i] - pts[j]).squaredNorm());
    mean_nn += n > 1 ? std::sqrt(best) : 0.01;
  }
  mean_nn /= static_cast<double>(n);
  const double scale = std::max(0.5 * mean_nn, 1e-4);
  GaussianCloud cloud;
  cloud.centers = pts;
  cloud.rotations.assign(n, UnitQuat::identity());
  cloud.scales.assign(n, Vec3::Constant(scale));
  cloud.opacities.assign(n, 0.9);
  for (std::size_t i = 0; i < n; ++i) cloud.colors.push_back(kPalette[(i * kColors) / n]);
  return cloud;
}

struct Dataset {
  std::map<std::string, std::string> manifest;
  std::vector<TrackedSequence> episodes;
  std::vector<GaussianCloud> clouds;
};

inline std::string episode_name(std::size_t e) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "episode_%04zu.bin", e);
  return buf;
}

inline std::string cloud_name(std::size_t e) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "cloud_%04zu.bin", e);
  return buf;
}

inline constexpr int kDatasetVersion = 1;

/// Writes `num_episodes` simulated episodes into the directory `out_dir`
/// (created if needed; its parent must exist). Episode e uses seed
/// rng_seed + e for both the object layout and the action script.
template <class Progress = void (*)(std::size_t, std::size_t)>
void make_dataset(const WorldConfig& config, std::size_t num_episodes, std::uint64_t rng_seed,
                  const std::filesystem::path& out_dir, Progress&& progress = [](std::size_t, std::size_t) {}) {
  namespace fs = std::filesystem;
  config.validate();
  const fs::path parent = out_dir.has_parent_path() ? out_dir.parent_path() : fs::path(".");
  if (!fs::is_directory(parent)) throw Error("dataset parent directory '" + parent.string() + "' does not exist");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw Error("cannot create dataset directory '" + out_dir.string() + "'");
  io::KeyValues manifest{{"format", "gsdyn-dataset"},
                         {"version", std::to_string(kDatasetVersion)},
                         {"rng_seed", std::to_string(rng_seed)},
                         {"episode_count", std::to_string(num_episodes)}};
  for (auto& kv : echo_config(config, "world")) manifest.push_back(kv);
  for (std::size_t e = 0; e < num_episodes; ++e) {
    WorldConfig ep = config;
    ep.rng_seed = rng_seed + e;
    const auto script = sample_action_script(ep, ep.rng_seed);
    const auto seq = simulate(ep, script);
    write_episode(out_dir / episode_name(e), seq);
    write_cloud(out_dir / cloud_name(e), cloud_from_particles(seq.positions[0]));
    manifest.emplace_back("episode." + std::to_string(e) + ".seed", std::to_string(ep.rng_seed));
    manifest.emplace_back("episode." + std::to_string(e) + ".frames", std::to_string(seq.frames()));
    manifest.emplace_back("episode." + std::to_string(e) + ".particles", std::to_string(seq.particles()));
    progress(e, num_episodes);
  }
  io::write_key_values(out_dir / "manifest.txt", manifest);
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = io::read_key_values(dir / "manifest.txt");
  if (ds.manifest["format"] != "gsdyn-dataset") throw Error("'" + dir.string() + "' is not a gsdyn dataset");
  std::uint64_t count = 0;
  from_text(ds.manifest["episode_count"], count);
  for (std::size_t e = 0; e < count; ++e) {
    ds.episodes.push_back(read_episode(dir / episode_name(e)));
    ds.clouds.push_back(read_cloud(dir / cloud_name(e)));
  }
  return ds;
}

}  // namespace gsdyn
