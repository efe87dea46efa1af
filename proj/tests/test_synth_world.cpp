#include <gtest/gtest.h>

#include <filesystem>

#include "gsdyn/synth_world.hpp"
#include "support.hpp"

namespace gsdyn {
namespace {

WorldConfig rope_config() {
  WorldConfig c;
  c.object = ObjectKind::kRope;
  c.effector = EffectorKind::kGripper;
  c.frames = 40;
  c.rng_seed = 3;
  return c;
}

std::vector<Vec3> hold_script(const Vec3& p, int frames) { return std::vector<Vec3>(static_cast<std::size_t>(frames), p); }

TEST(Simulate, RestingRopeStaysPut) {
  auto c = rope_config();
  c.effector = EffectorKind::kPusher;
  const auto seq = simulate(c, hold_script(Vec3(0.3, 0.3, 0.12), 30));
  ASSERT_EQ(seq.frames(), 30u);
  for (std::size_t t = 1; t < seq.frames(); ++t)
    for (std::size_t i = 0; i < seq.particles(); ++i)
      EXPECT_LT((seq.positions[t][i] - seq.positions[0][i]).norm(), 1e-6);
}

TEST(Simulate, RestingClothAndBlobStayPut) {
  for (auto kind : {ObjectKind::kCloth, ObjectKind::kBlob}) {
    auto c = rope_config();
    c.object = kind;
    c.effector = EffectorKind::kPusher;
    const auto seq = simulate(c, hold_script(Vec3(0.3, 0.3, 0.12), 30));
    double drift = 0.0;
    for (std::size_t i = 0; i < seq.particles(); ++i)
      drift = std::max(drift, (seq.positions.back()[i] - seq.positions[0][i]).norm());
    // The blob lattice settles under gravity first; it must stay bounded and on the table.
    EXPECT_LT(drift, kind == ObjectKind::kCloth ? 1e-6 : 0.01) << to_text(kind);
  }
}

TEST(Simulate, GripperLiftsRopeEnd) {
  auto c = rope_config();
  const auto rest = initial_positions(c);
  const Vec3 end = rest.front();
  std::vector<Vec3> script{end};
  for (int s = 1; s <= 20; ++s) script.push_back(end + Vec3(0, 0, 0.1 * s / 20.0));
  for (int s = 0; s < 10; ++s) script.push_back(script.back());
  const auto seq = simulate(c, script, rest);
  const auto& last = seq.positions.back();
  const auto& mask = seq.grasp_mask.back();
  ASSERT_TRUE(mask[0]);
  for (std::size_t t = 0; t < seq.frames(); ++t)
    for (std::size_t i = 0; i < seq.particles(); ++i)
      if (mask[i]) {
        EXPECT_TRUE(seq.positions[t][i] == seq.actions[t] + (rest[i] - end)) << t << " " << i;
      }
  EXPECT_NEAR(last[0].z(), 0.1, 1e-12);
  // Height falls off along the chain beyond the grasped section.
  std::size_t first_free = 0;
  while (mask[first_free]) ++first_free;
  for (std::size_t i = first_free; i + 1 < 12; ++i) EXPECT_GE(last[i].z(), last[i + 1].z() - 1e-9) << i;
  EXPECT_LT(last[first_free + 6].z(), last[first_free].z());
}

TEST(Simulate, PusherThroughClothEdgeIsLocal) {
  auto c = rope_config();
  c.object = ObjectKind::kCloth;
  c.effector = EffectorKind::kPusher;
  c.cloth_rows = c.cloth_cols = 16;
  c.cloth_spacing = 0.02;
  const auto rest = initial_positions(c);
  // Find the edge particle with the smallest x and push it along +x.
  std::size_t edge = 0;
  for (std::size_t i = 0; i < rest.size(); ++i)
    if (rest[i].x() < rest[edge].x()) edge = i;
  const Vec3 dir = (centroid(rest) - rest[edge]).normalized();
  const Vec3 flat_dir = Vec3(dir.x(), dir.y(), 0.0).normalized();
  const Vec3 start = rest[edge] - 0.03 * flat_dir + Vec3(0, 0, 0.0);
  std::vector<Vec3> script;
  for (int s = 0; s <= 8; ++s) script.push_back(start + 0.005 * s * flat_dir);
  for (int s = 0; s < 4; ++s) script.push_back(script.back());
  const auto seq = simulate(c, script, rest);
  const auto& last = seq.positions.back();
  const double radius = c.pusher_radius;
  double moved_near = 0.0;
  for (std::size_t i = 0; i < rest.size(); ++i) {
    const Vec3 d = last[i] - rest[i];
    double closest = std::numeric_limits<double>::infinity();
    for (const auto& a : script) closest = std::min(closest, std::hypot(rest[i].x() - a.x(), rest[i].y() - a.y()));
    if (closest < radius) moved_near = std::max(moved_near, d.dot(flat_dir));
    if (closest > 3.0 * radius + 3.0 * c.cloth_spacing) {
      EXPECT_LT(d.norm(), 1e-3) << "particle " << i;
    }
  }
  EXPECT_GT(moved_near, 0.005);
}

TEST(Simulate, NonPenetrationAndDeterminism) {
  for (auto effector : {EffectorKind::kGripper, EffectorKind::kPusher}) {
    auto c = rope_config();
    c.effector = effector;
    c.frames = 60;
    const auto script = sample_action_script(c, 11);
    const auto a = simulate(c, script);
    const auto b = simulate(c, script);
    for (std::size_t t = 0; t < a.frames(); ++t)
      for (std::size_t i = 0; i < a.particles(); ++i) {
        EXPECT_TRUE(a.positions[t][i] == b.positions[t][i]);
        EXPECT_GE(a.positions[t][i].z(), c.table_height - 1e-6);
      }
  }
}

TEST(Simulate, KineticEnergyDecaysWithoutAction) {
  auto c = rope_config();
  c.effector = EffectorKind::kPusher;
  auto pts = initial_positions(c);
  for (auto& p : pts) p.z() += 0.02;
  World world(c, pts, Vec3(0.3, 0.3, 0.12));
  std::vector<double> energy;
  for (int f = 0; f < 40; ++f) {
    world.step(Vec3(0.3, 0.3, 0.12));
    energy.push_back(world.kinetic_energy());
  }
  for (std::size_t f = 11; f < energy.size(); ++f) EXPECT_LE(energy[f], energy[f - 1] + 1e-15) << f;
}

TEST(Simulate, ExplosionIsReported) {
  auto c = rope_config();
  c.timestep = 0.02;
  c.stiffness = 1e5;
  c.effector = EffectorKind::kPusher;
  auto pts = initial_positions(c);
  pts[5].z() += 0.02;
  try {
    simulate(c, hold_script(Vec3(0.3, 0.3, 0.12), 20), pts);
    FAIL() << "expected an explosion";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("smaller timestep"), std::string::npos);
  }
}

TEST(Simulate, RejectsJumpyScript) {
  auto c = rope_config();
  const std::vector<Vec3> script{{0, 0, 0}, {0.06, 0, 0}};
  EXPECT_THROW(simulate(c, script), Error);
  c.timestep = 0.0;
  EXPECT_THROW(simulate(c, hold_script(Vec3::Zero(), 3)), Error);
}

TEST(ActionScript, DeterministicBoundedContinuous) {
  for (auto effector : {EffectorKind::kGripper, EffectorKind::kPusher}) {
    auto c = rope_config();
    c.effector = effector;
    c.frames = 150;
    EXPECT_EQ(sample_action_script(c, 5), sample_action_script(c, 5));
    double max_step = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      c.rng_seed = seed;
      const auto s = sample_action_script(c, seed);
      ASSERT_EQ(s.size(), 150u);
      for (std::size_t t = 0; t < s.size(); ++t) {
        EXPECT_TRUE(c.workspace().contains(s[t]));
        if (t > 0) max_step = std::max(max_step, (s[t] - s[t - 1]).norm());
      }
    }
    EXPECT_LT(max_step, 0.05);
  }
}

TEST(Dataset, RoundTripAndSize) {
  const auto dir = testing::scratch_dir("dataset");
  auto c = rope_config();
  c.frames = 150;
  make_dataset(c, 10, 100, dir / "rope");
  const auto ds = read_dataset(dir / "rope");
  ASSERT_EQ(ds.episodes.size(), 10u);
  std::uintmax_t bytes = 0;
  for (const auto& e : std::filesystem::directory_iterator(dir / "rope"))
    if (e.path().filename().string().rfind("episode_", 0) == 0) bytes += e.file_size();
  const double payload = 10.0 * 150 * 64 * 3 * 8;
  EXPECT_LT(bytes, 2.0 * payload);
  EXPECT_GT(bytes, 0.5 * payload);

  WorldConfig ep = c;
  ep.rng_seed = 103;
  const auto again = simulate(ep, sample_action_script(ep, ep.rng_seed));
  const auto& stored = ds.episodes[3];
  ASSERT_EQ(stored.frames(), again.frames());
  for (std::size_t t = 0; t < again.frames(); ++t) {
    EXPECT_TRUE(stored.actions[t] == again.actions[t]);
    for (std::size_t i = 0; i < again.particles(); ++i) EXPECT_TRUE(stored.positions[t][i] == again.positions[t][i]);
    EXPECT_EQ(stored.grasp_mask[t], again.grasp_mask[t]);
  }
  EXPECT_EQ(ds.manifest.at("world.stiffness"), to_text(c.stiffness));
  EXPECT_EQ(ds.clouds[0].size(), 64u);
}

TEST(Dataset, EmptyAndBadPaths) {
  const auto dir = testing::scratch_dir("dataset_empty");
  make_dataset(rope_config(), 0, 1, dir / "none");
  EXPECT_TRUE(read_dataset(dir / "none").episodes.empty());
  try {
    make_dataset(rope_config(), 1, 1, dir / "no" / "such" / "dir");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("no/such"), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_dataset(dir / "missing"), Error);
}

TEST(Dataset, CloudFromParticles) {
  const std::vector<Vec3> pts{{0, 0, 0}, {0.01, 0, 0}, {0.03, 0, 0}};
  const auto cloud = cloud_from_particles(pts);
  // mean nearest-neighbor distance = (0.01 + 0.01 + 0.02) / 3
  EXPECT_NEAR(cloud.scales[0].x(), 0.5 * 0.04 / 3.0, 1e-15);
  EXPECT_NO_THROW(cloud.validate());
}

}  // namespace
}  // namespace gsdyn
