#include <gtest/gtest.h>

#include <filesystem>

#include "gsdyn/training.hpp"
#include "support.hpp"

namespace gsdyn {
namespace {

using Frames = std::vector<std::vector<Vec3>>;

Vec3 rigidly(const RigidTransform& t, const Vec3& p) { return t.apply(p); }

RigidTransform random_rigid(testing::Gen& gen) {
  RigidTransform t;
  t.rotation = gen.rotation().matrix();
  t.translation = gen.vec(-0.2, 0.2);
  return t;
}

TEST(LossPred, HandCases) {
  const Frames truth{{{0, 0, 0}}};
  const Frames pred{{{0.1, 0, 0}}};
  EXPECT_DOUBLE_EQ(loss_pred(pred, truth), 0.01 / 3.0);
  EXPECT_DOUBLE_EQ(loss_pred(pred, truth, true), 0.01);
  EXPECT_EQ(loss_pred(truth, truth), 0.0);
  const Frames twice{{{0.2, 0, 0}}};
  EXPECT_DOUBLE_EQ(loss_pred(twice, truth), 4.0 * loss_pred(pred, truth));
  // Horizon steps add.
  const Frames two_steps{{{0.1, 0, 0}}, {{0, 0.1, 0}}};
  const Frames zero2{{{0, 0, 0}}, {{0, 0, 0}}};
  EXPECT_DOUBLE_EQ(loss_pred(two_steps, zero2), 2.0 * 0.01 / 3.0);
  EXPECT_THROW(loss_pred(pred, zero2), Error);
  const Frames wide{{{0, 0, 0}, {0, 0, 0}}};
  EXPECT_THROW(loss_pred(pred, wide), Error);
}

TEST(LossEdge, StretchedEdge) {
  const std::vector<Vec3> prev{{0, 0, 0}, {0.1, 0, 0}, {0.1, 0.1, 0}};
  std::vector<Vec3> pred = prev;
  pred[1].x() = 0.12;
  pred[2].x() = 0.12;
  // Edges 0-1 stretched by 0.02; 1-2 unchanged (both directions listed).
  const std::vector<Edge> edges{{0, 1, EdgeKind::kObjectObject}, {1, 0, EdgeKind::kObjectObject},
                                {1, 2, EdgeKind::kObjectObject}, {2, 1, EdgeKind::kObjectObject}};
  EXPECT_NEAR(loss_edge(pred, edges, prev), 2.0 * 0.02 * 0.02 / 4.0, 1e-15);
  EXPECT_EQ(loss_edge(pred, {}, prev), 0.0);
  const std::vector<Edge> bad{{0, 5, EdgeKind::kObjectObject}};
  EXPECT_THROW(loss_edge(pred, bad, prev), Error);
}

TEST(LossRigid, PerturbedVertexBoundedByPerturbation) {
  testing::Gen gen(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto prev = gen.points(static_cast<std::size_t>(gen.integer(4, 20)), -0.1, 0.1);
    const auto t = random_rigid(gen);
    std::vector<Vec3> pred;
    for (const auto& q : prev) pred.push_back(rigidly(t, q));
    const Vec3 delta = gen.vec(-0.01, 0.01);
    pred[0] += delta;
    const double l = loss_rigid(pred, prev);
    EXPECT_LT(l, delta.squaredNorm());
    EXPECT_GT(l, 0.0);
    // Oracle: the residual of an independent fit (swap roles and invert).
    const auto fit = fit_rigid_transform(prev, pred);
    double oracle = 0.0;
    for (std::size_t i = 0; i < prev.size(); ++i) oracle += (pred[i] - fit.transform.apply(prev[i])).squaredNorm();
    EXPECT_NEAR(l, oracle / static_cast<double>(prev.size()), 1e-15);
  }
  EXPECT_THROW(loss_rigid(std::vector<Vec3>(2), std::vector<Vec3>(2)), Error);
}

TEST(LossRigid, CollinearPointsSkipTheTerm) {
  const std::vector<Vec3> line{{0, 0, 0}, {0.1, 0, 0}, {0.2, 0, 0}};
  std::vector<Vec3> bent = line;
  bent[1].y() = 0.05;
  EXPECT_EQ(loss_rigid(bent, line), 0.0);
}

TEST(Regularizers, VanishOnRigidMotionProperty) {
  testing::Gen gen(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto prev = gen.points(static_cast<std::size_t>(gen.integer(3, 30)), -0.15, 0.15);
    const auto t = random_rigid(gen);
    std::vector<Vec3> pred;
    for (const auto& q : prev) pred.push_back(rigidly(t, q));
    std::vector<VertexKind> kinds(prev.size(), VertexKind::kObject);
    const auto edges = connect(prev, kinds, 0.1);
    EXPECT_LT(loss_edge(pred, edges, prev), 1e-9);
    EXPECT_LT(loss_rigid(pred, prev), 1e-9);
  }
}

template <class Loss>
void check_position_gradient(Loss loss, std::vector<Vec3> a, std::vector<Vec3> b, const std::vector<Vec3>& ga,
                             const std::vector<Vec3>& gb) {
  const double eps = 1e-6;
  for (int which = 0; which < 2; ++which) {
    auto& x = which == 0 ? a : b;
    const auto& g = which == 0 ? ga : gb;
    for (std::size_t i = 0; i < x.size(); ++i)
      for (int c = 0; c < 3; ++c) {
        const double keep = x[i](c);
        x[i](c) = keep + eps;
        const double up = loss(a, b);
        x[i](c) = keep - eps;
        const double down = loss(a, b);
        x[i](c) = keep;
        EXPECT_NEAR(g[i](c), (up - down) / (2 * eps), 1e-7 + 1e-5 * std::abs(g[i](c))) << which << " " << i << " " << c;
      }
  }
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  testing::Gen gen(6);
  const auto prev = gen.points(6, -0.05, 0.05);
  auto pred = prev;
  for (auto& q : pred) q += gen.vec(-0.01, 0.01);
  std::vector<VertexKind> kinds(6, VertexKind::kObject);
  const auto edges = connect(prev, kinds, 0.2);
  ASSERT_FALSE(edges.empty());

  std::vector<Vec3> gp(6, Vec3::Zero()), gq(6, Vec3::Zero());
  loss_edge(pred, edges, prev, &gp, &gq);
  check_position_gradient([&](const auto& a, const auto& b) { return loss_edge(a, edges, b); }, pred, prev, gp, gq);

  std::fill(gp.begin(), gp.end(), Vec3::Zero());
  std::fill(gq.begin(), gq.end(), Vec3::Zero());
  loss_rigid(pred, prev, &gp, &gq);
  check_position_gradient([&](const auto& a, const auto& b) { return loss_rigid(a, b); }, pred, prev, gp, gq);
}

// Square of four object vertices plus an effector near two of them.
TrainWindow small_window(testing::Gen& gen, std::size_t k, std::size_t tau) {
  TrainWindow w;
  const std::vector<Vec3> square{{0, 0, 0.01}, {0.1, 0, 0.01}, {0, 0.1, 0.01}, {0.1, 0.1, 0.01}};
  Vec3 eff(0.16, 0.05, 0.02);
  for (std::size_t s = 0; s < k + 1 + tau; ++s) {
    std::vector<Vec3> f;
    for (const auto& q : square) f.push_back(q + Vec3(0.002 * static_cast<double>(s), 0, 0) + gen.vec(-0.002, 0.002));
    w.objects.push_back(f);
    w.effector.push_back(eff);
    eff.x() -= 0.003;
  }
  return w;
}

TEST(WindowLoss, ZeroLambdasGivePredictionLossOnly) {
  testing::Gen gen(7);
  ModelConfig mc;
  mc.hidden = 8;
  mc.d_e = 0.12;
  const auto p = DynModelParams::random(mc);
  const auto w = small_window(gen, 3, 4);
  TrainConfig tc;
  tc.lambda_edge = 0.0;
  tc.lambda_rigid = 0.0;
  const auto parts = window_loss(p, w, tc, true, nullptr);
  EXPECT_EQ(parts.total(tc, true), parts.pred);
  const auto pred = rollout_window(p, Frames(w.objects.begin(), w.objects.begin() + 4),
                                   std::vector<Vec3>(w.effector.begin(), w.effector.begin() + 4),
                                   std::span<const Vec3>(w.effector.data() + 4, 4), 0.0);
  EXPECT_EQ(parts.pred, loss_pred(pred, Frames(w.objects.begin() + 4, w.objects.end())));
}

TEST(WindowLoss, RolloutGradientMatchesFiniteDifferences) {
  // Central differences are only meaningful where no ReLU input crosses zero
  // within the step; this draw stays clear of kinks at eps = 1e-5.
  testing::Gen gen(9);
  ModelConfig mc;
  mc.hidden = 8;
  mc.k = 3;
  mc.p = 3;
  mc.d_e = 0.12;
  mc.init_seed = 3;
  auto p = DynModelParams::random(mc);
  p.visit([&](const std::string&, auto& t) {
    if (t.rows() == 1)
      for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = gen.uniform(-0.1, 0.1);
  });
  const auto w = small_window(gen, 3, 3);
  TrainConfig tc;
  tc.lambda_edge = 0.5;
  tc.lambda_rigid = 0.7;
  auto grad = DynModelParams::zeros(mc);
  window_loss(p, w, tc, true, &grad);
  const auto analytic = grad.flatten();
  auto theta = p.flatten();
  const double eps = 1e-5;
  double worst = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double keep = theta[i];
    theta[i] = keep + eps;
    p.unflatten(theta);
    const double up = window_loss(p, w, tc, true, nullptr).total(tc, true);
    theta[i] = keep - eps;
    p.unflatten(theta);
    const double down = window_loss(p, w, tc, true, nullptr).total(tc, true);
    theta[i] = keep;
    const double numeric = (up - down) / (2 * eps);
    worst = std::max(worst, std::abs(numeric - analytic[i]) / std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6}));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  TrainConfig c;
  c.lr = 0.01;
  std::vector<double> theta{1.0, -2.0, 0.5};
  TrainState s;
  adam_step(theta, {3.0, -0.001, 0.0}, s, c);
  EXPECT_NEAR(theta[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(theta[1], -2.0 + 0.01, 1e-6);
  EXPECT_EQ(theta[2], 0.5);
  EXPECT_EQ(s.step, 1u);
}

TrackedSequence synthetic_episode(std::uint64_t seed, std::size_t frames, bool still) {
  WorldConfig wc;
  wc.object = ObjectKind::kRope;
  wc.effector = EffectorKind::kPusher;
  wc.rope_particles = 32;
  wc.frames = static_cast<int>(frames);
  if (still) {
    const auto rest = initial_positions(wc);
    TrackedSequence seq;
    seq.positions.assign(frames, rest);
    seq.actions.assign(frames, Vec3(0.3, 0.3, 0.1));
    seq.grasp_mask.assign(frames, std::vector<unsigned char>(rest.size(), 0));
    seq.effector_kind = wc.effector;
    seq.fps = wc.fps;
    return seq;
  }
  wc.rng_seed = seed;
  return simulate(wc, sample_action_script(wc, seed));
}

TrainInputs small_inputs(bool still) {
  TrainInputs in;
  for (std::uint64_t e = 0; e < 3; ++e) in.train.push_back(synthetic_episode(e, 20, still));
  in.validation.push_back(synthetic_episode(9, 20, still));
  return in;
}

ModelConfig tiny_model() {
  ModelConfig mc;
  mc.hidden = 16;
  mc.init_seed = 1;
  return mc;
}

TrainConfig quick_train() {
  TrainConfig tc;
  tc.tau = 3;
  tc.epochs = 2;
  tc.samples_per_epoch = 8;
  tc.batch_size = 4;
  tc.rng_seed = 5;
  tc.threads = 2;
  return tc;
}

TEST(Schedule, ExponentialDecayHitsBothEnds) {
  TrainConfig c;
  c.lr = 1e-3;
  c.epochs = 5;
  EXPECT_EQ(epoch_lr(c, 3), 1e-3);
  c.lr_final = 1e-5;
  EXPECT_EQ(epoch_lr(c, 0), 1e-3);
  EXPECT_NEAR(epoch_lr(c, 2), 1e-4, 1e-18);
  EXPECT_NEAR(epoch_lr(c, 4), 1e-5, 1e-19);
  for (std::uint64_t e = 1; e < 5; ++e) EXPECT_LT(epoch_lr(c, e), epoch_lr(c, e - 1));
}

TEST(Train, ZeroMotionDataIsLearned) {
  const auto in = small_inputs(true);
  TrainConfig tc = quick_train();
  tc.lr = 1e-3;
  tc.epochs = 200;
  tc.samples_per_epoch = 4;
  tc.batch_size = 4;  // one step per epoch
  TrainReport report;
  const auto params = train(in, tiny_model(), tc, report);
  ASSERT_EQ(report.epochs.size(), 200u);
  EXPECT_EQ(report.epochs.back().step, 200u);
  EXPECT_GT(report.epochs.front().train.pred, 1e-6);
  EXPECT_LT(report.epochs.back().validation.pred, 1e-6);
  (void)params;
}

TEST(Train, DeterministicAndResumable) {
  const auto in = small_inputs(false);
  const auto tc = quick_train();
  TrainReport r1, r2;
  auto a = train(in, tiny_model(), tc, r1);
  auto b = train(in, tiny_model(), tc, r2);
  EXPECT_EQ(a.flatten(), b.flatten());
  ASSERT_EQ(r1.epochs.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(r1.epochs[e].train_total, r2.epochs[e].train_total);
    EXPECT_EQ(r1.epochs[e].validation_total, r2.epochs[e].validation_total);
    EXPECT_TRUE(std::isfinite(r1.epochs[e].train_total));
  }

  // One epoch, then resume for the second: same weights as two in one go.
  const auto dir = testing::scratch_dir("train_resume");
  auto half = tc;
  half.epochs = 1;
  TrainReport r3;
  train(in, tiny_model(), half, r3, {dir, false, {}});
  TrainReport r4;
  auto c = train(in, tiny_model(), tc, r4, {dir, true, {}});
  EXPECT_EQ(c.flatten(), a.flatten());
  ASSERT_EQ(r4.epochs.size(), 2u);
  EXPECT_EQ(r4.epochs[1].train_total, r1.epochs[1].train_total);
  EXPECT_TRUE(std::filesystem::exists(dir / "best.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "last.ckpt"));
  const auto lines = testing::read_file(dir / "report.jsonl");
  EXPECT_EQ(std::count(lines.begin(), lines.end(), '\n'), 2);
  EXPECT_EQ(load_checkpoint(dir / "last.ckpt").state->epoch, 2u);
}

TEST(Augment, YawRotationIsAnIsometryProperty) {
  testing::Gen gen(12);
  for (int trial = 0; trial < 50; ++trial) {
    const auto w0 = small_window(gen, 3, 2);
    auto w = w0;
    const double a = gen.uniform(-7.0, 7.0);
    rotate_window(w, a);
    for (std::size_t s = 0; s < w.objects.size(); ++s) {
      for (std::size_t i = 0; i < w.objects[s].size(); ++i) {
        EXPECT_NEAR(w.objects[s][i].z(), w0.objects[s][i].z(), 1e-15);
        EXPECT_NEAR((w.objects[s][i] - w.effector[s]).norm(), (w0.objects[s][i] - w0.effector[s]).norm(), 1e-12);
      }
    }
    // A still prediction scores the same in any orientation.
    const Frames still(2, w.objects[3]), still0(2, w0.objects[3]);
    EXPECT_NEAR(loss_pred(still, Frames(w.objects.begin() + 4, w.objects.end())),
                loss_pred(still0, Frames(w0.objects.begin() + 4, w0.objects.end())), 1e-15);
    rotate_window(w, -a);
    for (std::size_t s = 0; s < w.objects.size(); ++s)
      for (std::size_t i = 0; i < w.objects[s].size(); ++i) EXPECT_LT((w.objects[s][i] - w0.objects[s][i]).norm(), 1e-12);
  }
}

TEST(Train, AugmentedTrainingStaysDeterministicAndResumable) {
  const auto in = small_inputs(false);
  auto tc = quick_train();
  tc.augment_yaw = true;
  TrainReport r1, r2, r3;
  auto a = train(in, tiny_model(), tc, r1);
  EXPECT_EQ(train(in, tiny_model(), tc, r2).flatten(), a.flatten());
  auto plain = tc;
  plain.augment_yaw = false;
  EXPECT_NE(train(in, tiny_model(), plain, r3).flatten(), a.flatten());
  const auto dir = testing::scratch_dir("train_resume_aug");
  auto half = tc;
  half.epochs = 1;
  TrainReport r4, r5;
  train(in, tiny_model(), half, r4, {dir, false, {}});
  EXPECT_EQ(train(in, tiny_model(), tc, r5, {dir, true, {}}).flatten(), a.flatten());
}

TEST(Train, RejectsShortEpisodesAndBadValues) {
  auto in = small_inputs(true);
  auto tc = quick_train();
  TrainReport r;
  tc.tau = 20;
  EXPECT_THROW(train(in, tiny_model(), tc, r), Error);
  tc = quick_train();
  tc.lr = 0.0;
  EXPECT_THROW(train(in, tiny_model(), tc, r), Error);
  tc = quick_train();
  in.train[1].positions[5][3].x() = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train(in, tiny_model(), tc, r), Error);
  EXPECT_THROW(train(TrainInputs{}, tiny_model(), quick_train(), r), Error);
}

TEST(Train, DivergenceReportsEpochAndStep) {
  auto in = small_inputs(false);
  auto tc = quick_train();
  tc.lr = 1e6;
  tc.epochs = 50;
  TrainReport r;
  try {
    train(in, tiny_model(), tc, r);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_TRUE(msg.find("epoch") != std::string::npos || msg.find("non-finite") != std::string::npos) << msg;
  }
}

TEST(Split, ByEpisodeWithoutLeakage) {
  Dataset ds;
  for (int e = 0; e < 10; ++e) {
    TrackedSequence s;
    s.positions.assign(3, std::vector<Vec3>(1, Vec3(e, 0, 0)));
    ds.episodes.push_back(s);
  }
  ds.manifest["world.object"] = "blob";
  TrainConfig tc;
  tc.validation_fraction = 0.2;
  const auto in = split_dataset(ds, tc);
  ASSERT_EQ(in.train.size(), 8u);
  ASSERT_EQ(in.validation.size(), 2u);
  EXPECT_EQ(in.validation[0].positions[0][0].x(), 8.0);
  for (const auto& t : in.train)
    for (const auto& v : in.validation) EXPECT_NE(t.positions[0][0].x(), v.positions[0][0].x());
  EXPECT_TRUE(in.rigid_object);
}

}  // namespace
}  // namespace gsdyn
