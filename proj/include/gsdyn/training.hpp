#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gsdyn/dyn_model.hpp"
#include "gsdyn/log.hpp"
#include "gsdyn/parallel.hpp"
#include "gsdyn/synth_world.hpp"

namespace gsdyn {

enum class RigidMode { kAuto, kOn, kOff };

inline std::string to_text(RigidMode m) {
  switch (m) {
    case RigidMode::kAuto: return "auto";
    case RigidMode::kOn: return "on";
    case RigidMode::kOff: return "off";
  }
  return "?";
}
inline void from_text(const std::string& s, RigidMode& m) {
  if (s == "auto") m = RigidMode::kAuto;
  else if (s == "on" || s == "true") m = RigidMode::kOn;
  else if (s == "off" || s == "false") m = RigidMode::kOff;
  else throw Error("unknown rigid mode '" + s + "' (auto, on, off)");
}

struct TrainConfig {
  int tau = 5;
  double lr = 1e-4;
  double lr_final = 0.0;  // > 0: decay exponentially per epoch from lr down to this
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 16;
  int epochs = 10;
  int samples_per_epoch = 0;     // 0 = every valid start frame once
  double lambda_edge = 0.1;
  double lambda_rigid = 1.0;
  RigidMode rigid = RigidMode::kAuto;  // auto: on for blob datasets only
  bool sum_over_vertices = false;      // raw sum instead of the vertex/coordinate mean
  bool augment_yaw = false;            // rotate each training window by a random angle about z
  double validation_fraction = 0.2;    // trailing episodes held out when no validation set is given
  int validation_stride = 5;           // every n-th start frame is evaluated
  int threads = 0;                     // 0 = hardware concurrency
  std::uint64_t rng_seed = 0;

  template <class F>
  void visit(F&& f) {
    f("tau", tau);
    f("lr", lr);
    f("lr_final", lr_final);
    f("beta1", beta1);
    f("beta2", beta2);
    f("adam_eps", adam_eps);
    f("batch_size", batch_size);
    f("epochs", epochs);
    f("samples_per_epoch", samples_per_epoch);
    f("lambda_edge", lambda_edge);
    f("lambda_rigid", lambda_rigid);
    f("rigid", rigid);
    f("sum_over_vertices", sum_over_vertices);
    f("augment_yaw", augment_yaw);
    f("validation_fraction", validation_fraction);
    f("validation_stride", validation_stride);
    f("threads", threads);
    f("rng_seed", rng_seed);
  }

  void validate() const {
    if (tau < 1) throw Error("train: tau must be at least 1");
    if (!(lr > 0.0)) throw Error("train: lr must be positive");
    if (!(lr_final >= 0.0)) throw Error("train: lr_final must be non-negative");
    if (!(lambda_edge >= 0.0 && lambda_rigid >= 0.0)) throw Error("train: lambdas must be non-negative");
    if (batch_size < 1 || epochs < 0 || samples_per_epoch < 0 || validation_stride < 1 || threads < 0)
      throw Error("train: batch_size, epochs, samples_per_epoch, validation_stride, threads out of range");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0))
      throw Error("train: validation_fraction must lie in [0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0))
      throw Error("train: invalid Adam constants");
  }
};

// --- losses -----------------------------------------------------------------
//
// Each loss has a plain form and a form that also accumulates gradients with
// respect to its position arguments.

inline double loss_pred(std::span<const std::vector<Vec3>> pred, std::span<const std::vector<Vec3>> truth,
                        bool sum_over_vertices = false, std::vector<std::vector<Vec3>>* d_pred = nullptr) {
  if (pred.size() != truth.size()) throw Error("loss_pred: horizon lengths differ");
  double total = 0.0;
  for (std::size_t s = 0; s < pred.size(); ++s) {
    if (pred[s].size() != truth[s].size() || pred[s].empty()) throw Error("loss_pred: vertex counts differ");
    const double norm = sum_over_vertices ? 1.0 : 1.0 / (3.0 * static_cast<double>(pred[s].size()));
    for (std::size_t i = 0; i < pred[s].size(); ++i) {
      const Vec3 d = pred[s][i] - truth[s][i];
      total += norm * d.squaredNorm();
      if (d_pred) (*d_pred)[s][i] += 2.0 * norm * d;
    }
  }
  return total;
}

/// Mean over the given edges of the squared change in edge length.
inline double loss_edge(std::span<const Vec3> pred, std::span<const Edge> edges, std::span<const Vec3> prev,
                        std::vector<Vec3>* d_pred = nullptr, std::vector<Vec3>* d_prev = nullptr) {
  if (pred.size() != prev.size()) throw Error("loss_edge: position counts differ");
  for (const auto& e : edges)
    if (e.sender >= pred.size() || e.receiver >= pred.size()) throw Error("loss_edge: edge endpoint out of range");
  if (edges.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(edges.size());
  double total = 0.0;
  for (const auto& e : edges) {
    const Vec3 a = pred[e.receiver] - pred[e.sender];
    const Vec3 b = prev[e.receiver] - prev[e.sender];
    const double la = a.norm(), lb = b.norm();
    const double diff = la - lb;
    total += inv * diff * diff;
    if (d_pred && la > 0.0) {
      const Vec3 g = 2.0 * inv * diff * a / la;
      (*d_pred)[e.receiver] += g;
      (*d_pred)[e.sender] -= g;
    }
    if (d_prev && lb > 0.0) {
      const Vec3 g = -2.0 * inv * diff * b / lb;
      (*d_prev)[e.receiver] += g;
      (*d_prev)[e.sender] -= g;
    }
  }
  return total;
}

/// Mean squared residual between the prediction and the best rigid motion of
/// the previous positions. The fit is optimal, so its own dependence on the
/// inputs drops out of the gradient.
inline double loss_rigid(std::span<const Vec3> pred, std::span<const Vec3> prev, std::vector<Vec3>* d_pred = nullptr,
                         std::vector<Vec3>* d_prev = nullptr) {
  if (pred.size() != prev.size()) throw Error("loss_rigid: position counts differ");
  if (pred.size() < 3) throw Error("loss_rigid: need at least three vertices");
  const auto fit = fit_rigid_transform(prev, pred);
  if (fit.degenerate) {
    log::warn("loss_rigid: degenerate rigid fit, term skipped");
    return 0.0;
  }
  const auto& t = fit.transform;
  const double inv = 1.0 / static_cast<double>(pred.size());
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Vec3 r = pred[i] - t.apply(prev[i]);
    total += inv * r.squaredNorm();
    if (d_pred) (*d_pred)[i] += 2.0 * inv * r;
    if (d_prev) (*d_prev)[i] -= 2.0 * inv * (t.rotation.transpose() * r);
  }
  return total;
}

struct LossParts {
  double pred = 0.0, edge = 0.0, rigid = 0.0;
  double total(const TrainConfig& c, bool rigid_on) const {
    return pred + c.lambda_edge * edge + (rigid_on ? c.lambda_rigid * rigid : 0.0);
  }
  LossParts& operator+=(const LossParts& o) {
    pred += o.pred;
    edge += o.edge;
    rigid += o.rigid;
    return *this;
  }
  LossParts scaled(double s) const { return {pred * s, edge * s, rigid * s}; }
};

/// One training window: ground-truth object frames t-k..t+tau at fixed
/// control vertices, and effector positions a_{t-k}..a_{t+tau}.
struct TrainWindow {
  std::vector<std::vector<Vec3>> objects;  // k + 1 + tau frames
  std::vector<Vec3> effector;              // k + 1 + tau positions
  double table_height = 0.0;
};

inline TrainWindow make_window(const TrackedSequence& seq, std::size_t t, std::size_t k, std::size_t tau, double d_v) {
  if (t + tau >= seq.frames()) throw Error("make_window: start frame leaves no room for the horizon");
  const auto idx = farthest_point_sample(seq.positions[t], MinSpacing{d_v});
  TrainWindow w;
  w.table_height = seq.table_height;
  for (std::size_t s = 0; s < k + 1 + tau; ++s) {
    // Frames before the episode start repeat frame 0 (zero motion).
    const std::size_t f = t + s >= k ? t + s - k : 0;
    w.objects.push_back(gather(std::span<const Vec3>(seq.positions[f]), idx));
    w.effector.push_back(seq.actions[f]);
  }
  return w;
}

/// Rotates a window about the vertical axis through the origin. Gravity and
/// the table are unchanged by this, so the rotated window is equally valid
/// training data.
inline void rotate_window(TrainWindow& w, double angle) {
  const Mat3 r = Eigen::AngleAxisd(angle, Vec3::UnitZ()).toRotationMatrix();
  for (auto& f : w.objects)
    for (auto& p : f) p = r * p;
  for (auto& p : w.effector) p = r * p;
}

/// Loss of a tau-step rollout from a window and, when `grad` is given, its
/// exact gradient with respect to every parameter (backpropagation through
/// the whole rollout, including the recurrent positions).
inline LossParts window_loss(const DynModelParams& params, const TrainWindow& w, const TrainConfig& cfg,
                             bool rigid_on, DynModelParams* grad) {
  const std::size_t k = static_cast<std::size_t>(params.config.k);
  const std::size_t tau = w.objects.size() - k - 1;
  std::vector<std::vector<Vec3>> objects(w.objects.begin(), w.objects.begin() + static_cast<std::ptrdiff_t>(k + 1));
  std::vector<Vec3> effector(w.effector.begin(), w.effector.begin() + static_cast<std::ptrdiff_t>(k + 1));
  std::span<const Vec3> actions(w.effector.data() + k + 1, tau);
  std::vector<RolloutStep> tape;
  const auto pred = rollout_window(params, objects, effector, actions, w.table_height, grad ? &tape : nullptr);
  const std::span<const std::vector<Vec3>> truth(w.objects.data() + k + 1, tau);
  const std::size_t no = pred.front().size();

  // Positions of every object slot: k + 1 given frames, then tau predictions.
  std::vector<std::vector<Vec3>> slots = objects;
  slots.insert(slots.end(), pred.begin(), pred.end());
  std::vector<std::vector<Vec3>> d_slots(slots.size(), std::vector<Vec3>(no, Vec3::Zero()));
  std::vector<std::vector<Vec3>> d_pred(tau, std::vector<Vec3>(no, Vec3::Zero()));

  LossParts parts;
  parts.pred = loss_pred(pred, truth, cfg.sum_over_vertices, grad ? &d_pred : nullptr);
  std::vector<VertexKind> kinds(no, VertexKind::kObject);
  kinds.push_back(VertexKind::kEffector);
  const double we = cfg.lambda_edge;
  const double wr = rigid_on ? cfg.lambda_rigid : 0.0;
  for (std::size_t s = 0; s < tau; ++s) {
    const auto& prev = slots[k + s];
    // Object-object edges of the graph the model used for step s.
    std::vector<Edge> edges;
    if (grad) {
      edges = tape[s].edges;
    } else {
      std::vector<Vec3> cur = prev;
      cur.push_back(w.effector[k + 1 + s]);
      edges = connect(cur, kinds, params.config.d_e);
    }
    std::erase_if(edges, [](const Edge& e) { return e.kind != EdgeKind::kObjectObject; });
    std::vector<Vec3> gp(no, Vec3::Zero()), gq(no, Vec3::Zero());
    parts.edge += loss_edge(pred[s], edges, prev, grad ? &gp : nullptr, grad ? &gq : nullptr);
    if (grad) {
      for (std::size_t i = 0; i < no; ++i) {
        d_slots[k + 1 + s][i] += we * gp[i];
        d_slots[k + s][i] += we * gq[i];
      }
    }
    if (rigid_on && no >= 3) {
      std::fill(gp.begin(), gp.end(), Vec3::Zero());
      std::fill(gq.begin(), gq.end(), Vec3::Zero());
      parts.rigid += loss_rigid(pred[s], prev, grad ? &gp : nullptr, grad ? &gq : nullptr);
      if (grad) {
        for (std::size_t i = 0; i < no; ++i) {
          d_slots[k + 1 + s][i] += wr * gp[i];
          d_slots[k + s][i] += wr * gq[i];
        }
      }
    }
    if (grad)
      for (std::size_t i = 0; i < no; ++i) d_slots[k + 1 + s][i] += d_pred[s][i];
  }
  if (!grad) return parts;

  // Reverse through the rollout. Slot k+1+s = slot k+s + motion_s, and the
  // features of step s read slots s..k+s.
  for (std::size_t s = tau; s-- > 0;) {
    const auto& st = tape[s];
    nn::Matrix d_motion = nn::Matrix::Zero(static_cast<Eigen::Index>(no + 1), 3);
    for (std::size_t i = 0; i < no; ++i) {
      d_motion.row(static_cast<Eigen::Index>(i)) = d_slots[k + 1 + s][i].transpose();
      d_slots[k + s][i] += d_slots[k + 1 + s][i];
    }
    const FeatureGrad fg = backward(params, st.features, st.edges, st.cache, d_motion, *grad);
    for (std::size_t i = 0; i < no; ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      for (std::size_t j = 0; j < k; ++j) {
        const Vec3 g = fg.vertex.row(r).segment(static_cast<Eigen::Index>(3 * j), 3).transpose();
        // motion j = slot[k+s-j] - slot[k+s-j-1]
        d_slots[k + s - j][i] += g;
        d_slots[k + s - j - 1][i] -= g;
      }
      d_slots[k + s][i].z() += fg.vertex(r, static_cast<Eigen::Index>(3 * k + 2));
    }
    for (std::size_t e = 0; e < st.edges.size(); ++e) {
      const Vec3 g = fg.edge.row(static_cast<Eigen::Index>(e)).head(3).transpose();
      const auto& edge = st.edges[e];
      if (edge.receiver < no) d_slots[k + s][edge.receiver] += g;
      if (edge.sender < no) d_slots[k + s][edge.sender] -= g;
    }
  }
  return parts;
}

// --- optimizer ----------------------------------------------------------------

/// Adam with bias correction on a flat parameter vector.
inline void adam_step(std::vector<double>& theta, const std::vector<double>& g, TrainState& s, const TrainConfig& c) {
  if (s.adam_m.size() != theta.size()) {
    s.adam_m.assign(theta.size(), 0.0);
    s.adam_v.assign(theta.size(), 0.0);
  }
  ++s.step;
  const double b1t = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
  const double b2t = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    s.adam_m[i] = c.beta1 * s.adam_m[i] + (1.0 - c.beta1) * g[i];
    s.adam_v[i] = c.beta2 * s.adam_v[i] + (1.0 - c.beta2) * g[i] * g[i];
    theta[i] -= c.lr * (s.adam_m[i] / b1t) / (std::sqrt(s.adam_v[i] / b2t) + c.adam_eps);
  }
}

// --- training loop ------------------------------------------------------------

/// Learning rate for a 0-based epoch.
inline double epoch_lr(const TrainConfig& c, std::uint64_t epoch) {
  if (c.lr_final <= 0.0 || c.epochs <= 1) return c.lr;
  const double f = static_cast<double>(epoch) / static_cast<double>(c.epochs - 1);
  return c.lr * std::pow(c.lr_final / c.lr, std::min(f, 1.0));
}

struct EpochRecord {
  std::uint64_t epoch = 0;  // 1-based
  std::uint64_t step = 0;
  LossParts train, validation;
  double train_total = 0.0, validation_total = 0.0;
  bool has_validation = false;
  double wall_seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::filesystem::path best_checkpoint, last_checkpoint;
};

struct StartFrame {
  std::uint32_t episode;
  std::uint32_t t;
};

inline std::vector<StartFrame> start_frames(const std::vector<TrackedSequence>& eps, std::span<const std::size_t> which,
                                            std::size_t tau, std::size_t stride = 1) {
  std::vector<StartFrame> out;
  for (auto e : which)
    for (std::size_t t = 0; t + tau < eps[e].frames(); t += stride)
      out.push_back({static_cast<std::uint32_t>(e), static_cast<std::uint32_t>(t)});
  return out;
}

inline nlohmann::json to_json(const EpochRecord& r) {
  nlohmann::json j;
  j["epoch"] = r.epoch;
  j["step"] = r.step;
  j["train_loss"] = r.train_total;
  j["train_pred"] = r.train.pred;
  j["train_edge"] = r.train.edge;
  j["train_rigid"] = r.train.rigid;
  if (r.has_validation) {
    j["val_loss"] = r.validation_total;
    j["val_pred"] = r.validation.pred;
    j["val_edge"] = r.validation.edge;
    j["val_rigid"] = r.validation.rigid;
  }
  j["wall_s"] = r.wall_seconds;
  return j;
}

struct TrainInputs {
  std::vector<TrackedSequence> train;
  std::vector<TrackedSequence> validation;  // may be empty
  bool rigid_object = false;                // what RigidMode::kAuto resolves to
};

/// Splits a dataset by episode: the trailing fraction becomes validation.
inline TrainInputs split_dataset(const Dataset& ds, const TrainConfig& cfg) {
  TrainInputs in;
  const std::size_t n = ds.episodes.size();
  std::size_t nval = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(n)));
  if (nval >= n) nval = n > 0 ? n - 1 : 0;
  for (std::size_t e = 0; e < n; ++e) (e + nval < n ? in.train : in.validation).push_back(ds.episodes[e]);
  const auto it = ds.manifest.find("world.object");
  in.rigid_object = it != ds.manifest.end() && it->second == "blob";
  return in;
}

struct TrainOptions {
  std::filesystem::path out_dir;   // checkpoints and report; empty = keep in memory only
  bool resume = false;             // continue from out_dir/last.ckpt
  std::function<void(const EpochRecord&)> on_epoch;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// Mean loss over a fixed set of start frames, no gradients.
inline LossParts evaluate(const DynModelParams& params, const std::vector<TrackedSequence>& eps,
                          const std::vector<StartFrame>& starts, const TrainConfig& cfg, bool rigid_on) {
  const std::size_t k = static_cast<std::size_t>(params.config.k);
  std::vector<LossParts> parts(starts.size());
  parallel_for(starts.size(), static_cast<unsigned>(cfg.threads), [&](std::size_t i) {
    const auto w = make_window(eps[starts[i].episode], starts[i].t, k, static_cast<std::size_t>(cfg.tau), params.config.d_v);
    parts[i] = window_loss(params, w, cfg, rigid_on, nullptr);
  });
  LossParts total;
  for (const auto& p : parts) total += p;
  return starts.empty() ? total : total.scaled(1.0 / static_cast<double>(starts.size()));
}

inline DynModelParams train(const TrainInputs& data, const ModelConfig& model_cfg, const TrainConfig& cfg,
                            TrainReport& report, const TrainOptions& opt = {}) {
  namespace fs = std::filesystem;
  cfg.validate();
  model_cfg.validate();
  const std::size_t k = static_cast<std::size_t>(model_cfg.k);
  const std::size_t tau = static_cast<std::size_t>(cfg.tau);
  if (data.train.empty()) throw Error("train: the training set has no episodes");
  for (const auto* set : {&data.train, &data.validation})
    for (std::size_t e = 0; e < set->size(); ++e) {
      const auto& ep = (*set)[e];
      if (ep.frames() <= tau + k)
        throw Error("train: episodes need more than tau + k = " + std::to_string(tau + k) + " frames");
      if (ep.actions.size() != ep.frames()) throw Error("train: episode " + std::to_string(e) + " has mismatched actions");
      for (std::size_t t = 0; t < ep.frames(); ++t) {
        bool finite = ep.actions[t].allFinite();
        for (const auto& q : ep.positions[t]) finite = finite && q.allFinite();
        if (!finite)
          throw Error("train: non-finite position in episode " + std::to_string(e) + ", frame " + std::to_string(t));
      }
    }
  const bool rigid_on = cfg.rigid == RigidMode::kOn || (cfg.rigid == RigidMode::kAuto && data.rigid_object);

  std::vector<std::size_t> train_ids(data.train.size()), val_ids(data.validation.size());
  std::iota(train_ids.begin(), train_ids.end(), std::size_t{0});
  std::iota(val_ids.begin(), val_ids.end(), std::size_t{0});
  const auto train_starts = start_frames(data.train, train_ids, tau);
  const auto val_starts = start_frames(data.validation, val_ids, tau, static_cast<std::size_t>(cfg.validation_stride));
  if (train_starts.empty()) throw Error("train: no valid start frames");

  DynModelParams params = DynModelParams::random(model_cfg);
  TrainState state;
  report = {};
  if (!opt.out_dir.empty()) {
    fs::create_directories(opt.out_dir);
    report.best_checkpoint = opt.out_dir / "best.ckpt";
    report.last_checkpoint = opt.out_dir / "last.ckpt";
  }
  const fs::path report_path = opt.out_dir.empty() ? fs::path() : opt.out_dir / "report.jsonl";
  if (opt.resume) {
    if (opt.out_dir.empty()) throw Error("train: resume needs an output directory");
    auto ck = load_checkpoint(report.last_checkpoint);
    if (!ck.state) throw Error("'" + report.last_checkpoint.string() + "' has no optimizer state to resume from");
    params = std::move(ck.params);
    state = std::move(*ck.state);
    auto flat_cfg = echo_config(model_cfg, "model");
    if (echo_config(params.config, "model") != flat_cfg)
      throw Error("train: model configuration differs from the checkpoint being resumed");
    // Keep only the report lines of completed epochs.
    if (fs::exists(report_path)) {
      std::ifstream in(report_path);
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        if (j.at("epoch").get<std::uint64_t>() > state.epoch) break;
        EpochRecord r;
        r.epoch = j.at("epoch").get<std::uint64_t>();
        r.step = j.at("step").get<std::uint64_t>();
        r.train = {j.at("train_pred").get<double>(), j.at("train_edge").get<double>(), j.at("train_rigid").get<double>()};
        r.train_total = j.at("train_loss").get<double>();
        if (j.contains("val_loss")) {
          r.has_validation = true;
          r.validation = {j.at("val_pred").get<double>(), j.at("val_edge").get<double>(), j.at("val_rigid").get<double>()};
          r.validation_total = j.at("val_loss").get<double>();
        }
        r.wall_seconds = j.at("wall_s").get<double>();
        report.epochs.push_back(r);
      }
    }
  }
  if (!report_path.empty()) {
    std::ofstream out(report_path, std::ios::trunc);
    if (!out) throw Error("cannot open '" + report_path.string() + "' for writing");
    for (const auto& r : report.epochs) out << to_json(r).dump() << '\n';
  }

  std::vector<double> theta = params.flatten();
  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  const unsigned threads = static_cast<unsigned>(cfg.threads);
  std::vector<DynModelParams> item_grads;
  std::vector<LossParts> item_loss;
  for (std::uint64_t epoch = state.epoch; epoch < static_cast<std::uint64_t>(cfg.epochs); ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainConfig step_cfg = cfg;
    step_cfg.lr = epoch_lr(cfg, epoch);
    std::mt19937_64 rng(detail::mix_seed(cfg.rng_seed, epoch));
    auto order = train_starts;
    std::shuffle(order.begin(), order.end(), rng);
    if (cfg.samples_per_epoch > 0 && order.size() > static_cast<std::size_t>(cfg.samples_per_epoch))
      order.resize(static_cast<std::size_t>(cfg.samples_per_epoch));
    LossParts epoch_loss;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += batch) {
      const std::size_t nb = std::min(batch, order.size() - b0);
      if (item_grads.size() < nb) item_grads.resize(nb, DynModelParams::zeros(model_cfg));
      item_loss.assign(nb, {});
      std::vector<double> yaw(nb, 0.0);
      if (cfg.augment_yaw)
        for (auto& a : yaw) a = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
      parallel_for(nb, threads, [&](std::size_t i) {
        auto& g = item_grads[i];
        g.visit([](const std::string&, auto& t) { t.setZero(); });
        const auto& sf = order[b0 + i];
        auto w = make_window(data.train[sf.episode], sf.t, k, tau, model_cfg.d_v);
        if (cfg.augment_yaw) rotate_window(w, yaw[i]);
        item_loss[i] = window_loss(params, w, cfg, rigid_on, &g);
      });
      // Deterministic reduction in batch order.
      std::vector<double> grad(theta.size(), 0.0);
      LossParts batch_loss;
      for (std::size_t i = 0; i < nb; ++i) {
        batch_loss += item_loss[i];
        std::size_t off = 0;
        item_grads[i].visit([&](const std::string&, auto& t) {
          for (Eigen::Index j = 0; j < t.size(); ++j) grad[off + static_cast<std::size_t>(j)] += t.data()[j];
          off += static_cast<std::size_t>(t.size());
        });
      }
      const double inv = 1.0 / static_cast<double>(nb);
      for (auto& g : grad) g *= inv;
      const double total = batch_loss.total(cfg, rigid_on) * inv;
      if (!std::isfinite(total))
        throw Error("train: non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                    std::to_string(state.step + 1));
      adam_step(theta, grad, state, step_cfg);
      params.unflatten(theta);
      epoch_loss += batch_loss;
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.step = state.step;
    rec.train = epoch_loss.scaled(1.0 / static_cast<double>(order.size()));
    rec.train_total = rec.train.total(cfg, rigid_on);
    if (!val_starts.empty()) {
      rec.has_validation = true;
      rec.validation = evaluate(params, data.validation, val_starts, cfg, rigid_on);
      rec.validation_total = rec.validation.total(cfg, rigid_on);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    state.epoch = epoch + 1;
    const double score = rec.has_validation ? rec.validation_total : rec.train_total;
    const bool best = score < state.best_validation;
    if (best) state.best_validation = score;
    report.epochs.push_back(rec);
    if (!opt.out_dir.empty()) {
      const io::KeyValues extra = echo_config(cfg, "train");
      if (best) save_checkpoint(report.best_checkpoint, {params, state}, extra);
      save_checkpoint(report.last_checkpoint, {params, state}, extra);
      std::ofstream out(report_path, std::ios::app);
      out << to_json(rec).dump() << '\n';
      if (!out) throw Error("write failed for '" + report_path.string() + "'");
    }
    if (opt.on_epoch) opt.on_epoch(rec);
  }
  return params;
}

}  // namespace gsdyn
