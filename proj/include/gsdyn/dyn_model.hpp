#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "gsdyn/config.hpp"
#include "gsdyn/graph.hpp"
#include "gsdyn/io.hpp"
#include "gsdyn/nn.hpp"

namespace gsdyn {

/// Architecture and graph hyperparameters. They travel with the weights.
struct ModelConfig {
  int k = 3;            // motion history length
  int p = 3;            // message passing rounds
  int hidden = 128;     // latent width
  double d_v = 0.05;    // control vertex spacing (m)
  double d_e = 0.1;     // edge threshold (m)
  double input_scale = 10.0;    // applied to positions and heights before the encoders
  double motion_scale = 100.0;  // applied to motion inputs; decoder outputs are divided by it
  std::uint64_t init_seed = 0;

  template <class F>
  void visit(F&& f) {
    f("k", k);
    f("p", p);
    f("hidden", hidden);
    f("d_v", d_v);
    f("d_e", d_e);
    f("input_scale", input_scale);
    f("motion_scale", motion_scale);
    f("init_seed", init_seed);
  }

  void validate() const {
    if (k < 1 || p < 0 || hidden < 1) throw Error("model: need k >= 1, p >= 0, hidden >= 1");
    if (!(d_v > 0.0 && d_e > 0.0)) throw Error("model: d_v and d_e must be positive");
    if (!(input_scale > 0.0 && motion_scale > 0.0)) throw Error("model: scales must be positive");
  }
};

/// Weights of the message-passing network. The message and update networks
/// are shared across the p rounds.
struct DynModelParams {
  ModelConfig config;
  nn::Mlp vertex_encoder, edge_encoder, message, update, decoder;

  static DynModelParams zeros(const ModelConfig& c) {
    c.validate();
    const Eigen::Index h = c.hidden;
    DynModelParams m;
    m.config = c;
    m.vertex_encoder = nn::Mlp::make("vertex_encoder", {static_cast<Eigen::Index>(FeatureBatch::vertex_dim(c.k)), h, h, h});
    m.edge_encoder = nn::Mlp::make("edge_encoder", {FeatureBatch::edge_dim(), h, h, h});
    m.message = nn::Mlp::make("message", {3 * h, h, h, h});
    m.update = nn::Mlp::make("update", {2 * h, h, h, h});
    m.decoder = nn::Mlp::make("decoder", {h, h, h, 3});
    return m;
  }

  static DynModelParams random(const ModelConfig& c) {
    auto m = zeros(c);
    std::mt19937_64 rng(c.init_seed);
    m.vertex_encoder.init(rng);
    m.edge_encoder.init(rng);
    m.message.init(rng);
    // Residual updates start small so stacked rounds stay well scaled.
    m.update.init(rng, 0.3);
    m.decoder.init(rng, 0.3);
    return m;
  }

  template <class F>
  void visit(F&& f) {
    vertex_encoder.visit(f);
    edge_encoder.visit(f);
    message.visit(f);
    update.visit(f);
    decoder.visit(f);
  }

  std::size_t num_parameters() {
    std::size_t n = 0;
    visit([&](const std::string&, auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  std::vector<double> flatten() {
    std::vector<double> out;
    visit([&](const std::string&, auto& t) { out.insert(out.end(), t.data(), t.data() + t.size()); });
    return out;
  }

  void unflatten(const std::vector<double>& flat) {
    std::size_t off = 0;
    visit([&](const std::string&, auto& t) {
      if (off + static_cast<std::size_t>(t.size()) > flat.size()) throw Error("unflatten: vector too short");
      std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                flat.begin() + static_cast<std::ptrdiff_t>(off + static_cast<std::size_t>(t.size())), t.data());
      off += static_cast<std::size_t>(t.size());
    });
    if (off != flat.size()) throw Error("unflatten: vector too long");
  }

  bool all_finite() {
    bool ok = true;
    visit([&](const std::string&, auto& t) { ok = ok && t.allFinite(); });
    return ok;
  }
};

struct ForwardCache {
  nn::MlpCache vertex_encoder, edge_encoder, decoder;
  std::vector<nn::MlpCache> message, update;
  std::vector<nn::Matrix> latents;  // vertex latents before each round and after the last
  nn::Matrix edge_latent;
};

namespace detail {

inline nn::Matrix scaled_vertex_input(const ModelConfig& c, const FeatureBatch& f) {
  nn::Matrix x = f.vertex;
  x.leftCols(3 * c.k) *= c.motion_scale;
  x.col(3 * c.k + 2) *= c.input_scale;
  return x;
}

inline nn::Matrix scaled_edge_input(const ModelConfig& c, const FeatureBatch& f) {
  nn::Matrix x = f.edge;
  x.leftCols(3) *= c.input_scale;
  return x;
}

inline void check_shapes(const DynModelParams& params, const FeatureBatch& f, std::span<const Edge> edges) {
  const auto& c = params.config;
  if (f.k != static_cast<std::size_t>(c.k) || f.vertex.cols() != params.vertex_encoder.in())
    throw Error("forward: vertex features have " + std::to_string(f.vertex.cols()) + " columns, model expects " +
                std::to_string(params.vertex_encoder.in()));
  if (f.edge.rows() != static_cast<Eigen::Index>(edges.size()) || f.edge.cols() != 5)
    throw Error("forward: edge features do not match the edge list");
  for (const auto& e : edges)
    if (e.sender >= f.vertex.rows() || e.receiver >= f.vertex.rows()) throw Error("forward: edge endpoint out of range");
}

}  // namespace detail

/// Per-vertex motion (n x 3). Effector rows are exactly zero.
inline nn::Matrix forward(const DynModelParams& params, const FeatureBatch& f, std::span<const Edge> edges,
                          ForwardCache* cache = nullptr) {
  detail::check_shapes(params, f, edges);
  const auto& c = params.config;
  const Eigen::Index n = f.vertex.rows();
  const Eigen::Index h = c.hidden;
  ForwardCache local;
  ForwardCache& fc = cache ? *cache : local;
  const bool keep = cache != nullptr;
  fc.message.assign(static_cast<std::size_t>(c.p), {});
  fc.update.assign(static_cast<std::size_t>(c.p), {});
  fc.latents.clear();

  nn::Matrix hv = nn::forward(params.vertex_encoder, detail::scaled_vertex_input(c, f), keep ? &fc.vertex_encoder : nullptr);
  fc.edge_latent = nn::forward(params.edge_encoder, detail::scaled_edge_input(c, f), keep ? &fc.edge_encoder : nullptr);
  const Eigen::Index ne = static_cast<Eigen::Index>(edges.size());
  nn::Matrix msg_in(ne, 3 * h), upd_in(n, 2 * h), agg(n, h);
  for (int r = 0; r < c.p; ++r) {
    if (keep) fc.latents.push_back(hv);
    for (Eigen::Index e = 0; e < ne; ++e) {
      msg_in.row(e).segment(0, h) = hv.row(edges[static_cast<std::size_t>(e)].sender);
      msg_in.row(e).segment(h, h) = hv.row(edges[static_cast<std::size_t>(e)].receiver);
      msg_in.row(e).segment(2 * h, h) = fc.edge_latent.row(e);
    }
    const nn::Matrix msg = nn::forward(params.message, msg_in, keep ? &fc.message[static_cast<std::size_t>(r)] : nullptr);
    agg.setZero();
    for (Eigen::Index e = 0; e < ne; ++e) agg.row(edges[static_cast<std::size_t>(e)].receiver) += msg.row(e);
    upd_in.leftCols(h) = hv;
    upd_in.rightCols(h) = agg;
    hv += nn::forward(params.update, upd_in, keep ? &fc.update[static_cast<std::size_t>(r)] : nullptr);
  }
  if (keep) fc.latents.push_back(hv);
  nn::Matrix out = nn::forward(params.decoder, hv, keep ? &fc.decoder : nullptr) / c.motion_scale;
  for (Eigen::Index i = 0; i < n; ++i)
    if (f.is_effector(static_cast<std::size_t>(i))) out.row(i).setZero();
  return out;
}

struct FeatureGrad {
  nn::Matrix vertex;
  nn::Matrix edge;
};

/// Reverse pass for a forward call that filled `cache`. Parameter gradients
/// are accumulated into `grad`; input-feature gradients are returned.
inline FeatureGrad backward(const DynModelParams& params, const FeatureBatch& f, std::span<const Edge> edges,
                            const ForwardCache& cache, const nn::Matrix& d_motion, DynModelParams& grad) {
  detail::check_shapes(params, f, edges);
  const auto& c = params.config;
  const Eigen::Index n = f.vertex.rows();
  const Eigen::Index h = c.hidden;
  if (d_motion.rows() != n || d_motion.cols() != 3) throw Error("backward: upstream gradient must be n x 3");
  if (cache.latents.size() != static_cast<std::size_t>(c.p) + 1) throw Error("backward: cache does not match forward");
  nn::Matrix d_out = d_motion / c.motion_scale;
  for (Eigen::Index i = 0; i < n; ++i)
    if (f.is_effector(static_cast<std::size_t>(i))) d_out.row(i).setZero();
  nn::Matrix dh = nn::backward(params.decoder, cache.decoder, d_out, grad.decoder);
  const Eigen::Index ne = static_cast<Eigen::Index>(edges.size());
  nn::Matrix d_edge_latent = nn::Matrix::Zero(ne, h);
  for (int r = c.p - 1; r >= 0; --r) {
    const auto ru = static_cast<std::size_t>(r);
    const nn::Matrix d_upd_in = nn::backward(params.update, cache.update[ru], dh, grad.update);
    const nn::Matrix d_agg = d_upd_in.rightCols(h);
    dh += d_upd_in.leftCols(h);
    nn::Matrix d_msg(ne, h);
    for (Eigen::Index e = 0; e < ne; ++e) d_msg.row(e) = d_agg.row(edges[static_cast<std::size_t>(e)].receiver);
    const nn::Matrix d_msg_in = nn::backward(params.message, cache.message[ru], d_msg, grad.message);
    for (Eigen::Index e = 0; e < ne; ++e) {
      dh.row(edges[static_cast<std::size_t>(e)].sender) += d_msg_in.row(e).segment(0, h);
      dh.row(edges[static_cast<std::size_t>(e)].receiver) += d_msg_in.row(e).segment(h, h);
    }
    d_edge_latent += d_msg_in.rightCols(h);
  }
  FeatureGrad g;
  g.vertex = nn::backward(params.vertex_encoder, cache.vertex_encoder, dh, grad.vertex_encoder);
  g.vertex.leftCols(3 * c.k) *= c.motion_scale;
  g.vertex.col(3 * c.k + 2) *= c.input_scale;
  g.edge = ne > 0 ? nn::backward(params.edge_encoder, cache.edge_encoder, d_edge_latent, grad.edge_encoder)
                  : nn::Matrix::Zero(0, 5);
  g.edge.leftCols(3) *= c.input_scale;
  return g;
}

/// Convenience form: runs the forward pass and returns parameter gradients of
/// <upstream, motion>.
inline DynModelParams backward(const DynModelParams& params, const FeatureBatch& f, std::span<const Edge> edges,
                               const nn::Matrix& d_motion) {
  ForwardCache cache;
  forward(params, f, edges, &cache);
  auto grad = DynModelParams::zeros(params.config);
  backward(params, f, edges, cache, d_motion, grad);
  return grad;
}

// --- rollout ----------------------------------------------------------------

/// One recorded step of a rollout, kept when gradients are needed.
struct RolloutStep {
  std::vector<Edge> edges;
  FeatureBatch features;
  ForwardCache cache;
};

/// Recurrent prediction from a window of k + 1 object frames and k + 1
/// effector positions (oldest first). Step h places the effector at
/// actions[h], rebuilds edges from the current positions, predicts object
/// motion and advances. Returns the H predicted object frames.
inline std::vector<std::vector<Vec3>> rollout_window(const DynModelParams& params,
                                                     std::vector<std::vector<Vec3>> objects,
                                                     std::vector<Vec3> effector, std::span<const Vec3> actions,
                                                     double table_height, std::vector<RolloutStep>* tape = nullptr) {
  const auto& c = params.config;
  const std::size_t k = static_cast<std::size_t>(c.k);
  if (objects.size() != k + 1 || effector.size() != k + 1) throw Error("rollout: window must hold k + 1 frames");
  const std::size_t no = objects.back().size();
  std::vector<VertexKind> kinds(no, VertexKind::kObject);
  kinds.push_back(VertexKind::kEffector);
  std::vector<std::vector<Vec3>> window(k + 1);
  std::vector<std::vector<Vec3>> predicted;
  if (tape) tape->clear();
  for (std::size_t step = 0; step < actions.size(); ++step) {
    effector.push_back(actions[step]);
    for (std::size_t s = 0; s <= k; ++s) {
      window[s] = objects[objects.size() - 1 - k + s];
      window[s].push_back(effector[effector.size() - 1 - k + s]);
    }
    auto edges = connect(window[k], kinds, c.d_e);
    auto feats = encode_window(window, kinds, edges, table_height);
    ForwardCache* cache = nullptr;
    if (tape) {
      tape->push_back({std::move(edges), std::move(feats), {}});
      cache = &tape->back().cache;
    }
    const auto& e_ref = tape ? tape->back().edges : edges;
    const auto& f_ref = tape ? tape->back().features : feats;
    const nn::Matrix motion = forward(params, f_ref, e_ref, cache);
    std::vector<Vec3> next = objects.back();
    for (std::size_t i = 0; i < no; ++i) next[i] += motion.row(static_cast<Eigen::Index>(i)).transpose();
    predicted.push_back(next);
    objects.push_back(std::move(next));
  }
  return predicted;
}

/// Rollout from a control graph. Returns H frames of all vertices (objects,
/// then the effector at actions[h]).
inline std::vector<std::vector<Vec3>> rollout(const DynModelParams& params, const ControlGraph& g0,
                                              std::span<const Vec3> actions) {
  const std::size_t k = static_cast<std::size_t>(params.config.k);
  if (actions.empty()) throw Error("rollout: need at least one action");
  if (g0.history.size() != k) throw Error("rollout: graph history length differs from the model's k");
  const std::size_t no = g0.size() - 1;
  std::vector<std::vector<Vec3>> objects;
  std::vector<Vec3> effector;
  for (const auto& f : g0.history) {
    objects.emplace_back(f.begin(), f.begin() + static_cast<std::ptrdiff_t>(no));
    effector.push_back(f.back());
  }
  objects.emplace_back(g0.positions.begin(), g0.positions.begin() + static_cast<std::ptrdiff_t>(no));
  effector.push_back(g0.positions.back());
  auto frames = rollout_window(params, std::move(objects), std::move(effector), actions, g0.table_height);
  for (std::size_t h = 0; h < frames.size(); ++h) frames[h].push_back(actions[h]);
  return frames;
}

// --- checkpoint -------------------------------------------------------------

inline constexpr char kCheckpointMagic[] = "GSDYNCK1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Optimizer and loop state stored next to the weights so training can resume
/// exactly.
struct TrainState {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;  // epochs completed
  double best_validation = std::numeric_limits<double>::infinity();
  std::vector<double> adam_m, adam_v;
};

struct Checkpoint {
  DynModelParams params;
  std::optional<TrainState> state;
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) {
  auto p = ckpt;
  p += ".txt";
  return p;
}

/// Binary layout: magic, u32 version, i32 k, p, hidden, f64 d_v, d_e,
/// input_scale, motion_scale, u64 init_seed, u64 tensor count, then per
/// tensor u64 rows, u64 cols and row-major f64 data in declaration order,
/// then u8 has_state [u64 step, u64 epoch, f64 best, u64 n, f64 m[n], f64 v[n]].
inline void save_checkpoint(const std::filesystem::path& path, Checkpoint ckpt, const io::KeyValues& extra = {}) {
  auto& p = ckpt.params;
  const auto& c = p.config;
  io::BinaryWriter w(path);
  w.magic(kCheckpointMagic);
  w.scalar<std::uint32_t>(kCheckpointVersion);
  w.scalar<std::int32_t>(c.k);
  w.scalar<std::int32_t>(c.p);
  w.scalar<std::int32_t>(c.hidden);
  w.scalar<double>(c.d_v);
  w.scalar<double>(c.d_e);
  w.scalar<double>(c.input_scale);
  w.scalar<double>(c.motion_scale);
  w.scalar<std::uint64_t>(c.init_seed);
  std::uint64_t count = 0;
  p.visit([&](const std::string&, auto&) { ++count; });
  w.scalar<std::uint64_t>(count);
  io::KeyValues manifest{{"format", "gsdyn-checkpoint"}, {"version", std::to_string(kCheckpointVersion)}};
  for (auto& kv : echo_config(c, "model")) manifest.push_back(kv);
  p.visit([&](const std::string& name, auto& t) {
    w.scalar<std::uint64_t>(static_cast<std::uint64_t>(t.rows()));
    w.scalar<std::uint64_t>(static_cast<std::uint64_t>(t.cols()));
    w.doubles(t.data(), static_cast<std::size_t>(t.size()));
    manifest.emplace_back("tensor." + name, std::to_string(t.rows()) + "x" + std::to_string(t.cols()));
  });
  manifest.emplace_back("parameters", std::to_string(p.num_parameters()));
  w.scalar<std::uint8_t>(ckpt.state ? 1 : 0);
  if (ckpt.state) {
    const auto& s = *ckpt.state;
    w.scalar<std::uint64_t>(s.step);
    w.scalar<std::uint64_t>(s.epoch);
    w.scalar<double>(s.best_validation);
    w.scalar<std::uint64_t>(s.adam_m.size());
    w.doubles(s.adam_m);
    w.doubles(s.adam_v);
    manifest.emplace_back("train.step", std::to_string(s.step));
    manifest.emplace_back("train.epochs_completed", std::to_string(s.epoch));
    manifest.emplace_back("train.best_validation", io::fmt_double(s.best_validation));
  }
  w.finish();
  for (const auto& kv : extra) manifest.push_back(kv);
  io::write_key_values(sidecar_path(path), manifest);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  io::BinaryReader r(path);
  r.expect_magic(kCheckpointMagic);
  if (r.scalar<std::uint32_t>() != kCheckpointVersion) throw Error("'" + path.string() + "': unsupported checkpoint version");
  ModelConfig c;
  c.k = r.scalar<std::int32_t>();
  c.p = r.scalar<std::int32_t>();
  c.hidden = r.scalar<std::int32_t>();
  c.d_v = r.scalar<double>();
  c.d_e = r.scalar<double>();
  c.input_scale = r.scalar<double>();
  c.motion_scale = r.scalar<double>();
  c.init_seed = r.scalar<std::uint64_t>();
  try {
    c.validate();
  } catch (const Error& e) {
    throw Error("'" + path.string() + "': " + e.what());
  }
  Checkpoint ckpt{DynModelParams::zeros(c), std::nullopt};
  std::uint64_t expected = 0;
  ckpt.params.visit([&](const std::string&, auto&) { ++expected; });
  if (r.scalar<std::uint64_t>() != expected) throw Error("'" + path.string() + "': tensor count does not match the architecture");
  ckpt.params.visit([&](const std::string& name, auto& t) {
    const auto rows = r.scalar<std::uint64_t>();
    const auto cols = r.scalar<std::uint64_t>();
    if (rows != static_cast<std::uint64_t>(t.rows()) || cols != static_cast<std::uint64_t>(t.cols()))
      throw Error("'" + path.string() + "': tensor " + name + " has the wrong shape");
    r.doubles(t.data(), static_cast<std::size_t>(t.size()));
  });
  if (!ckpt.params.all_finite()) throw Error("'" + path.string() + "': non-finite weights");
  if (r.scalar<std::uint8_t>()) {
    TrainState s;
    s.step = r.scalar<std::uint64_t>();
    s.epoch = r.scalar<std::uint64_t>();
    s.best_validation = r.scalar<double>();
    const auto n = r.scalar<std::uint64_t>();
    if (n != ckpt.params.num_parameters()) throw Error("'" + path.string() + "': optimizer state size mismatch");
    s.adam_m = r.doubles(n);
    s.adam_v = r.doubles(n);
    ckpt.state = std::move(s);
  }
  return ckpt;
}

}  // namespace gsdyn
