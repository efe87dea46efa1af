#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gsdyn/geom.hpp"

namespace gsdyn {

enum class VertexKind : std::uint8_t { kObject = 0, kEffector = 1 };
enum class EdgeKind : std::uint8_t { kObjectObject = 0, kObjectRobot = 1 };

struct Edge {
  std::uint32_t sender;
  std::uint32_t receiver;
  EdgeKind kind;
  bool operator==(const Edge&) const = default;
};

/// Sparse control graph at one instant. Object vertices come first, the
/// end-effector vertex is last. `history` holds the k previous frames of all
/// vertices, oldest first.
struct ControlGraph {
  std::vector<Vec3> positions;
  std::vector<std::vector<Vec3>> history;
  std::vector<VertexKind> kinds;
  std::vector<Edge> edges;
  std::vector<std::size_t> source_index;  // dense particle index of each object vertex
  double d_v = 0.05;
  double d_e = 0.1;
  double table_height = 0.0;

  std::size_t size() const { return positions.size(); }
  std::size_t num_objects() const { return source_index.size(); }
  std::size_t history_length() const { return history.size(); }
};

/// All ordered pairs closer than d_e (both directions, no self-edges), typed by
/// endpoint kinds. Pairs are listed sender-major so the order is canonical.
inline std::vector<Edge> connect(std::span<const Vec3> positions, std::span<const VertexKind> kinds, double d_e) {
  std::vector<Edge> edges;
  const double r2 = d_e * d_e;
  for (std::size_t i = 0; i < positions.size(); ++i)
    for (std::size_t j = 0; j < positions.size(); ++j) {
      if (i == j || (positions[i] - positions[j]).squaredNorm() > r2) continue;
      if (kinds[i] == VertexKind::kEffector && kinds[j] == VertexKind::kEffector) continue;
      const bool robot = kinds[i] == VertexKind::kEffector || kinds[j] == VertexKind::kEffector;
      edges.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j),
                       robot ? EdgeKind::kObjectRobot : EdgeKind::kObjectObject});
    }
  return edges;
}

/// Past dense frames and effector positions used to fill a graph's history.
/// Dense frames must index particles the same way as the current points.
/// Missing frames (fewer than k supplied) repeat the oldest one available,
/// which reads as zero motion.
struct HistorySource {
  std::vector<std::vector<Vec3>> object_frames;  // oldest first
  std::vector<Vec3> effector_positions;          // oldest first
};

/// Graph on a fixed choice of control particles, so that vertex i keeps
/// tracking the same particle from frame to frame.
inline ControlGraph build_graph_at(std::span<const std::size_t> indices, std::span<const Vec3> object_points,
                                   const Vec3& effector_pos, double d_e, std::size_t k, const HistorySource& history = {},
                                   double table_height = 0.0) {
  if (indices.empty()) throw Error("build_graph: no control vertices");
  if (!(d_e > 0.0)) throw Error("build_graph: d_e must be positive");
  ControlGraph g;
  g.d_e = d_e;
  g.table_height = table_height;
  g.source_index.assign(indices.begin(), indices.end());
  for (auto i : g.source_index) {
    if (i >= object_points.size()) throw Error("build_graph: control index out of range");
    g.positions.push_back(object_points[i]);
    g.kinds.push_back(VertexKind::kObject);
  }
  g.positions.push_back(effector_pos);
  g.kinds.push_back(VertexKind::kEffector);
  for (const auto& f : history.object_frames)
    if (f.size() != object_points.size()) throw Error("build_graph: history frame has a different particle count");

  g.history.resize(k);
  for (std::size_t s = 0; s < k; ++s) {
    // Slot s is frame t - k + s.
    const std::size_t back = k - s;
    auto& frame = g.history[s];
    if (history.object_frames.empty()) {
      frame.assign(g.positions.begin(), g.positions.end() - 1);
    } else {
      const auto& src = history.object_frames[history.object_frames.size() >= back ? history.object_frames.size() - back : 0];
      for (auto i : g.source_index) frame.push_back(src[i]);
    }
    if (history.effector_positions.empty())
      frame.push_back(effector_pos);
    else
      frame.push_back(history.effector_positions[history.effector_positions.size() >= back
                                                      ? history.effector_positions.size() - back
                                                      : 0]);
  }
  g.edges = connect(g.positions, g.kinds, d_e);
  return g;
}

inline ControlGraph build_graph(std::span<const Vec3> object_points, const Vec3& effector_pos, double d_v, double d_e,
                                std::size_t k, const HistorySource& history = {}, double table_height = 0.0) {
  if (object_points.empty()) throw Error("build_graph: no object points");
  const auto idx = farthest_point_sample(object_points, MinSpacing{d_v});
  auto g = build_graph_at(idx, object_points, effector_pos, d_e, k, history, table_height);
  g.d_v = d_v;
  return g;
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Network inputs for one graph. Vertex row: k motion vectors (most recent
/// first), one-hot {object, effector}, height above the table. Edge row:
/// receiver minus sender position, one-hot {obj-obj, obj-robot}.
struct FeatureBatch {
  RowMatrix vertex;
  RowMatrix edge;
  std::size_t k = 0;

  static constexpr std::size_t edge_dim() { return 5; }
  static std::size_t vertex_dim(std::size_t k) { return 3 * k + 3; }
  bool is_effector(std::size_t i) const { return vertex(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(3 * k + 1)) == 1.0; }
};

/// Features from a window of k + 1 frames (oldest first; the last is current).
inline FeatureBatch encode_window(std::span<const std::vector<Vec3>> window, std::span<const VertexKind> kinds,
                                  std::span<const Edge> edges, double table_height) {
  if (window.empty()) throw Error("encode_features: empty window");
  const std::size_t k = window.size() - 1;
  const std::size_t n = kinds.size();
  for (const auto& f : window)
    if (f.size() != n) throw Error("encode_features: history frame size differs from vertex count");
  FeatureBatch fb;
  fb.k = k;
  fb.vertex.setZero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(FeatureBatch::vertex_dim(k)));
  const auto& cur = window[k];
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    for (std::size_t j = 0; j < k; ++j) {
      const Vec3 m = window[k - j][i] - window[k - j - 1][i];
      for (int c = 0; c < 3; ++c) fb.vertex(r, static_cast<Eigen::Index>(3 * j + c)) = m(c);
    }
    fb.vertex(r, static_cast<Eigen::Index>(3 * k + (kinds[i] == VertexKind::kEffector ? 1 : 0))) = 1.0;
    fb.vertex(r, static_cast<Eigen::Index>(3 * k + 2)) = cur[i].z() - table_height;
  }
  fb.edge.setZero(static_cast<Eigen::Index>(edges.size()), 5);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const auto r = static_cast<Eigen::Index>(e);
    const Vec3 d = cur[edges[e].receiver] - cur[edges[e].sender];
    for (int c = 0; c < 3; ++c) fb.edge(r, c) = d(c);
    fb.edge(r, 3 + static_cast<Eigen::Index>(edges[e].kind)) = 1.0;
  }
  if (!fb.vertex.allFinite() || !fb.edge.allFinite()) throw Error("encode_features: non-finite positions");
  return fb;
}

inline FeatureBatch encode_features(const ControlGraph& g, std::size_t k) {
  if (g.history.size() != k)
    throw Error("encode_features: history has " + std::to_string(g.history.size()) + " frames, expected " +
                std::to_string(k));
  std::vector<std::vector<Vec3>> window = g.history;
  window.push_back(g.positions);
  return encode_window(window, g.kinds, g.edges, g.table_height);
}

}  // namespace gsdyn
