#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "gsdyn/graph.hpp"

namespace gsdyn::nn {

using Matrix = RowMatrix;
using RowVector = Eigen::RowVectorXd;

/// Fully connected layer y = x W + b acting on row batches.
struct Linear {
  Matrix w;  // in x out
  RowVector b;

  Eigen::Index in() const { return w.rows(); }
  Eigen::Index out() const { return w.cols(); }
};

/// Multilayer perceptron with ReLU between layers and a linear output.
struct Mlp {
  std::string name;
  std::vector<Linear> layers;

  Eigen::Index in() const { return layers.front().in(); }
  Eigen::Index out() const { return layers.back().out(); }

  static Mlp make(std::string name, const std::vector<Eigen::Index>& sizes) {
    Mlp m;
    m.name = std::move(name);
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l)
      m.layers.push_back({Matrix::Zero(sizes[l], sizes[l + 1]), RowVector::Zero(sizes[l + 1])});
    return m;
  }

  /// He-uniform weights, zero biases.
  void init(std::mt19937_64& rng, double last_gain = 1.0) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& layer = layers[l];
      const double gain = l + 1 == layers.size() ? last_gain : 1.0;
      const double bound = gain * std::sqrt(6.0 / static_cast<double>(layer.in()));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index i = 0; i < layer.w.size(); ++i) layer.w.data()[i] = u(rng);
      layer.b.setZero();
    }
  }

  template <class F>
  void visit(F&& f) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      f(name + ".w" + std::to_string(l), layers[l].w);
      f(name + ".b" + std::to_string(l), layers[l].b);
    }
  }
};

/// Activations kept for the backward pass: the input of every layer (after
/// the previous ReLU).
struct MlpCache {
  std::vector<Matrix> inputs;
};

inline Matrix forward(const Mlp& m, const Matrix& x, MlpCache* cache) {
  if (x.cols() != m.in())
    throw Error(m.name + ": input has " + std::to_string(x.cols()) + " columns, expected " + std::to_string(m.in()));
  if (cache) cache->inputs.clear();
  Matrix h = x;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    if (cache) cache->inputs.push_back(h);
    Matrix y = h * m.layers[l].w;
    y.rowwise() += m.layers[l].b;
    if (l + 1 < m.layers.size()) y = y.cwiseMax(0.0);
    if (!y.allFinite()) throw Error("non-finite activation in layer " + std::to_string(l) + " of " + m.name);
    h = std::move(y);
  }
  return h;
}

/// Accumulates parameter gradients into `grad` (same shapes as `m`) and
/// returns the gradient with respect to the input.
inline Matrix backward(const Mlp& m, const MlpCache& cache, const Matrix& dy, Mlp& grad) {
  if (cache.inputs.size() != m.layers.size()) throw Error(m.name + ": backward called without a matching forward");
  Matrix d = dy;
  for (std::size_t l = m.layers.size(); l-- > 0;) {
    const Matrix& x = cache.inputs[l];
    if (d.rows() != x.rows() || d.cols() != m.layers[l].out()) throw Error(m.name + ": upstream gradient shape mismatch");
    grad.layers[l].w.noalias() += x.transpose() * d;
    grad.layers[l].b += d.colwise().sum();
    Matrix dx = d * m.layers[l].w.transpose();
    // The input of layer l > 0 is a ReLU output: zero where it was clipped.
    if (l > 0) dx = (x.array() > 0.0).select(dx, 0.0);
    d = std::move(dx);
  }
  return d;
}

}  // namespace gsdyn::nn
