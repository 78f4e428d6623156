#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "iflame/hourglass.hpp"
#include "iflame/mesh_codec.hpp"

namespace testutil {

using iflame::Mat;
using iflame::Real;
using iflame::TokenId;
using iflame::Vec;

inline Mat random_mat(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, Real scale = 1.0) {
  std::normal_distribution<Real> n(0.0, scale);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Vec random_vec(std::mt19937_64& rng, Eigen::Index n, Real scale = 1.0) {
  std::normal_distribution<Real> d(0.0, scale);
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = d(rng);
  return v;
}

// max |a - b| / max |b|
template <typename A, typename B>
Real rel_err(const A& a, const B& b) {
  const Real denom = std::max<Real>(b.cwiseAbs().maxCoeff(), 1e-300);
  return (a - b).cwiseAbs().maxCoeff() / denom;
}

inline std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, int vocab) {
  std::uniform_int_distribution<TokenId> d(0, vocab - 1);
  std::vector<TokenId> t(n);
  for (auto& x : t) x = d(rng);
  return t;
}

// Small hourglass used throughout the tests.
inline iflame::ModelConfig micro_config(int dim = 8, int heads = 2) {
  iflame::ModelConfig c;
  c.dim = dim;
  c.heads = heads;
  c.depths = {1, 1, 2, 1, 1};
  c.bins = 16;
  c.max_context = 512;
  c.ffn_hidden = 2 * dim;
  return c;
}

// Random weights with every gain perturbed away from one so gradient checks
// exercise the gain paths.
inline iflame::ModelWeights random_weights(const iflame::ModelConfig& cfg, std::uint64_t seed, Real scale = 0.3) {
  iflame::ModelWeights w = iflame::init_weights(cfg, seed);
  std::mt19937_64 rng(seed ^ 0xABCDEFull);
  w.visit([&](const std::string& name, Mat& m) {
    const bool gain = name.find("norm") != std::string::npos;
    m = gain ? (Mat::Ones(m.rows(), m.cols()) + random_mat(rng, m.rows(), m.cols(), 0.2))
             : random_mat(rng, m.rows(), m.cols(), name == "embedding" ? 1.0 : scale);
  });
  return w;
}

inline iflame::Mesh random_mesh(std::mt19937_64& rng, int vertices, int faces) {
  std::uniform_real_distribution<Real> u(-0.5, 0.5);
  std::uniform_int_distribution<int> pick(0, vertices - 1);
  iflame::Mesh m;
  for (int i = 0; i < vertices; ++i) m.vertices.push_back({u(rng), u(rng), u(rng)});
  for (int f = 0; f < faces; ++f) {
    int a = pick(rng), b = pick(rng), c = pick(rng);
    while (b == a) b = pick(rng);
    while (c == a || c == b) c = pick(rng);
    m.faces.push_back({a, b, c});
  }
  return m;
}

}  // namespace testutil
