#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "iflame/types.hpp"

namespace iflame {

inline constexpr Real kDefaultNormEps = 1e-6;
inline constexpr Real kDefaultRopeBase = 10000.0;

Real sigmoid(Real z);
Real silu(Real z);
Real silu_grad(Real z);

// ---------------------------------------------------------------------------
// RMS normalization: gain * x / sqrt(mean(x^2) + eps)

Vec rms_norm(const Vec& x, const Vec& gain, Real eps = kDefaultNormEps);

/// Row-wise RMSNorm of X (n x d) with a 1 x d gain. inv_rms receives
/// 1/sqrt(mean(x^2)+eps) per row for the backward pass.
Mat rms_norm_rows(const Mat& x, const Mat& gain, Real eps, Vec* inv_rms = nullptr);
Mat rms_norm_rows_backward(const Mat& dy, const Mat& x, const Mat& gain, const Vec& inv_rms,
                           Mat* dgain);

// Unit-gain RMSNorm applied independently to each head's slice of each row.
Mat head_rms_norm(const Mat& x, int heads, Real eps, Mat* inv_rms = nullptr);
Mat head_rms_norm_backward(const Mat& dy, const Mat& x, int heads, const Mat& inv_rms);

// ---------------------------------------------------------------------------
// SwiGLU feed-forward: down( silu(gate x) * (up x) )

struct FfnWeights {
  Mat gate;  // h x d
  Mat up;    // h x d
  Mat down;  // d x h
};

/// 8d/3 rounded to the nearest multiple of 64, at least 64.
int default_ffn_hidden(int dim);

Vec swiglu_ffn(const Vec& x, const FfnWeights& w);

struct FfnCache {
  Mat x, g, u;
};

Mat swiglu_rows(const Mat& x, const FfnWeights& w, FfnCache* cache = nullptr);
Mat swiglu_rows_backward(const Mat& dy, const FfnCache& cache, const FfnWeights& w, FfnWeights& grad);

// ---------------------------------------------------------------------------
// Rotary position embedding

class RotaryTable {
 public:
  RotaryTable() = default;
  RotaryTable(int head_dim, int max_positions, Real base = kDefaultRopeBase);

  int head_dim() const { return head_dim_; }
  int max_positions() const { return max_positions_; }
  Real base() const { return base_; }

  /// Rotates one head vector in place; inverse applies the transpose.
  void rotate(Real* x, int position, bool inverse = false) const;

 private:
  int head_dim_ = 0;
  int max_positions_ = 0;
  Real base_ = kDefaultRopeBase;
  std::vector<Real> cos_;  // [position][pair]
  std::vector<Real> sin_;
};

Vec rope_apply(const Vec& x, int position, const RotaryTable& table);

/// Rotates every head of every row in place; row r sits at position first + r.
void rope_rows(Mat& x, int heads, const RotaryTable& table, int first_position = 0, bool inverse = false);

// ---------------------------------------------------------------------------
// Loss

/// Mean over valid positions of -log softmax(logits[r])[targets[r]].
/// valid[r] == 0 excludes row r. dlogits, when given, receives the gradient
/// of the mean loss w.r.t. logits.
Real cross_entropy(const Mat& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> valid,
                   Mat* dlogits = nullptr);

/// Per-row log-sum-exp softmax; returns probabilities.
Vec softmax(const Vec& logits);

}  // namespace iflame
