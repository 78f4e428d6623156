#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "iflame/nn.hpp"
#include "iflame/types.hpp"

namespace iflame {

enum class AttentionKind { kFull, kLinear };

/// kSimplified: Norm(q (K^T V)) with no activations or gates.
/// kGated: SiLU on q, k, v and a sigmoid output gate.
enum class LinearVariant { kSimplified, kGated };

// ---------------------------------------------------------------------------
// Whole-sequence (training) forms. Q, K, V are n x (heads * head_dim) with
// RoPE already applied; heads occupy contiguous column blocks.

/// Causal softmax(q k^T / sqrt(head_dim)) v per head.
Mat full_attention_parallel(const Mat& q, const Mat& k, const Mat& v, int heads);

void full_attention_parallel_backward(const Mat& dout, const Mat& q, const Mat& k, const Mat& v, int heads,
                                      Mat& dq, Mat& dk, Mat& dv);

/// Causal (Q K^T masked) V per head followed by unit-gain per-head RMSNorm.
/// pre_norm, when given, receives the value before normalization.
Mat linear_attention_parallel(const Mat& q, const Mat& k, const Mat& v, int heads, Real eps = kDefaultNormEps,
                              Mat* pre_norm = nullptr);

void linear_attention_parallel_backward(const Mat& dout, const Mat& q, const Mat& k, const Mat& v, int heads,
                                        Real eps, Mat& dq, Mat& dk, Mat& dv);

// ---------------------------------------------------------------------------
// Incremental (decoding) forms

/// Per-layer key/value store for a full-attention layer. Holds every key and
/// value written so far; writing past capacity is a context overflow.
class KVRing {
 public:
  KVRing(int heads, int head_dim, std::size_t capacity);

  void append(const Vec& k, const Vec& v);
  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  int heads() const { return heads_; }
  int head_dim() const { return head_dim_; }
  const Real* key(std::size_t i) const { return keys_.data() + i * width(); }
  const Real* value(std::size_t i) const { return values_.data() + i * width(); }

  /// Bytes occupied by stored entries at the given element width.
  std::size_t bytes(std::size_t bytes_per_element) const {
    return 2 * size_ * width() * bytes_per_element;
  }

 private:
  std::size_t width() const { return static_cast<std::size_t>(heads_) * head_dim_; }

  int heads_;
  int head_dim_;
  std::size_t capacity_;
  std::size_t size_ = 0;
  std::vector<Real> keys_;
  std::vector<Real> values_;
};

/// Per-head head_dim x head_dim accumulator of k v^T.
class LinearState {
 public:
  LinearState(int heads, int head_dim);

  int heads() const { return static_cast<int>(s_.size()); }
  int head_dim() const { return head_dim_; }
  const Mat& head(int h) const { return s_[h]; }
  void accumulate(const Vec& k, const Vec& v);
  std::size_t bytes(std::size_t bytes_per_element) const {
    return s_.size() * static_cast<std::size_t>(head_dim_) * head_dim_ * bytes_per_element;
  }

 private:
  int head_dim_;
  std::vector<Mat> s_;
};

/// Appends (k, v) then attends q over every stored entry.
Vec full_attention_step(const Vec& q, const Vec& k, const Vec& v, KVRing& ring);

/// state += k v^T, returns Norm(q^T state) per head.
Vec linear_attention_step(const Vec& q, const Vec& k, const Vec& v, LinearState& state,
                          Real eps = kDefaultNormEps);

// ---------------------------------------------------------------------------
// Attention sublayer: projections, optional gating, RoPE and output projection.

struct AttentionWeights {
  Mat wq, wk, wv, wo;  // d x d
  Mat wg;              // d x d output gate, gated linear variant only
};

struct AttentionSpec {
  AttentionKind kind = AttentionKind::kLinear;
  LinearVariant linear_variant = LinearVariant::kSimplified;
  int heads = 1;
  Real eps = kDefaultNormEps;
  const RotaryTable* rope = nullptr;

  bool gated() const { return kind == AttentionKind::kLinear && linear_variant == LinearVariant::kGated; }
};

struct AttentionCache {
  Mat x;              // normalized input
  Mat q_lin, k_lin, v_lin;  // projections before activation
  Mat q, k, v;        // after activation and RoPE
  Mat attn;           // mechanism output (post-norm for linear)
  Mat gate_lin;       // gated only
};

Mat attention_forward(const Mat& x, const AttentionWeights& w, const AttentionSpec& spec,
                      AttentionCache* cache = nullptr);
Mat attention_backward(const Mat& dy, const AttentionCache& cache, const AttentionWeights& w,
                       const AttentionSpec& spec, AttentionWeights& grad);

/// Per-layer incremental state; exactly one of ring / linear is engaged.
struct AttentionState {
  std::optional<KVRing> ring;
  std::optional<LinearState> linear;
  int position = 0;

  static AttentionState make(const AttentionSpec& spec, int dim, std::size_t capacity);
  std::size_t bytes(std::size_t bytes_per_element) const;
};

Vec attention_step(const Vec& x, const AttentionWeights& w, const AttentionSpec& spec, AttentionState& state);

}  // namespace iflame
