#pragma once

#include <vector>

#include "iflame/attention.hpp"
#include "iflame/nn.hpp"

namespace iflame {

/// Where the full-attention layer sits inside each group of four layers.
enum class FullPosition { kFirst, kLast };

/// Which attention mechanisms a stack uses.
enum class AttentionPattern { kInterleaved, kAllFull, kAllLinear };

/// Interleave rule: with kLast, layer i is full iff (i + 1) % 4 == 0;
/// with kFirst, iff i % 4 == 0.
AttentionKind layer_kind(int layer_index, FullPosition position = FullPosition::kLast);
AttentionKind layer_kind(int layer_index, AttentionPattern pattern, FullPosition position);

struct LayerWeights {
  AttentionKind kind = AttentionKind::kLinear;
  AttentionWeights attn;
  FfnWeights ffn;
  Mat norm_attn;  // 1 x d
  Mat norm_ffn;   // 1 x d
};

/// Settings shared by every layer of a stack.
struct BlockContext {
  int heads = 1;
  LinearVariant linear_variant = LinearVariant::kSimplified;
  Real eps = kDefaultNormEps;
  const RotaryTable* rope = nullptr;

  AttentionSpec attention_spec(AttentionKind kind) const { return {kind, linear_variant, heads, eps, rope}; }
};

struct BlockCache {
  Mat x, x1;
  Vec inv1, inv2;
  AttentionCache attn;
  FfnCache ffn;
};

/// X <- X + f(RMSNorm(X)); Y <- X + SwiGLU(RMSNorm(X)).
Mat block_forward(const Mat& x, const LayerWeights& layer, const BlockContext& ctx, BlockCache* cache = nullptr);
Mat block_backward(const Mat& dy, const BlockCache& cache, const LayerWeights& layer, const BlockContext& ctx,
                   LayerWeights& grad);
Vec block_step(const Vec& x, const LayerWeights& layer, const BlockContext& ctx, AttentionState& state);

// A stage is a stack of layers run at one sequence scale.
using Stage = std::vector<LayerWeights>;

struct StageCache {
  std::vector<BlockCache> layers;
};

Mat stage_forward(const Mat& x, const Stage& stage, const BlockContext& ctx, StageCache* cache = nullptr);
Mat stage_backward(const Mat& dy, const StageCache& cache, const Stage& stage, const BlockContext& ctx, Stage& grad);

struct StageState {
  std::vector<AttentionState> layers;
  std::size_t steps = 0;

  static StageState make(const Stage& stage, const BlockContext& ctx, int dim, std::size_t capacity);
  std::size_t bytes(std::size_t bytes_per_element) const;
};

Vec stage_step(const Vec& x, const Stage& stage, const BlockContext& ctx, StageState& state);

}  // namespace iflame
