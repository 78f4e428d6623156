#include "iflame/iblock.hpp"

namespace iflame {

AttentionKind layer_kind(int layer_index, FullPosition position) {
  require(layer_index >= 0, "layer_kind: negative layer index");
  const bool full = position == FullPosition::kLast ? (layer_index + 1) % 4 == 0 : layer_index % 4 == 0;
  return full ? AttentionKind::kFull : AttentionKind::kLinear;
}

AttentionKind layer_kind(int layer_index, AttentionPattern pattern, FullPosition position) {
  switch (pattern) {
    case AttentionPattern::kAllFull:
      return AttentionKind::kFull;
    case AttentionPattern::kAllLinear:
      return AttentionKind::kLinear;
    case AttentionPattern::kInterleaved:
      break;
  }
  return layer_kind(layer_index, position);
}

Mat block_forward(const Mat& x, const LayerWeights& layer, const BlockContext& ctx, BlockCache* cache) {
  const AttentionSpec spec = ctx.attention_spec(layer.kind);
  Vec inv1, inv2;
  const Mat n1 = rms_norm_rows(x, layer.norm_attn, ctx.eps, &inv1);
  Mat x1 = x + attention_forward(n1, layer.attn, spec, cache ? &cache->attn : nullptr);
  const Mat n2 = rms_norm_rows(x1, layer.norm_ffn, ctx.eps, &inv2);
  Mat y = x1 + swiglu_rows(n2, layer.ffn, cache ? &cache->ffn : nullptr);
  if (cache) {
    cache->x = x;
    cache->x1 = std::move(x1);
    cache->inv1 = std::move(inv1);
    cache->inv2 = std::move(inv2);
  }
  return y;
}

Mat block_backward(const Mat& dy, const BlockCache& c, const LayerWeights& layer, const BlockContext& ctx,
                   LayerWeights& grad) {
  const AttentionSpec spec = ctx.attention_spec(layer.kind);
  const Mat dn2 = swiglu_rows_backward(dy, c.ffn, layer.ffn, grad.ffn);
  const Mat dx1 = dy + rms_norm_rows_backward(dn2, c.x1, layer.norm_ffn, c.inv2, &grad.norm_ffn);
  const Mat dn1 = attention_backward(dx1, c.attn, layer.attn, spec, grad.attn);
  return dx1 + rms_norm_rows_backward(dn1, c.x, layer.norm_attn, c.inv1, &grad.norm_attn);
}

Vec block_step(const Vec& x, const LayerWeights& layer, const BlockContext& ctx, AttentionState& state) {
  const AttentionSpec spec = ctx.attention_spec(layer.kind);
  const Vec x1 = x + attention_step(rms_norm(x, layer.norm_attn.row(0).transpose(), ctx.eps), layer.attn, spec, state);
  return x1 + swiglu_ffn(rms_norm(x1, layer.norm_ffn.row(0).transpose(), ctx.eps), layer.ffn);
}

Mat stage_forward(const Mat& x, const Stage& stage, const BlockContext& ctx, StageCache* cache) {
  if (cache) cache->layers.resize(stage.size());
  Mat h = x;
  for (std::size_t i = 0; i < stage.size(); ++i) {
    h = block_forward(h, stage[i], ctx, cache ? &cache->layers[i] : nullptr);
  }
  return h;
}

Mat stage_backward(const Mat& dy, const StageCache& cache, const Stage& stage, const BlockContext& ctx, Stage& grad) {
  Mat d = dy;
  for (std::size_t i = stage.size(); i-- > 0;) d = block_backward(d, cache.layers[i], stage[i], ctx, grad[i]);
  return d;
}

StageState StageState::make(const Stage& stage, const BlockContext& ctx, int dim, std::size_t capacity) {
  StageState s;
  s.layers.reserve(stage.size());
  for (const LayerWeights& layer : stage) {
    s.layers.push_back(AttentionState::make(ctx.attention_spec(layer.kind), dim, capacity));
  }
  return s;
}

std::size_t StageState::bytes(std::size_t bytes_per_element) const {
  std::size_t total = 0;
  for (const AttentionState& s : layers) total += s.bytes(bytes_per_element);
  return total;
}

Vec stage_step(const Vec& x, const Stage& stage, const BlockContext& ctx, StageState& state) {
  Vec h = x;
  for (std::size_t i = 0; i < stage.size(); ++i) h = block_step(h, stage[i], ctx, state.layers[i]);
  ++state.steps;
  return h;
}

}  // namespace iflame
