#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "iflame/iblock.hpp"
#include "iflame/nn.hpp"

namespace iflame {

/// Hourglass stages in execution order: coordinate-scale encoder, vertex-scale
/// encoder, face-scale core, vertex-scale decoder, coordinate-scale decoder.
enum StageId : int { kEnc0 = 0, kEnc1 = 1, kCore = 2, kDec0 = 3, kDec1 = 4 };
inline constexpr int kHourglassStages = 5;

struct ModelConfig {
  int dim = 512;
  int heads = 16;
  bool hourglass = true;
  std::array<int, kHourglassStages> depths{4, 4, 8, 4, 4};
  int plain_depth = 24;  // used when hourglass is false
  int pool = 3;
  int bins = 128;
  int max_context = 36864;  // coordinate-scale positions
  int ffn_hidden = 0;       // 0 selects default_ffn_hidden(dim)
  AttentionPattern pattern = AttentionPattern::kInterleaved;
  LinearVariant linear_variant = LinearVariant::kSimplified;
  FullPosition full_position = FullPosition::kLast;
  Real rope_base = kDefaultRopeBase;
  Real norm_eps = kDefaultNormEps;
  bool tie_embeddings = false;
  bool learned_pad = false;

  int vocab_size() const { return bins + 3; }
  int head_dim() const { return dim / heads; }
  int hidden() const { return ffn_hidden > 0 ? ffn_hidden : default_ffn_hidden(dim); }
  int stage_count() const { return hourglass ? kHourglassStages : 1; }
  int stage_depth(int stage) const { return hourglass ? depths.at(stage) : plain_depth; }
  /// Number of coordinate positions per position of the stage's scale.
  int stage_stride(int stage) const;
  int total_layers() const;
  /// KV capacity at the stage's scale: ceil(max_context / stride).
  std::size_t stage_capacity(int stage) const;
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct ModelWeights {
  ModelConfig config;
  RotaryTable rope;
  Mat embedding;  // vocab x d
  std::vector<Stage> stages;
  Mat down_vertex;  // d x (pool * d): coordinate -> vertex
  Mat down_face;    // d x (pool * d): vertex -> face
  Mat up_vertex;    // d x d: face -> vertex
  Mat up_coord;     // d x d: vertex -> coordinate
  Mat pad_vertex;   // 1 x d, learned_pad only
  Mat pad_coord;    // 1 x d, learned_pad only
  Mat final_norm;   // 1 x d
  Mat output;       // vocab x d, empty when tied

  BlockContext block_context() const {
    return {config.heads, config.linear_variant, config.norm_eps, &rope};
  }
  const Mat& output_matrix() const { return config.tie_embeddings ? embedding : output; }

  /// Calls fn(name, matrix) for every parameter array in a stable order.
  template <typename Fn>
  void visit(Fn&& fn);
  template <typename Fn>
  void visit(Fn&& fn) const;
};

/// Allocates weights for cfg. Projections are drawn from N(0, 0.02^2) with
/// residual output projections scaled by 1/sqrt(2 * layers); gains are 1.
ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed);
ModelWeights zeros_like(const ModelWeights& w);

std::size_t parameter_count(const ModelConfig& cfg);
std::size_t parameter_count(const ModelWeights& w);

/// coarse_j = W_down concat(fine_{p j} .. fine_{p j + p - 1}); floor(n/p) rows.
Mat downsample(const Mat& fine, const Mat& w_down, int pool);
Mat downsample_backward(const Mat& dcoarse, const Mat& fine, const Mat& w_down, int pool, Mat& dw_down);

/// Fine position t receives W_up coarse_{floor((t+1)/p) - 1}; positions
/// t < p - 1 receive pad (zero when pad is null).
Mat upsample_shifted(const Mat& coarse, const Mat& w_up, int pool, Eigen::Index n_fine, const Mat* pad = nullptr);
Mat upsample_shifted_backward(const Mat& dfine, const Mat& coarse, const Mat& w_up, int pool, Mat& dw_up,
                              Mat* dpad = nullptr);

/// Positions processed by each stage during one forward pass.
struct ForwardStats {
  std::array<std::size_t, kHourglassStages> stage_positions{};
};

struct ModelCache {
  std::vector<TokenId> tokens;
  std::vector<StageCache> stages;
  Mat enc0_out, enc1_out, core_out, dec0_out, dec1_out;
  Vec final_inv;
};

/// Logits (n x vocab); row t parameterizes the token at t + 1.
Mat model_forward(std::span<const TokenId> tokens, const ModelWeights& w, ForwardStats* stats = nullptr,
                  ModelCache* cache = nullptr);
/// Accumulates parameter gradients for dlogits into grad.
void model_backward(const Mat& dlogits, const ModelCache& cache, const ModelWeights& w, ModelWeights& grad);

// ---------------------------------------------------------------------------

template <typename Self, typename Fn>
void visit_weights(Self& w, Fn&& fn) {
  fn(std::string("embedding"), w.embedding);
  for (std::size_t s = 0; s < w.stages.size(); ++s) {
    for (std::size_t i = 0; i < w.stages[s].size(); ++i) {
      auto& l = w.stages[s][i];
      const std::string p = "stage" + std::to_string(s) + ".layer" + std::to_string(i) + ".";
      fn(p + "norm_attn", l.norm_attn);
      fn(p + "attn.wq", l.attn.wq);
      fn(p + "attn.wk", l.attn.wk);
      fn(p + "attn.wv", l.attn.wv);
      fn(p + "attn.wo", l.attn.wo);
      if (l.attn.wg.size() > 0) fn(p + "attn.wg", l.attn.wg);
      fn(p + "norm_ffn", l.norm_ffn);
      fn(p + "ffn.gate", l.ffn.gate);
      fn(p + "ffn.up", l.ffn.up);
      fn(p + "ffn.down", l.ffn.down);
    }
  }
  if (w.config.hourglass) {
    fn(std::string("down.vertex"), w.down_vertex);
    fn(std::string("down.face"), w.down_face);
    fn(std::string("up.vertex"), w.up_vertex);
    fn(std::string("up.coord"), w.up_coord);
    if (w.config.learned_pad) {
      fn(std::string("pad.vertex"), w.pad_vertex);
      fn(std::string("pad.coord"), w.pad_coord);
    }
  }
  fn(std::string("final_norm"), w.final_norm);
  if (!w.config.tie_embeddings) fn(std::string("output"), w.output);
}

template <typename Fn>
void ModelWeights::visit(Fn&& fn) {
  visit_weights(*this, std::forward<Fn>(fn));
}

template <typename Fn>
void ModelWeights::visit(Fn&& fn) const {
  visit_weights(*this, std::forward<Fn>(fn));
}

}  // namespace iflame
