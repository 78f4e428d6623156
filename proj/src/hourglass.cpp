#include "iflame/hourglass.hpp"

#include <cmath>
#include <random>

#include "iflame/mesh_codec.hpp"

namespace iflame {

int ModelConfig::stage_stride(int stage) const {
  if (!hourglass) return 1;
  switch (stage) {
    case kEnc0:
    case kDec1:
      return 1;
    case kEnc1:
    case kDec0:
      return pool;
    case kCore:
      return pool * pool;
    default:
      fail(ErrorCode::kInvalidArgument, "stage index out of range");
  }
}

int ModelConfig::total_layers() const {
  int total = 0;
  for (int s = 0; s < stage_count(); ++s) total += stage_depth(s);
  return total;
}

std::size_t ModelConfig::stage_capacity(int stage) const {
  const auto stride = static_cast<std::size_t>(stage_stride(stage));
  return (static_cast<std::size_t>(max_context) + stride - 1) / stride;
}

void ModelConfig::validate() const {
  require(dim >= 2, "config: dim must be >= 2");
  require(heads >= 1 && dim % heads == 0, "config: heads must divide dim");
  require(head_dim() % 2 == 0, "config: head dimension must be even for RoPE");
  require(pool >= 2, "config: pool must be >= 2");
  require(max_context >= 1, "config: max_context must be >= 1");
  require(ffn_hidden >= 0, "config: ffn_hidden must be >= 0");
  require(norm_eps > 0, "config: norm_eps must be > 0");
  require(rope_base > 1, "config: rope_base must be > 1");
  QuantizerConfig{bins}.validate();
  if (hourglass) {
    for (int d : depths) require(d >= 0, "config: stage depths must be >= 0");
  } else {
    require(plain_depth >= 1, "config: plain_depth must be >= 1");
  }
}

namespace {

Mat random_matrix(Eigen::Index rows, Eigen::Index cols, Real stddev, std::mt19937_64& rng) {
  std::normal_distribution<Real> dist(0.0, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Mat ones_row(int d) { return Mat::Ones(1, d); }

constexpr Real kInitStd = 0.02;

// Fine rows [p j, p j + p) flattened into one row of width p * d.
Mat group_rows(const Mat& fine, int pool) {
  const Eigen::Index m = fine.rows() / pool;
  const Eigen::Index d = fine.cols();
  Mat g(m, pool * d);
  for (Eigen::Index j = 0; j < m; ++j) {
    for (int i = 0; i < pool; ++i) g.row(j).segment(i * d, d) = fine.row(j * pool + i);
  }
  return g;
}

}  // namespace

ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg.dim;
  const int h = cfg.hidden();
  const int v = cfg.vocab_size();
  const Real resid_std = kInitStd / std::sqrt(2.0 * std::max(1, cfg.total_layers()));

  ModelWeights w;
  w.config = cfg;
  w.rope = RotaryTable(cfg.head_dim(), cfg.max_context, cfg.rope_base);
  w.embedding = random_matrix(v, d, 1.0, rng);
  for (int s = 0; s < cfg.stage_count(); ++s) {
    Stage stage;
    for (int i = 0; i < cfg.stage_depth(s); ++i) {
      LayerWeights l;
      l.kind = layer_kind(i, cfg.pattern, cfg.full_position);
      l.norm_attn = ones_row(d);
      l.attn.wq = random_matrix(d, d, kInitStd, rng);
      l.attn.wk = random_matrix(d, d, kInitStd, rng);
      l.attn.wv = random_matrix(d, d, kInitStd, rng);
      l.attn.wo = random_matrix(d, d, resid_std, rng);
      if (l.kind == AttentionKind::kLinear && cfg.linear_variant == LinearVariant::kGated) {
        l.attn.wg = random_matrix(d, d, kInitStd, rng);
      }
      l.norm_ffn = ones_row(d);
      l.ffn.gate = random_matrix(h, d, kInitStd, rng);
      l.ffn.up = random_matrix(h, d, kInitStd, rng);
      l.ffn.down = random_matrix(d, h, resid_std, rng);
      stage.push_back(std::move(l));
    }
    w.stages.push_back(std::move(stage));
  }
  if (cfg.hourglass) {
    const Real down_std = 1.0 / std::sqrt(static_cast<Real>(cfg.pool * d));
    const Real up_std = 1.0 / std::sqrt(static_cast<Real>(d));
    w.down_vertex = random_matrix(d, cfg.pool * d, down_std, rng);
    w.down_face = random_matrix(d, cfg.pool * d, down_std, rng);
    w.up_vertex = random_matrix(d, d, up_std, rng);
    w.up_coord = random_matrix(d, d, up_std, rng);
    if (cfg.learned_pad) {
      w.pad_vertex = Mat::Zero(1, d);
      w.pad_coord = Mat::Zero(1, d);
    }
  }
  w.final_norm = ones_row(d);
  if (!cfg.tie_embeddings) w.output = random_matrix(v, d, kInitStd, rng);
  return w;
}

ModelWeights zeros_like(const ModelWeights& w) {
  ModelWeights z = w;
  z.visit([](const std::string&, Mat& m) { m.setZero(); });
  return z;
}

std::size_t parameter_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.dim;
  const std::size_t h = cfg.hidden();
  const std::size_t v = cfg.vocab_size();
  std::size_t total = v * d + d;  // embedding + final norm
  if (!cfg.tie_embeddings) total += v * d;
  for (int s = 0; s < cfg.stage_count(); ++s) {
    for (int i = 0; i < cfg.stage_depth(s); ++i) {
      total += 4 * d * d + 3 * d * h + 2 * d;
      if (layer_kind(i, cfg.pattern, cfg.full_position) == AttentionKind::kLinear &&
          cfg.linear_variant == LinearVariant::kGated) {
        total += d * d;
      }
    }
  }
  if (cfg.hourglass) {
    total += 2 * d * cfg.pool * d + 2 * d * d;
    if (cfg.learned_pad) total += 2 * d;
  }
  return total;
}

std::size_t parameter_count(const ModelWeights& w) {
  std::size_t total = 0;
  w.visit([&](const std::string&, const Mat& m) { total += static_cast<std::size_t>(m.size()); });
  return total;
}

Mat downsample(const Mat& fine, const Mat& w_down, int pool) {
  return group_rows(fine, pool) * w_down.transpose();
}

Mat downsample_backward(const Mat& dcoarse, const Mat& fine, const Mat& w_down, int pool, Mat& dw_down) {
  const Mat g = group_rows(fine, pool);
  dw_down.noalias() += dcoarse.transpose() * g;
  const Mat dg = dcoarse * w_down;
  const Eigen::Index d = fine.cols();
  Mat dfine = Mat::Zero(fine.rows(), d);
  for (Eigen::Index j = 0; j < dg.rows(); ++j) {
    for (int i = 0; i < pool; ++i) dfine.row(j * pool + i) = dg.row(j).segment(i * d, d);
  }
  return dfine;
}

Mat upsample_shifted(const Mat& coarse, const Mat& w_up, int pool, Eigen::Index n_fine, const Mat* pad) {
  const Eigen::Index d = w_up.rows();
  Mat fine = Mat::Zero(n_fine, d);
  const Mat projected = coarse * w_up.transpose();
  for (Eigen::Index t = 0; t < n_fine; ++t) {
    const Eigen::Index src = (t + 1) / pool - 1;
    if (src < 0) {
      if (pad) fine.row(t) = pad->row(0);
    } else {
      require(src < projected.rows(), "upsample: coarse sequence too short");
      fine.row(t) = projected.row(src);
    }
  }
  return fine;
}

Mat upsample_shifted_backward(const Mat& dfine, const Mat& coarse, const Mat& w_up, int pool, Mat& dw_up,
                              Mat* dpad) {
  Mat dprojected = Mat::Zero(coarse.rows(), w_up.rows());
  for (Eigen::Index t = 0; t < dfine.rows(); ++t) {
    const Eigen::Index src = (t + 1) / pool - 1;
    if (src < 0) {
      if (dpad) dpad->row(0) += dfine.row(t);
    } else {
      dprojected.row(src) += dfine.row(t);
    }
  }
  dw_up.noalias() += dprojected.transpose() * coarse;
  return dprojected * w_up;
}

namespace {

Mat embed(std::span<const TokenId> tokens, const ModelWeights& w) {
  Mat x(static_cast<Eigen::Index>(tokens.size()), w.config.dim);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    require(tokens[t] >= 0 && tokens[t] < w.config.vocab_size(), "model: token id outside vocabulary");
    x.row(static_cast<Eigen::Index>(t)) = w.embedding.row(tokens[t]);
  }
  return x;
}

Mat run_stage(const Mat& x, const ModelWeights& w, int stage, ForwardStats* stats, ModelCache* cache) {
  if (stats) stats->stage_positions[stage] += static_cast<std::size_t>(x.rows());
  if (x.rows() == 0) return x;
  return stage_forward(x, w.stages[stage], w.block_context(), cache ? &cache->stages[stage] : nullptr);
}

Mat stage_grad(const Mat& dy, const ModelCache& cache, const ModelWeights& w, int stage, ModelWeights& grad) {
  if (dy.rows() == 0) return dy;
  return stage_backward(dy, cache.stages[stage], w.stages[stage], w.block_context(), grad.stages[stage]);
}

}  // namespace

Mat model_forward(std::span<const TokenId> tokens, const ModelWeights& w, ForwardStats* stats, ModelCache* cache) {
  const ModelConfig& cfg = w.config;
  require(!tokens.empty(), "model: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_context)) {
    fail(ErrorCode::kContextOverflow, "model: sequence of " + std::to_string(tokens.size()) +
                                          " tokens exceeds max_context " + std::to_string(cfg.max_context));
  }
  if (cache) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    cache->stages.assign(cfg.stage_count(), StageCache{});
  }
  const Mat x = embed(tokens, w);
  Mat top;
  if (!cfg.hourglass) {
    top = run_stage(x, w, 0, stats, cache);
  } else {
    const int p = cfg.pool;
    const Mat enc0 = run_stage(x, w, kEnc0, stats, cache);
    const Mat enc1 = run_stage(downsample(enc0, w.down_vertex, p), w, kEnc1, stats, cache);
    const Mat core = run_stage(downsample(enc1, w.down_face, p), w, kCore, stats, cache);
    const Mat* pad_v = cfg.learned_pad ? &w.pad_vertex : nullptr;
    const Mat* pad_c = cfg.learned_pad ? &w.pad_coord : nullptr;
    const Mat dec0 = run_stage(upsample_shifted(core, w.up_vertex, p, enc1.rows(), pad_v) + enc1, w, kDec0, stats,
                               cache);
    top = run_stage(upsample_shifted(dec0, w.up_coord, p, enc0.rows(), pad_c) + enc0, w, kDec1, stats, cache);
    if (cache) {
      cache->enc0_out = enc0;
      cache->enc1_out = enc1;
      cache->core_out = core;
      cache->dec0_out = dec0;
    }
  }
  Vec inv;
  const Mat normed = rms_norm_rows(top, w.final_norm, cfg.norm_eps, &inv);
  if (cache) {
    cache->dec1_out = top;
    cache->final_inv = std::move(inv);
  }
  return normed * w.output_matrix().transpose();
}

void model_backward(const Mat& dlogits, const ModelCache& c, const ModelWeights& w, ModelWeights& grad) {
  const ModelConfig& cfg = w.config;
  const Mat normed = rms_norm_rows(c.dec1_out, w.final_norm, cfg.norm_eps);
  Mat& dout = cfg.tie_embeddings ? grad.embedding : grad.output;
  dout.noalias() += dlogits.transpose() * normed;
  const Mat dnormed = dlogits * w.output_matrix();
  const Mat dtop = rms_norm_rows_backward(dnormed, c.dec1_out, w.final_norm, c.final_inv, &grad.final_norm);

  Mat dx;
  if (!cfg.hourglass) {
    dx = stage_grad(dtop, c, w, 0, grad);
  } else {
    const int p = cfg.pool;
    Mat* dpad_v = cfg.learned_pad ? &grad.pad_vertex : nullptr;
    Mat* dpad_c = cfg.learned_pad ? &grad.pad_coord : nullptr;
    const Mat ddec1_in = stage_grad(dtop, c, w, kDec1, grad);
    Mat denc0 = ddec1_in;
    const Mat ddec0 = upsample_shifted_backward(ddec1_in, c.dec0_out, w.up_coord, p, grad.up_coord, dpad_c);
    const Mat ddec0_in = stage_grad(ddec0, c, w, kDec0, grad);
    Mat denc1 = ddec0_in;
    const Mat dcore = upsample_shifted_backward(ddec0_in, c.core_out, w.up_vertex, p, grad.up_vertex, dpad_v);
    const Mat dcore_in = stage_grad(dcore, c, w, kCore, grad);
    denc1 += downsample_backward(dcore_in, c.enc1_out, w.down_face, p, grad.down_face);
    const Mat denc1_in = stage_grad(denc1, c, w, kEnc1, grad);
    denc0 += downsample_backward(denc1_in, c.enc0_out, w.down_vertex, p, grad.down_vertex);
    dx = stage_grad(denc0, c, w, kEnc0, grad);
  }
  for (std::size_t t = 0; t < c.tokens.size(); ++t) {
    grad.embedding.row(c.tokens[t]) += dx.row(static_cast<Eigen::Index>(t));
  }
}

}  // namespace iflame
