#include "iflame/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>

#include "iflame/mesh_codec.hpp"

namespace iflame {

UpdateFlags update_schedule(std::size_t t, int pool) {
  const auto p = static_cast<std::size_t>(pool);
  UpdateFlags f;
  f.enc1 = f.dec0 = (t + 1) % p == 0;
  f.core = (t + 1) % (p * p) == 0;
  return f;
}

InferenceState::InferenceState(const ModelWeights& w) {
  const ModelConfig& cfg = w.config;
  const BlockContext ctx = w.block_context();
  for (int s = 0; s < cfg.stage_count(); ++s) {
    stages_.push_back(StageState::make(w.stages[s], ctx, cfg.dim, cfg.stage_capacity(s)));
  }
  if (cfg.hourglass) {
    enc0_buffer_.assign(cfg.pool, Vec::Zero(cfg.dim));
    enc1_buffer_.assign(cfg.pool, Vec::Zero(cfg.dim));
    dec0_input_ = cfg.learned_pad ? Vec(w.pad_vertex.row(0).transpose()) : Vec::Zero(cfg.dim);
    dec1_input_ = cfg.learned_pad ? Vec(w.pad_coord.row(0).transpose()) : Vec::Zero(cfg.dim);
  }
}

std::size_t InferenceState::kv_bytes(std::size_t bpe) const {
  std::size_t total = 0;
  for (const StageState& s : stages_) {
    for (const AttentionState& a : s.layers) total += a.ring ? a.ring->bytes(bpe) : 0;
  }
  return total;
}

std::size_t InferenceState::state_bytes(std::size_t bpe) const {
  std::size_t total = 0;
  for (const StageState& s : stages_) {
    for (const AttentionState& a : s.layers) total += a.linear ? a.linear->bytes(bpe) : 0;
  }
  return total;
}

std::size_t InferenceState::buffer_bytes(std::size_t bpe) const {
  std::size_t elements = static_cast<std::size_t>(dec0_input_.size() + dec1_input_.size());
  for (const Vec& v : enc0_buffer_) elements += static_cast<std::size_t>(v.size());
  for (const Vec& v : enc1_buffer_) elements += static_cast<std::size_t>(v.size());
  return elements * bpe;
}

Vec InferenceState::run_stage(int s, const Vec& x, const ModelWeights& w) {
  const ModelConfig& cfg = w.config;
  const BlockContext ctx = w.block_context();
  const Stage& stage = w.stages[s];
  StageState& st = stages_[s];
  const auto d = static_cast<std::uint64_t>(cfg.dim);
  const auto hidden = static_cast<std::uint64_t>(cfg.hidden());
  Vec h = x;
  for (std::size_t i = 0; i < stage.size(); ++i) {
    const LayerWeights& layer = stage[i];
    AttentionState& a = st.layers[i];
    const auto t0 = profiling_ ? std::chrono::steady_clock::now() : std::chrono::steady_clock::time_point{};
    h = block_step(h, layer, ctx, a);
    if (profiling_) {
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
      timings_.push_back({s, static_cast<int>(i), layer.kind, st.steps, dt.count()});
    }
    std::uint64_t macs = 4 * d * d + 3 * d * hidden;
    if (layer.kind == AttentionKind::kFull) {
      macs += 2 * d * a.ring->size();
    } else {
      macs += 2 * d * static_cast<std::uint64_t>(cfg.head_dim());
      if (cfg.linear_variant == LinearVariant::kGated) macs += d * d;
    }
    last_step_macs_ += macs;
  }
  ++st.steps;
  return h;
}

Vec process_token(TokenId token, InferenceState& st, const ModelWeights& w) {
  const ModelConfig& cfg = w.config;
  require(token >= 0 && token < cfg.vocab_size(), "process_token: token id outside vocabulary");
  if (st.position_ >= static_cast<std::size_t>(cfg.max_context)) {
    fail(ErrorCode::kContextOverflow, "process_token: position " + std::to_string(st.position_) +
                                          " reaches max_context " + std::to_string(cfg.max_context));
  }
  st.last_step_macs_ = 0;
  const auto d = static_cast<std::uint64_t>(cfg.dim);
  const std::size_t t = st.position_;
  const Vec x = w.embedding.row(token).transpose();
  Vec top;
  if (!cfg.hourglass) {
    top = st.run_stage(0, x, w);
  } else {
    const auto p = static_cast<std::size_t>(cfg.pool);
    const UpdateFlags flags = update_schedule(t, cfg.pool);
    const Vec e0 = st.run_stage(kEnc0, x, w);
    st.enc0_buffer_[t % p] = e0;
    if (flags.enc1) {
      // (t+1) % p == 0, so slots 0..p-1 hold positions t-p+1..t in order.
      Vec group(static_cast<Eigen::Index>(p) * cfg.dim);
      for (std::size_t i = 0; i < p; ++i) group.segment(i * cfg.dim, cfg.dim) = st.enc0_buffer_[i];
      const Vec e1 = st.run_stage(kEnc1, w.down_vertex * group, w);
      st.enc1_buffer_[(t / p) % p] = e1;
      st.last_step_macs_ += p * d * d;
      if (flags.core) {
        for (std::size_t i = 0; i < p; ++i) group.segment(i * cfg.dim, cfg.dim) = st.enc1_buffer_[i];
        const Vec b = st.run_stage(kCore, w.down_face * group, w);
        st.dec0_input_ = w.up_vertex * b;
        st.last_step_macs_ += p * d * d + d * d;
      }
      const Vec d0 = st.run_stage(kDec0, st.dec0_input_ + e1, w);
      st.dec1_input_ = w.up_coord * d0;
      st.last_step_macs_ += d * d;
    }
    top = st.run_stage(kDec1, st.dec1_input_ + e0, w);
  }
  const Vec logits = w.output_matrix() * rms_norm(top, w.final_norm.row(0).transpose(), cfg.norm_eps);
  st.last_step_macs_ += static_cast<std::uint64_t>(cfg.vocab_size()) * d;
  st.total_macs_ += st.last_step_macs_;
  ++st.position_;
  return logits;
}

void SamplerConfig::validate() const {
  require(top_p > 0 && top_p <= 1, "sampler: top_p must be in (0, 1]");
  require(top_k >= 1, "sampler: top_k must be >= 1");
  require(temperature > 0, "sampler: temperature must be > 0");
}

SamplingSupport sampling_support(const Vec& logits, const SamplerConfig& cfg) {
  cfg.validate();
  require(logits.size() > 0 && !logits.hasNaN() && std::isfinite(logits.maxCoeff()),
          "sampler: logits must be finite (masked entries may be -inf)");
  std::vector<TokenId> order(static_cast<std::size_t>(logits.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](TokenId a, TokenId b) { return logits[a] > logits[b]; });
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(cfg.top_k), order.size());
  order.resize(k);

  const Real top = logits[order.front()] / cfg.temperature;
  std::vector<double> probs(k);
  double sum = 0;
  for (std::size_t i = 0; i < k; ++i) {
    probs[i] = std::exp(logits[order[i]] / cfg.temperature - top);
    sum += probs[i];
  }
  for (double& p : probs) p /= sum;

  // Tolerance absorbs rounding when the cutoff lands exactly on a boundary.
  constexpr double kSlack = 1e-12;
  std::size_t keep = 0;
  double cum = 0;
  while (keep < k) {
    cum += probs[keep++];
    if (cum >= cfg.top_p - kSlack) break;
  }
  while (keep > 1 && probs[keep - 1] == 0.0) --keep;
  SamplingSupport s;
  s.tokens.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep));
  s.probs.assign(probs.begin(), probs.begin() + static_cast<std::ptrdiff_t>(keep));
  const double mass = std::accumulate(s.probs.begin(), s.probs.end(), 0.0);
  for (double& p : s.probs) p /= mass;
  return s;
}

TokenId sample_token(const Vec& logits, const SamplerConfig& cfg, std::mt19937_64& rng) {
  const SamplingSupport s = sampling_support(logits, cfg);
  if (s.tokens.size() == 1) return s.tokens.front();
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double cum = 0;
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    cum += s.probs[i];
    if (u < cum) return s.tokens[i];
  }
  return s.tokens.back();
}

void mask_grammar(Vec& logits, std::size_t coordinate_tokens, int bins) {
  const QuantizerConfig q{bins};
  const Real neg = -std::numeric_limits<Real>::infinity();
  logits[q.start_token()] = neg;
  logits[q.pad_token()] = neg;
  if (coordinate_tokens % kTokensPerFace != 0) logits[q.end_token()] = neg;
}

namespace {

std::vector<TokenId> continue_sampling(std::vector<TokenId> tokens, InferenceState& state, Vec logits,
                                       const ModelWeights& w, const SamplerConfig& cfg, std::size_t max_faces) {
  const QuantizerConfig q{w.config.bins};
  std::mt19937_64 rng(cfg.seed);
  std::size_t coords = tokens.size() - 1;
  const std::size_t cap = max_faces * kTokensPerFace;
  while (coords < cap) {
    if (cfg.strict_grammar) mask_grammar(logits, coords, q.bins);
    const TokenId next = sample_token(logits, cfg, rng);
    if (!q.is_coordinate(next)) break;
    tokens.push_back(next);
    if (++coords >= cap) break;
    logits = process_token(next, state, w);
  }
  tokens.push_back(q.end_token());
  return tokens;
}

}  // namespace

std::vector<TokenId> generate(const ModelWeights& w, const SamplerConfig& cfg, std::size_t max_faces) {
  const TokenId start = QuantizerConfig{w.config.bins}.start_token();
  return complete(std::span<const TokenId>(&start, 1), w, cfg, max_faces);
}

std::vector<TokenId> complete(std::span<const TokenId> prefix, const ModelWeights& w, const SamplerConfig& cfg,
                              std::size_t max_faces) {
  cfg.validate();
  require(max_faces >= 1, "generate: max_faces must be >= 1");
  const QuantizerConfig q{w.config.bins};
  if (prefix.empty() || prefix.front() != q.start_token() || (prefix.size() - 1) % kTokensPerFace != 0 ||
      !std::all_of(prefix.begin() + 1, prefix.end(), [&](TokenId t) { return q.is_coordinate(t); })) {
    fail(ErrorCode::kInvalidArgument, "complete: prefix must be [S] followed by whole faces");
  }
  InferenceState state(w);
  Vec logits;
  for (TokenId t : prefix) logits = process_token(t, state, w);
  return continue_sampling(std::vector<TokenId>(prefix.begin(), prefix.end()), state, std::move(logits), w, cfg,
                           max_faces);
}

CacheReport cache_bytes(const ModelConfig& cfg, std::size_t n, std::size_t bpe, const std::string& variant) {
  cfg.validate();
  CacheReport r;
  r.variant = variant;
  r.n = n;
  r.bytes_per_element = bpe;
  const auto width = static_cast<std::size_t>(cfg.dim);  // heads * head_dim
  const auto hd = static_cast<std::size_t>(cfg.head_dim());
  for (int s = 0; s < cfg.stage_count(); ++s) {
    const std::size_t positions = n / static_cast<std::size_t>(cfg.stage_stride(s));
    for (int i = 0; i < cfg.stage_depth(s); ++i) {
      if (layer_kind(i, cfg.pattern, cfg.full_position) == AttentionKind::kFull) {
        r.kv_positions += positions;
      } else {
        r.state_bytes += static_cast<std::size_t>(cfg.heads) * hd * hd * bpe;
      }
    }
  }
  r.kv_bytes = 2 * r.kv_positions * width * bpe;
  r.baseline_positions = static_cast<std::size_t>(cfg.total_layers()) * n;
  r.baseline_bytes = 2 * r.baseline_positions * width * bpe;
  if (cfg.hourglass) r.buffer_bytes = (2 * static_cast<std::size_t>(cfg.pool) + 2) * width * bpe;
  r.reduction_pct = r.baseline_positions == 0
                        ? 0.0
                        : 100.0 * (1.0 - static_cast<double>(r.kv_positions) / static_cast<double>(r.baseline_positions));
  return r;
}

void write_cache_report_kv(std::ostream& out, const CacheReport& r) {
  out << "variant=" << r.variant << '\n'
      << "n=" << r.n << '\n'
      << "bytes_per_element=" << r.bytes_per_element << '\n'
      << "kv_positions=" << r.kv_positions << '\n'
      << "baseline_positions=" << r.baseline_positions << '\n'
      << "kv_bytes=" << r.kv_bytes << '\n'
      << "state_bytes=" << r.state_bytes << '\n'
      << "buffer_bytes=" << r.buffer_bytes << '\n'
      << "baseline_bytes=" << r.baseline_bytes << '\n';
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", r.reduction_pct);
  out << "reduction_pct=" << buf << '\n';
}

void write_cache_report_csv_header(std::ostream& out) {
  out << "variant,n,kv_bytes,state_bytes,buffer_bytes,baseline_bytes,reduction_pct\n";
}

void write_cache_report_csv_row(std::ostream& out, const CacheReport& r) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", r.reduction_pct);
  out << r.variant << ',' << r.n << ',' << r.kv_bytes << ',' << r.state_bytes << ',' << r.buffer_bytes << ','
      << r.baseline_bytes << ',' << buf << '\n';
}

}  // namespace iflame
