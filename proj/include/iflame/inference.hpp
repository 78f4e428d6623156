#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "iflame/hourglass.hpp"

namespace iflame {

/// Which stages run when the token at position t is processed.
struct UpdateFlags {
  bool enc0 = true;   // every token
  bool enc1 = false;  // (t+1) % p == 0
  bool core = false;  // (t+1) % p^2 == 0
  bool dec0 = false;  // (t+1) % p == 0
  bool dec1 = true;   // every token

  bool operator==(const UpdateFlags&) const = default;
};

UpdateFlags update_schedule(std::size_t t, int pool = 3);

/// Per-layer step timing, collected only when profiling is switched on.
struct LayerTiming {
  int stage = 0;
  int layer = 0;
  AttentionKind kind = AttentionKind::kLinear;
  std::size_t stage_position = 0;
  double seconds = 0;
};

/// Caches for one decoding session: per-layer KV stores and linear states,
/// the encoder circular buffers and the latest upsampled decoder inputs.
class InferenceState {
 public:
  explicit InferenceState(const ModelWeights& w);

  std::size_t position() const { return position_; }
  const StageState& stage(int s) const { return stages_.at(s); }
  const Vec& dec0_input() const { return dec0_input_; }
  const Vec& dec1_input() const { return dec1_input_; }

  /// Multiply-accumulate count of the most recent process_token call.
  std::uint64_t last_step_macs() const { return last_step_macs_; }
  std::uint64_t total_macs() const { return total_macs_; }

  void enable_profiling(bool on) { profiling_ = on; }
  const std::vector<LayerTiming>& timings() const { return timings_; }
  void clear_timings() { timings_.clear(); }

  /// Bytes held by KV stores, linear states and stage buffers.
  std::size_t kv_bytes(std::size_t bytes_per_element = sizeof(Real)) const;
  std::size_t state_bytes(std::size_t bytes_per_element = sizeof(Real)) const;
  std::size_t buffer_bytes(std::size_t bytes_per_element = sizeof(Real)) const;
  std::size_t resident_bytes(std::size_t bytes_per_element = sizeof(Real)) const {
    return kv_bytes(bytes_per_element) + state_bytes(bytes_per_element) + buffer_bytes(bytes_per_element);
  }

 private:
  friend Vec process_token(TokenId token, InferenceState& state, const ModelWeights& w);

  Vec run_stage(int s, const Vec& x, const ModelWeights& w);

  std::size_t position_ = 0;
  std::vector<StageState> stages_;
  std::vector<Vec> enc0_buffer_;  // last p coordinate-scale encoder outputs
  std::vector<Vec> enc1_buffer_;  // last p vertex-scale encoder outputs
  Vec dec0_input_;                // upsampled core output
  Vec dec1_input_;                // upsampled vertex decoder output
  std::uint64_t last_step_macs_ = 0;
  std::uint64_t total_macs_ = 0;
  bool profiling_ = false;
  std::vector<LayerTiming> timings_;
};

/// Feeds one token through the model incrementally; returns next-token logits.
Vec process_token(TokenId token, InferenceState& state, const ModelWeights& w);

// ---------------------------------------------------------------------------
// Sampling

struct SamplerConfig {
  double top_p = 0.95;
  int top_k = 50;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  bool strict_grammar = false;

  void validate() const;
};

struct SamplingSupport {
  std::vector<TokenId> tokens;  // descending probability
  std::vector<double> probs;    // renormalized over the support
};

/// Top-k filter, then the smallest descending-probability prefix whose mass
/// reaches top_p. Ties in logits are broken toward the lower token id.
SamplingSupport sampling_support(const Vec& logits, const SamplerConfig& cfg);
TokenId sample_token(const Vec& logits, const SamplerConfig& cfg, std::mt19937_64& rng);

/// With strict grammar only coordinates are legal inside a face and only
/// coordinates or [E] at a face boundary.
void mask_grammar(Vec& logits, std::size_t coordinate_tokens, int bins);

// ---------------------------------------------------------------------------
// Generation

/// Samples from [S] until [E] or max_faces complete faces. Sampling [S] or
/// [P] also ends the sequence. The result always ends with [E].
std::vector<TokenId> generate(const ModelWeights& w, const SamplerConfig& cfg, std::size_t max_faces);

/// Prefills a grammatical prefix ([S] + whole faces) token by token, then
/// continues sampling. max_faces bounds the total face count.
std::vector<TokenId> complete(std::span<const TokenId> prefix, const ModelWeights& w, const SamplerConfig& cfg,
                              std::size_t max_faces);

// ---------------------------------------------------------------------------
// Cache accounting

struct CacheReport {
  std::string variant;
  std::size_t n = 0;
  std::size_t bytes_per_element = 0;
  std::size_t kv_positions = 0;        // summed over full-attention layers
  std::size_t baseline_positions = 0;  // all-full stack of the same depth at coordinate scale
  std::size_t kv_bytes = 0;
  std::size_t state_bytes = 0;
  std::size_t buffer_bytes = 0;
  std::size_t baseline_bytes = 0;
  double reduction_pct = 0;  // 100 * (1 - kv / baseline)
};

/// Predicted cache footprint after n coordinate tokens have been processed.
CacheReport cache_bytes(const ModelConfig& cfg, std::size_t n, std::size_t bytes_per_element,
                        const std::string& variant = "");

void write_cache_report_kv(std::ostream& out, const CacheReport& r);
void write_cache_report_csv_header(std::ostream& out);
void write_cache_report_csv_row(std::ostream& out, const CacheReport& r);

}  // namespace iflame
