#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "iflame/hourglass.hpp"

namespace iflame {

struct BenchOptions {
  std::size_t n = 1800;  // tokens decoded per session, [S] included
  int batch = 1;
  int runs = 3;          // timed runs; the median is reported
  int warmup_runs = 1;
  std::uint64_t seed = 0;
};

struct BenchReport {
  std::string variant;
  std::size_t n = 0;
  int batch = 1;
  double ms_per_token = 0;  // one lockstep step over the whole batch
  double tokens_per_s = 0;  // batch * 1000 / ms_per_token
  std::size_t cache_bytes = 0;          // KV + linear state + buffers over the batch, measured
  std::size_t predicted_cache_bytes = 0;  // batch * cache_bytes(cfg, n) total
  std::size_t peak_resident_bytes = 0;  // process high-water mark when available
  double wall_s = 0;
  std::string status = "ok";
};

/// Greedy decoding of n tokens from [S] for `batch` independent sessions
/// stepped in lockstep on the calling thread. Token ids are fed back as
/// produced; [E] does not stop the loop. Allocation failures are reported as
/// status "oom" rather than thrown.
BenchReport run_decode_bench(const ModelWeights& w, const std::string& variant, const BenchOptions& opt);

void write_bench_csv_header(std::ostream& out);
void write_bench_csv_row(std::ostream& out, const BenchReport& r);

/// Per-position step seconds summed over the linear and over the full
/// attention layers of a model, collected during one greedy decode of n
/// tokens. Stages that skip a position contribute nothing at that position.
struct StepCostProfile {
  std::vector<double> linear_seconds;
  std::vector<double> full_seconds;
  int linear_layers = 0;
  int full_layers = 0;
};

StepCostProfile profile_step_costs(const ModelWeights& w, std::size_t n);

/// Process peak resident set size in bytes, or 0 when it cannot be read.
std::size_t peak_rss_bytes();

}  // namespace iflame
