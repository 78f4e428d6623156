#include "iflame/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <new>
#include <ostream>
#include <sstream>

#include "iflame/inference.hpp"
#include "iflame/mesh_codec.hpp"

namespace iflame {

namespace {

TokenId argmax(const Vec& logits) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i) {
    if (logits(i) > logits(best)) best = i;
  }
  return static_cast<TokenId>(best);
}

struct RunResult {
  double seconds = 0;
  std::size_t cache_bytes = 0;
};

RunResult decode_once(const ModelWeights& w, std::size_t n, int batch) {
  const QuantizerConfig q{w.config.bins};
  std::vector<InferenceState> sessions;
  sessions.reserve(batch);
  for (int b = 0; b < batch; ++b) sessions.emplace_back(w);
  std::vector<TokenId> next(batch, q.start_token());
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t t = 0; t < n; ++t) {
    for (int b = 0; b < batch; ++b) next[b] = argmax(process_token(next[b], sessions[b], w));
  }
  const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
  RunResult r;
  r.seconds = dt.count();
  for (const InferenceState& s : sessions) r.cache_bytes += s.resident_bytes();
  return r;
}

}  // namespace

std::size_t peak_rss_bytes() {
  std::ifstream in("/proc/self/status");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("VmHWM:", 0) == 0) {
      std::istringstream ls(line.substr(6));
      std::size_t kb = 0;
      ls >> kb;
      return kb * 1024;
    }
  }
  return 0;
}

BenchReport run_decode_bench(const ModelWeights& w, const std::string& variant, const BenchOptions& opt) {
  require(opt.n >= 1, "bench: n must be >= 1");
  require(opt.batch >= 1, "bench: batch must be >= 1");
  require(opt.runs >= 1 && opt.warmup_runs >= 0, "bench: need runs >= 1 and warmup_runs >= 0");
  require(opt.n <= static_cast<std::size_t>(w.config.max_context),
          "bench: n exceeds the variant context limit " + std::to_string(w.config.max_context));
  BenchReport r;
  r.variant = variant;
  r.n = opt.n;
  r.batch = opt.batch;
  r.predicted_cache_bytes = static_cast<std::size_t>(opt.batch) * [&] {
    const CacheReport c = cache_bytes(w.config, opt.n, sizeof(Real));
    return c.kv_bytes + c.state_bytes + c.buffer_bytes;
  }();
  const auto start = std::chrono::steady_clock::now();
  try {
    for (int i = 0; i < opt.warmup_runs; ++i) decode_once(w, opt.n, opt.batch);
    std::vector<double> times;
    for (int i = 0; i < opt.runs; ++i) {
      const RunResult rr = decode_once(w, opt.n, opt.batch);
      times.push_back(rr.seconds);
      r.cache_bytes = rr.cache_bytes;
    }
    std::sort(times.begin(), times.end());
    const double median = times.size() % 2 == 1 ? times[times.size() / 2]
                                                : 0.5 * (times[times.size() / 2 - 1] + times[times.size() / 2]);
    r.ms_per_token = 1000.0 * median / static_cast<double>(opt.n);
    r.tokens_per_s = r.ms_per_token > 0 ? opt.batch * 1000.0 / r.ms_per_token : 0.0;
  } catch (const std::bad_alloc&) {
    r.status = "oom";
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kOutOfMemory) throw;
    r.status = "oom";
  }
  const std::chrono::duration<double> wall = std::chrono::steady_clock::now() - start;
  r.wall_s = wall.count();
  r.peak_resident_bytes = peak_rss_bytes();
  return r;
}

void write_bench_csv_header(std::ostream& out) {
  out << "variant,n,batch,ms_per_token,tokens_per_s,cache_bytes,peak_resident_bytes,wall_s,status\n";
}

void write_bench_csv_row(std::ostream& out, const BenchReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s,%zu,%d,%.4f,%.2f,%zu,%zu,%.3f,%s\n", r.variant.c_str(), r.n, r.batch,
                r.ms_per_token, r.tokens_per_s, r.cache_bytes, r.peak_resident_bytes, r.wall_s, r.status.c_str());
  out << buf;
}

StepCostProfile profile_step_costs(const ModelWeights& w, std::size_t n) {
  const QuantizerConfig q{w.config.bins};
  StepCostProfile p;
  p.linear_seconds.assign(n, 0.0);
  p.full_seconds.assign(n, 0.0);
  for (const Stage& s : w.stages) {
    for (const LayerWeights& l : s) (l.kind == AttentionKind::kFull ? p.full_layers : p.linear_layers) += 1;
  }
  InferenceState state(w);
  state.enable_profiling(true);
  TokenId next = q.start_token();
  for (std::size_t t = 0; t < n; ++t) {
    state.clear_timings();
    next = argmax(process_token(next, state, w));
    for (const LayerTiming& lt : state.timings()) {
      (lt.kind == AttentionKind::kFull ? p.full_seconds : p.linear_seconds)[t] += lt.seconds;
    }
  }
  return p;
}

}  // namespace iflame
