#include <map>
#include <sstream>

#include "doctest.h"
#include "iflame/inference.hpp"
#include "iflame/variants.hpp"
#include "test_util.hpp"

using namespace iflame;
using testutil::micro_config;
using testutil::random_tokens;
using testutil::random_vec;
using testutil::random_weights;
using testutil::rel_err;

namespace {

// A one-layer plain model whose logits depend only on the current token:
// every layer is zeroed, embeddings are one-hot and the output matrix maps
// token a to a large logit on successor[a].
ModelWeights successor_stub(const std::map<TokenId, TokenId>& successor, int bins = 16) {
  ModelConfig c;
  c.bins = bins;
  c.dim = 20;
  c.heads = 2;
  c.hourglass = false;
  c.plain_depth = 1;
  c.max_context = 2048;
  c.ffn_hidden = 8;
  ModelWeights w = init_weights(c, 0);
  w.visit([](const std::string&, Mat& m) { m.setZero(); });
  w.final_norm.setOnes();
  for (int t = 0; t < c.vocab_size(); ++t) w.embedding(t, t) = 1.0;
  for (const auto& [from, to] : successor) w.output(to, from) = 100.0;
  return w;
}

}  // namespace

TEST_CASE("update schedule") {
  CHECK(update_schedule(8).core);
  const UpdateFlags first = update_schedule(0);
  CHECK(first == UpdateFlags{true, false, false, false, true});
  int enc1 = 0, core = 0;
  for (std::size_t t = 0; t < 18; ++t) {
    const UpdateFlags f = update_schedule(t);
    CHECK(f.enc1 == f.dec0);
    enc1 += f.enc1;
    core += f.core;
  }
  CHECK(enc1 == 6);
  CHECK(core == 2);
}

TEST_CASE("incremental engine reproduces the whole-sequence forward") {
  std::mt19937_64 rng(1);
  ModelConfig base = micro_config(16, 2);
  base.plain_depth = 8;
  base.depths = {2, 2, 4, 2, 2};
  for (Variant v : kAllVariants) {
    for (bool learned_pad : {false, true}) {
      CAPTURE(to_string(v));
      CAPTURE(learned_pad);
      ModelConfig c = variant_config(v, base);
      c.learned_pad = learned_pad;
      const ModelWeights w = random_weights(c, 2);
      const auto tokens = random_tokens(rng, 60, c.vocab_size());
      const Mat par = model_forward(tokens, w);
      InferenceState state(w);
      for (std::size_t t = 0; t < tokens.size(); ++t) {
        const Vec step = process_token(tokens[t], state, w);
        REQUIRE(rel_err(step.transpose(), par.row(static_cast<Eigen::Index>(t))) < 1e-9);
      }
      CHECK(state.position() == tokens.size());
    }
  }
}

TEST_CASE("decoder inputs stay at the pad for the first two steps") {
  const ModelConfig c = micro_config();
  const ModelWeights w = random_weights(c, 3);
  InferenceState s(w);
  process_token(c.bins, s, w);
  CHECK(s.dec1_input().cwiseAbs().maxCoeff() == 0.0);
  process_token(1, s, w);
  CHECK(s.dec1_input().cwiseAbs().maxCoeff() == 0.0);
  process_token(2, s, w);
  CHECK(s.dec1_input().cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("per-step work is smaller on fine-only steps") {
  const ModelConfig c = micro_config();
  const ModelWeights w = random_weights(c, 4);
  InferenceState s(w);
  std::mt19937_64 rng(4);
  std::vector<std::uint64_t> macs;
  for (int t = 0; t < 27; ++t) {
    process_token(static_cast<TokenId>(rng() % c.bins), s, w);
    macs.push_back(s.last_step_macs());
  }
  for (int t = 0; t < 27; ++t) {
    const UpdateFlags f = update_schedule(t);
    if (!f.enc1 && !f.core) {
      for (int u = 0; u < 27; ++u) {
        if (update_schedule(u).core) CHECK(macs[t] < macs[u]);
      }
    }
  }
}

TEST_CASE("cache accounting") {
  const ModelConfig def;
  const CacheReport r = cache_bytes(def, 9000, 2);
  CHECK(r.kv_positions == 26000);
  CHECK(r.baseline_positions == 216000);
  CHECK(r.reduction_pct == doctest::Approx(100.0 * (1.0 - 26.0 / 216.0)));
  CHECK(r.kv_bytes == 2u * 26000 * 512 * 2);
  CHECK(r.buffer_bytes == 8u * 512 * 2);
  CHECK(r.state_bytes == 18u * 16 * 32 * 32 * 2);
  CHECK(cache_bytes(def, 36000, 2).state_bytes == r.state_bytes);

  const CacheReport plain = cache_bytes(variant_config(Variant::kInterleavedSimplified), 36000, 2);
  CHECK(plain.kv_positions * 4 == plain.baseline_positions);
  CHECK(plain.reduction_pct == 75.0);
  CHECK(cache_bytes(variant_config(Variant::kFull), 100, 2).reduction_pct == 0.0);
  CHECK(cache_bytes(variant_config(Variant::kLinear), 100, 2).kv_bytes == 0);

  std::ostringstream kv, csv;
  write_cache_report_kv(kv, cache_bytes(def, 36000, 2, "I+S+H"));
  CHECK(kv.str().find("reduction_pct=87.96\n") != std::string::npos);
  write_cache_report_csv_header(csv);
  write_cache_report_csv_row(csv, plain);
  CHECK(csv.str().rfind("variant,n,kv_bytes,state_bytes,buffer_bytes,baseline_bytes,reduction_pct\n", 0) == 0);
  CHECK(csv.str().find(",75.00\n") != std::string::npos);
}

TEST_CASE("measured cache bytes match the prediction and respect capacity") {
  std::mt19937_64 rng(5);
  ModelConfig base = micro_config();
  base.max_context = 40;
  for (Variant v : kAllVariants) {
    CAPTURE(to_string(v));
    const ModelConfig c = variant_config(v, base);
    const ModelWeights w = random_weights(c, 5);
    InferenceState s(w);
    const CacheReport ceiling = cache_bytes(c, static_cast<std::size_t>(c.max_context), sizeof(Real));
    for (int t = 0; t < c.max_context; ++t) {
      process_token(static_cast<TokenId>(rng() % c.bins), s, w);
      const CacheReport p = cache_bytes(c, static_cast<std::size_t>(t + 1), sizeof(Real));
      REQUIRE(s.kv_bytes() == p.kv_bytes);
      REQUIRE(s.state_bytes() == p.state_bytes);
      REQUIRE(s.buffer_bytes() == p.buffer_bytes);
      REQUIRE(s.resident_bytes() <= ceiling.kv_bytes + ceiling.state_bytes + ceiling.buffer_bytes);
    }
    try {
      process_token(0, s, w);
      FAIL("expected context overflow");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kContextOverflow);
    }
  }
}

TEST_CASE("sampler: top-k 1 is argmax, hand example, brute-force oracle") {
  std::mt19937_64 rng(6);
  SamplerConfig greedy;
  greedy.top_k = 1;
  for (int i = 0; i < 1000; ++i) {
    const Vec l = random_vec(rng, 131, 3.0);
    Eigen::Index best;
    l.maxCoeff(&best);
    CHECK(sample_token(l, greedy, rng) == best);
  }

  Vec probs(4);
  probs << 0.90, 0.05, 0.03, 0.02;
  SamplerConfig nucleus;
  nucleus.top_p = 0.95;
  const SamplingSupport s = sampling_support(probs.array().log().matrix(), nucleus);
  CHECK(s.tokens == std::vector<TokenId>{0, 1});

  for (int trial = 0; trial < 500; ++trial) {
    SamplerConfig cfg;
    cfg.top_k = 1 + static_cast<int>(rng() % 40);
    cfg.top_p = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    cfg.temperature = std::uniform_real_distribution<double>(0.3, 2.0)(rng);
    const Vec l = random_vec(rng, 30, 2.0);
    // oracle: sort by value, keep k, softmax, smallest prefix reaching top_p
    std::vector<std::pair<double, int>> items;
    for (int i = 0; i < l.size(); ++i) items.emplace_back(-l(i), i);
    std::sort(items.begin(), items.end());
    items.resize(std::min<std::size_t>(cfg.top_k, items.size()));
    std::vector<double> p;
    double z = 0;
    for (auto& [neg, i] : items) {
      p.push_back(std::exp((-neg - l.maxCoeff()) / cfg.temperature));
      z += p.back();
    }
    std::vector<TokenId> expected;
    double cum = 0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      expected.push_back(items[i].second);
      cum += p[i] / z;
      if (cum >= cfg.top_p) break;
    }
    const SamplingSupport got = sampling_support(l, cfg);
    CHECK(got.tokens == expected);
    double total = 0;
    for (double x : got.probs) total += x;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    for (int d = 0; d < 5; ++d) {
      const TokenId t = sample_token(l, cfg, rng);
      CHECK(std::find(expected.begin(), expected.end(), t) != expected.end());
    }
  }
}

TEST_CASE("sampler: full categorical matches softmax frequencies") {
  std::mt19937_64 rng(7);
  const Vec l = random_vec(rng, 12, 1.0);
  SamplerConfig cfg;
  cfg.top_p = 1.0;
  cfg.top_k = 12;
  const Vec p = softmax(l);
  std::vector<int> counts(12, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++counts[sample_token(l, cfg, rng)];
  for (int i = 0; i < 12; ++i) {
    const double sigma = std::sqrt(draws * p(i) * (1 - p(i)));
    CHECK(std::abs(counts[i] - draws * p(i)) <= 3 * sigma);
  }
}

TEST_CASE("sampler validation and grammar mask") {
  SamplerConfig bad;
  bad.top_p = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad.top_p = 1.5;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = SamplerConfig{};
  bad.top_k = 0;
  CHECK_THROWS_AS(bad.validate(), Error);

  Vec l = Vec::Zero(19);
  mask_grammar(l, 4, 16);
  CHECK(std::isinf(l(16)));
  CHECK(std::isinf(l(17)));
  CHECK(std::isinf(l(18)));
  Vec m = Vec::Zero(19);
  mask_grammar(m, 9, 16);
  CHECK(std::isfinite(m(17)));
  CHECK(std::isinf(m(16)));
}

TEST_CASE("generate with a stub model") {
  std::map<TokenId, TokenId> next{{16, 0}};
  for (TokenId t = 0; t < 8; ++t) next[t] = t + 1;
  next[8] = 17;  // [E]
  const ModelWeights w = successor_stub(next);
  std::vector<TokenId> expected{16, 0, 1, 2, 3, 4, 5, 6, 7, 8, 17};
  SamplerConfig cfg;
  cfg.seed = 3;
  CHECK(generate(w, cfg, 10) == expected);

  next[8] = 0;  // loop forever; the face cap stops it
  const ModelWeights loop = successor_stub(next);
  const auto capped = generate(loop, cfg, 2);
  REQUIRE(capped.size() == 20);
  CHECK(capped.back() == 17);
  CHECK(is_grammatical(capped, QuantizerConfig{16}));
}

TEST_CASE("generate and complete on random weights") {
  ModelConfig c = micro_config();
  c.max_context = 1024;
  const ModelWeights w = random_weights(c, 8, 0.1);
  const QuantizerConfig q{c.bins};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SamplerConfig cfg;
    cfg.seed = seed;
    const auto a = generate(w, cfg, 20);
    CHECK(a == generate(w, cfg, 20));
    CHECK(a.front() == q.start_token());
    CHECK(a.back() == q.end_token());
    for (std::size_t i = 1; i + 1 < a.size(); ++i) CHECK(q.is_coordinate(a[i]));
    CHECK(a.size() <= 2 + 9 * 20);
    const std::vector<TokenId> start{q.start_token()};
    CHECK(complete(start, w, cfg, 20) == a);

    cfg.strict_grammar = true;
    CHECK(is_grammatical(generate(w, cfg, 5), q));
  }

  std::mt19937_64 rng(9);
  std::vector<TokenId> prefix{q.start_token()};
  for (int i = 0; i < 9 * 50; ++i) prefix.push_back(static_cast<TokenId>(rng() % c.bins));
  SamplerConfig cfg;
  const auto out = complete(prefix, w, cfg, 60);
  REQUIRE(out.size() >= 452);
  CHECK(std::equal(prefix.begin(), prefix.end(), out.begin()));

  // prefill then one step equals the whole-sequence forward on the prefix
  InferenceState s(w);
  Vec last;
  for (TokenId t : prefix) last = process_token(t, s, w);
  CHECK(rel_err(last.transpose(), model_forward(prefix, w).bottomRows(1)) < 1e-9);

  std::vector<TokenId> bad = prefix;
  bad.pop_back();
  CHECK_THROWS_AS(complete(bad, w, cfg, 60), Error);
  bad = prefix;
  bad[3] = q.end_token();
  CHECK_THROWS_AS(complete(bad, w, cfg, 60), Error);
}
