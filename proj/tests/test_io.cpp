#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "iflame/bench.hpp"
#include "iflame/checkpoint.hpp"
#include "iflame/config_file.hpp"
#include "iflame/inference.hpp"
#include "iflame/variants.hpp"
#include "test_util.hpp"

using namespace iflame;

TEST_CASE("variants") {
  for (Variant v : kAllVariants) CHECK(parse_variant(to_string(v)) == v);
  CHECK_THROWS_AS(parse_variant("I+H"), Error);

  const ModelConfig base;
  for (Variant v : kAllVariants) {
    const ModelConfig c = variant_config(v, base);
    CHECK(c.dim == base.dim);
    CHECK(c.heads == base.heads);
    CHECK(c.vocab_size() == base.vocab_size());
    CHECK(c.total_layers() == 24);
  }
  CHECK(variant_config(Variant::kHourglass).hourglass);
  CHECK_FALSE(variant_config(Variant::kInterleavedSimplified).hourglass);
  CHECK(variant_config(Variant::kInterleaved).linear_variant == LinearVariant::kGated);
  CHECK(variant_config(Variant::kInterleavedSimplified).linear_variant == LinearVariant::kSimplified);
  CHECK(variant_config(Variant::kFull).pattern == AttentionPattern::kAllFull);
  CHECK(variant_config(Variant::kLinear).pattern == AttentionPattern::kAllLinear);
}

TEST_CASE("config file") {
  std::istringstream in(
      "# comment\n"
      "variant = I\n"
      "dim = 64\n"
      "heads = 4\n"
      "depths = 2, 2, 4, 2, 2\n"
      "full_position = first\n"
      "tie_embeddings = true\n"
      "norm_eps = 1e-5\n"
      "batch_size = 3\n"
      "peak_lr = 5e-4\n"
      "augment = false\n"
      "init_seed = 12\n");
  const RunConfig rc = parse_config(in);
  CHECK(rc.model.dim == 64);
  CHECK(rc.model.heads == 4);
  CHECK_FALSE(rc.model.hourglass);
  CHECK(rc.model.linear_variant == LinearVariant::kGated);
  CHECK(rc.model.depths == std::array<int, 5>{2, 2, 4, 2, 2});
  CHECK(rc.model.full_position == FullPosition::kFirst);
  CHECK(rc.model.tie_embeddings);
  CHECK(rc.model.norm_eps == 1e-5);
  CHECK(rc.train.batch_size == 3);
  CHECK(rc.train.peak_lr == 5e-4);
  CHECK_FALSE(rc.train.augment);
  CHECK(rc.init_seed == 12);

  std::stringstream round;
  write_model_config(round, rc.model);
  write_train_config(round, rc.train);
  const RunConfig back = parse_config(round);
  CHECK(back.model == rc.model);
  CHECK(back.train.peak_lr == rc.train.peak_lr);
  CHECK(back.train.batch_size == rc.train.batch_size);

  std::istringstream unknown("dimension = 4\n");
  CHECK_THROWS_AS(parse_config(unknown), Error);
  std::istringstream bad("dim = four\n");
  CHECK_THROWS_AS(parse_config(bad), Error);
  std::istringstream invalid("dim = 10\nheads = 3\n");
  CHECK_THROWS_AS(parse_config(invalid), Error);
  std::istringstream warm("epochs = 1\nwarmup_epochs = 2\n");
  CHECK_THROWS_AS(parse_config(warm), Error);
}

TEST_CASE("checkpoint round trip") {
  for (bool hourglass : {true, false}) {
    ModelConfig c = testutil::micro_config();
    c.hourglass = hourglass;
    c.plain_depth = 3;
    c.learned_pad = true;
    c.linear_variant = LinearVariant::kGated;
    const ModelWeights w = testutil::random_weights(c, 3);
    std::stringstream s;
    write_checkpoint(s, w);
    CHECK(s.str().rfind("iflame-checkpoint v1\n[config]\n", 0) == 0);
    CHECK(s.str().find("[manifest]\nembedding f64 19 8 0\n") != std::string::npos);
    const ModelWeights back = read_checkpoint(s);
    CHECK(back.config == w.config);
    std::vector<const Mat*> a, b;
    w.visit([&](const std::string&, const Mat& m) { a.push_back(&m); });
    back.visit([&](const std::string&, const Mat& m) { b.push_back(&m); });
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == *b[i]);
  }

  std::istringstream junk("not a checkpoint\n");
  CHECK_THROWS_AS(read_checkpoint(junk), Error);

  const ModelWeights w = init_weights(testutil::micro_config(), 1);
  std::stringstream s;
  write_checkpoint(s, w);
  std::string text = s.str();
  text.resize(text.size() - 16);
  std::istringstream truncated(text);
  CHECK_THROWS_AS(read_checkpoint(truncated), Error);
}

TEST_CASE("bench smoke and accounting oracle") {
  ModelConfig base = testutil::micro_config(16, 2);
  base.plain_depth = 8;
  BenchOptions opt;
  opt.n = 60;
  opt.runs = 3;
  opt.warmup_runs = 1;
  opt.batch = 2;
  std::ostringstream csv;
  write_bench_csv_header(csv);
  for (Variant v : kAllVariants) {
    const ModelConfig c = variant_config(v, base);
    const BenchReport r = run_decode_bench(init_weights(c, 1), to_string(v), opt);
    CHECK(r.status == "ok");
    CHECK(r.ms_per_token > 0);
    CHECK(r.tokens_per_s == doctest::Approx(opt.batch * 1000.0 / r.ms_per_token));
    const CacheReport p = cache_bytes(c, opt.n, sizeof(Real));
    CHECK(r.cache_bytes == static_cast<std::size_t>(opt.batch) * (p.kv_bytes + p.state_bytes + p.buffer_bytes));
    CHECK(r.cache_bytes == r.predicted_cache_bytes);
    write_bench_csv_row(csv, r);
  }
  std::istringstream lines(csv.str());
  std::string line;
  int rows = 0;
  while (std::getline(lines, line)) {
    CHECK(std::count(line.begin(), line.end(), ',') == 8);
    ++rows;
  }
  CHECK(rows == 6);

  ModelConfig tight = base;
  tight.max_context = 30;
  CHECK_THROWS_AS(run_decode_bench(init_weights(tight, 1), "x", opt), Error);

  const StepCostProfile prof = profile_step_costs(init_weights(variant_config(Variant::kInterleaved, base), 1), 20);
  CHECK(prof.full_layers == 2);
  CHECK(prof.linear_layers == 6);
  CHECK(prof.full_seconds.size() == 20);
}
