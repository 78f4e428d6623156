#include "doctest.h"
#include "iflame/hourglass.hpp"
#include "test_util.hpp"

using namespace iflame;
using testutil::micro_config;
using testutil::random_mat;
using testutil::random_tokens;
using testutil::random_weights;
using testutil::rel_err;

TEST_CASE("config arithmetic") {
  const ModelConfig c;
  CHECK(c.vocab_size() == 131);
  CHECK(c.head_dim() == 32);
  CHECK(c.total_layers() == 24);
  CHECK(c.stage_stride(kEnc0) == 1);
  CHECK(c.stage_stride(kEnc1) == 3);
  CHECK(c.stage_stride(kCore) == 9);
  CHECK(c.stage_stride(kDec0) == 3);
  CHECK(c.stage_stride(kDec1) == 1);
  CHECK(c.stage_capacity(kEnc0) == 36864);
  CHECK(c.stage_capacity(kEnc1) == 12288);
  CHECK(c.stage_capacity(kCore) == 4096);
  CHECK(c.hidden() == 1344);

  ModelConfig bad = c;
  bad.heads = 5;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("parameter count") {
  const std::size_t n = parameter_count(ModelConfig{});
  MESSAGE("default parameter count: " << n);
  CHECK(std::abs(static_cast<double>(n) - 76e6) / 76e6 < 0.10);
  for (bool hourglass : {true, false}) {
    for (bool tie : {true, false}) {
      ModelConfig c = micro_config();
      c.hourglass = hourglass;
      c.tie_embeddings = tie;
      c.learned_pad = true;
      c.linear_variant = LinearVariant::kGated;
      CHECK(parameter_count(c) == parameter_count(init_weights(c, 1)));
    }
  }
}

TEST_CASE("downsample examples") {
  std::mt19937_64 rng(1);
  const Mat w = random_mat(rng, 4, 12);
  const Mat fine3 = random_mat(rng, 3, 4);
  const Mat c3 = downsample(fine3, w, 3);
  REQUIRE(c3.rows() == 1);
  Vec cat(12);
  cat << fine3.row(0).transpose(), fine3.row(1).transpose(), fine3.row(2).transpose();
  CHECK(rel_err(c3.row(0).transpose(), Vec(w * cat)) < 1e-14);

  Mat mean_w(4, 12);
  mean_w << Mat::Identity(4, 4) / 3, Mat::Identity(4, 4) / 3, Mat::Identity(4, 4) / 3;
  const Mat fine7 = random_mat(rng, 7, 4);
  const Mat c7 = downsample(fine7, mean_w, 3);
  REQUIRE(c7.rows() == 2);
  CHECK(rel_err(c7.row(0), fine7.topRows(3).colwise().mean()) < 1e-14);
  CHECK(rel_err(c7.row(1), fine7.middleRows(3, 3).colwise().mean()) < 1e-14);
}

TEST_CASE("upsample_shifted examples") {
  std::mt19937_64 rng(2);
  const Mat coarse = random_mat(rng, 2, 4);
  const Mat up = upsample_shifted(coarse, Mat::Identity(4, 4), 3, 7);
  REQUIRE(up.rows() == 7);
  CHECK(up.row(0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(up.row(1).cwiseAbs().maxCoeff() == 0.0);
  for (int t : {2, 3, 4}) CHECK(up.row(t) == coarse.row(0));
  for (int t : {5, 6}) CHECK(up.row(t) == coarse.row(1));

  const Mat pad = random_mat(rng, 1, 4);
  const Mat padded = upsample_shifted(coarse, Mat::Identity(4, 4), 3, 7, &pad);
  CHECK(padded.row(0) == pad.row(0));
  CHECK(padded.row(1) == pad.row(0));
}

TEST_CASE("resampling gradients") {
  std::mt19937_64 rng(3);
  Mat fine = random_mat(rng, 8, 4), wd = random_mat(rng, 4, 12), wu = random_mat(rng, 4, 4), pad = random_mat(rng, 1, 4);
  Mat coarse = random_mat(rng, 3, 4);
  const Mat pd = random_mat(rng, 2, 4), pu = random_mat(rng, 8, 4);
  Mat dwd = Mat::Zero(4, 12), dwu = Mat::Zero(4, 4), dpad = Mat::Zero(1, 4);
  const Mat dfine = downsample_backward(pd, fine, wd, 3, dwd);
  const Mat dcoarse = upsample_shifted_backward(pu, coarse, wu, 3, dwu, &dpad);
  auto check = [](Mat& p, const Mat& g, auto&& loss) {
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const Real s = p.data()[i];
      p.data()[i] = s + 1e-6;
      const Real a = loss();
      p.data()[i] = s - 1e-6;
      const Real b = loss();
      p.data()[i] = s;
      CHECK(std::abs((a - b) / 2e-6 - g.data()[i]) < 1e-6 * std::max<Real>(1, std::abs(g.data()[i])));
    }
  };
  auto ld = [&] { return downsample(fine, wd, 3).cwiseProduct(pd).sum(); };
  auto lu = [&] { return upsample_shifted(coarse, wu, 3, 8, &pad).cwiseProduct(pu).sum(); };
  check(fine, dfine, ld);
  check(wd, dwd, ld);
  check(coarse, dcoarse, lu);
  check(wu, dwu, lu);
  check(pad, dpad, lu);
}

TEST_CASE("model_forward: shape, stage counters, length limit") {
  const ModelConfig c = micro_config();
  const ModelWeights w = random_weights(c, 4);
  std::mt19937_64 rng(4);
  for (std::size_t n : {1u, 2u, 3u, 8u, 9u, 10u, 40u}) {
    ForwardStats stats;
    const Mat logits = model_forward(random_tokens(rng, n, c.vocab_size()), w, &stats);
    CHECK(logits.rows() == static_cast<Eigen::Index>(n));
    CHECK(logits.cols() == c.vocab_size());
    CHECK(stats.stage_positions[kEnc0] == n);
    CHECK(stats.stage_positions[kEnc1] == n / 3);
    CHECK(stats.stage_positions[kCore] == n / 9);
    CHECK(stats.stage_positions[kDec0] == n / 3);
    CHECK(stats.stage_positions[kDec1] == n);
  }
  CHECK_THROWS_AS(model_forward(random_tokens(rng, c.max_context + 1, c.vocab_size()), w), Error);
}

TEST_CASE("model_forward is causal") {
  std::mt19937_64 rng(5);
  for (LinearVariant lv : {LinearVariant::kSimplified, LinearVariant::kGated}) {
    for (FullPosition fp : {FullPosition::kLast, FullPosition::kFirst}) {
      ModelConfig c = micro_config();
      c.linear_variant = lv;
      c.full_position = fp;
      const ModelWeights w = random_weights(c, 6);
      for (int trial = 0; trial < 10; ++trial) {
        const std::size_t n = 20 + rng() % 30;
        auto tokens = random_tokens(rng, n, c.vocab_size());
        const Mat base = model_forward(tokens, w);
        const std::size_t j = rng() % n;
        tokens[j] = (tokens[j] + 1 + static_cast<TokenId>(rng() % (c.vocab_size() - 1))) % c.vocab_size();
        const Mat changed = model_forward(tokens, w);
        if (j > 0) CHECK((changed.topRows(j) - base.topRows(j)).cwiseAbs().maxCoeff() < 1e-7);
        CHECK((changed.row(j) - base.row(j)).cwiseAbs().maxCoeff() > 0);
      }
    }
  }
}

TEST_CASE("zeroed inner stages reduce to a plain coordinate-scale model") {
  ModelConfig c = micro_config();
  c.depths = {4, 1, 2, 1, 4};
  const ModelWeights hw = [&] {
    ModelWeights w = random_weights(c, 7);
    for (int s : {kEnc1, kCore, kDec0}) {
      for (auto& l : w.stages[s]) {
        l.attn.wo.setZero();
        l.ffn.down.setZero();
      }
    }
    w.up_vertex.setZero();
    w.up_coord.setZero();
    return w;
  }();
  ModelConfig pc = c;
  pc.hourglass = false;
  pc.plain_depth = 8;
  ModelWeights pw = init_weights(pc, 0);
  pw.embedding = hw.embedding;
  pw.final_norm = hw.final_norm;
  pw.output = hw.output;
  for (int i = 0; i < 4; ++i) {
    pw.stages[0][i] = hw.stages[kEnc0][i];
    pw.stages[0][4 + i] = hw.stages[kDec1][i];
  }
  std::mt19937_64 rng(8);
  const auto tokens = random_tokens(rng, 50, c.vocab_size());
  CHECK(rel_err(model_forward(tokens, hw), model_forward(tokens, pw)) < 1e-12);
}

TEST_CASE("model gradient matches finite differences") {
  std::mt19937_64 rng(9);
  struct Case {
    const char* name;
    bool hourglass, tie, learned_pad;
    LinearVariant lv;
    FullPosition fp;
  };
  for (const Case& k : {Case{"hourglass", true, false, false, LinearVariant::kSimplified, FullPosition::kFirst},
                        Case{"gated tied pad", true, true, true, LinearVariant::kGated, FullPosition::kLast},
                        Case{"plain", false, false, false, LinearVariant::kSimplified, FullPosition::kLast}}) {
    CAPTURE(k.name);
    ModelConfig c = micro_config();
    c.hourglass = k.hourglass;
    c.plain_depth = 4;
    c.tie_embeddings = k.tie;
    c.learned_pad = k.learned_pad;
    c.linear_variant = k.lv;
    c.full_position = k.fp;
    ModelWeights w = random_weights(c, 10);
    const auto tokens = random_tokens(rng, 22, c.vocab_size());
    const std::vector<TokenId> inputs(tokens.begin(), tokens.end() - 1), targets(tokens.begin() + 1, tokens.end());
    const std::vector<std::uint8_t> valid(targets.size(), 1);
    ModelCache cache;
    Mat dlogits;
    cross_entropy(model_forward(inputs, w, nullptr, &cache), targets, valid, &dlogits);
    ModelWeights grad = zeros_like(w);
    model_backward(dlogits, cache, w, grad);

    std::vector<std::pair<Mat*, const Mat*>> pairs;
    std::vector<const Mat*> grads;
    grad.visit([&](const std::string&, const Mat& g) { grads.push_back(&g); });
    std::size_t idx = 0;
    w.visit([&](const std::string&, Mat& m) { pairs.emplace_back(&m, grads[idx++]); });
    int checked = 0;
    for (auto [param, g] : pairs) {
      for (int s = 0; s < 3; ++s) {
        const Eigen::Index i = static_cast<Eigen::Index>(rng() % param->size());
        const Real saved = param->data()[i];
        const Real h = 1e-5;
        param->data()[i] = saved + h;
        const Real up = cross_entropy(model_forward(inputs, w), targets, valid);
        param->data()[i] = saved - h;
        const Real down = cross_entropy(model_forward(inputs, w), targets, valid);
        param->data()[i] = saved;
        const Real numeric = (up - down) / (2 * h), a = g->data()[i];
        const bool ok = std::abs(a - numeric) <= 1e-3 * std::max(std::abs(a), std::abs(numeric)) ||
                        std::abs(a - numeric) <= 1e-9;
        CHECK_MESSAGE(ok, "analytic " << a << " numeric " << numeric);
        ++checked;
      }
    }
    CHECK(checked > 50);
  }
}
