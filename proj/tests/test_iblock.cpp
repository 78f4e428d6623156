#include "doctest.h"
#include "iflame/iblock.hpp"
#include "test_util.hpp"

using namespace iflame;
using testutil::random_mat;
using testutil::rel_err;

namespace {

LayerWeights make_layer(std::mt19937_64& rng, int d, int h, AttentionKind kind, bool gated, Real scale = 0.4) {
  LayerWeights l;
  l.kind = kind;
  l.attn = {random_mat(rng, d, d, scale), random_mat(rng, d, d, scale), random_mat(rng, d, d, scale),
            random_mat(rng, d, d, scale), gated && kind == AttentionKind::kLinear ? random_mat(rng, d, d, scale) : Mat()};
  l.ffn = {random_mat(rng, h, d, scale), random_mat(rng, h, d, scale), random_mat(rng, d, h, scale)};
  l.norm_attn = Mat::Ones(1, d) + random_mat(rng, 1, d, 0.2);
  l.norm_ffn = Mat::Ones(1, d) + random_mat(rng, 1, d, 0.2);
  return l;
}

LayerWeights zeros_like_layer(const LayerWeights& l) {
  LayerWeights z = l;
  auto zero = [](Mat& m) { m.setZero(); };
  zero(z.attn.wq), zero(z.attn.wk), zero(z.attn.wv), zero(z.attn.wo);
  if (z.attn.wg.size()) zero(z.attn.wg);
  zero(z.ffn.gate), zero(z.ffn.up), zero(z.ffn.down), zero(z.norm_attn), zero(z.norm_ffn);
  return z;
}

template <typename Loss>
void check_grad(Mat& param, const Mat& analytic, Loss&& loss, Real h = 1e-5) {
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    const Real saved = param.data()[i];
    param.data()[i] = saved + h;
    const Real up = loss();
    param.data()[i] = saved - h;
    const Real down = loss();
    param.data()[i] = saved;
    const Real numeric = (up - down) / (2 * h);
    const Real a = analytic.data()[i];
    const bool ok = std::abs(a - numeric) <= 1e-3 * std::max(std::abs(a), std::abs(numeric)) ||
                    std::abs(a - numeric) <= 1e-8;
    CHECK_MESSAGE(ok, "index " << i << " analytic " << a << " numeric " << numeric);
  }
}

}  // namespace

TEST_CASE("layer_kind interleave rule") {
  CHECK(layer_kind(3) == AttentionKind::kFull);
  for (int i : {0, 1, 2}) CHECK(layer_kind(i) == AttentionKind::kLinear);
  std::vector<int> full;
  for (int i = 0; i < 8; ++i) {
    if (layer_kind(i) == AttentionKind::kFull) full.push_back(i);
  }
  CHECK(full == std::vector<int>{3, 7});
  CHECK(layer_kind(0, FullPosition::kFirst) == AttentionKind::kFull);
  CHECK(layer_kind(3, FullPosition::kFirst) == AttentionKind::kLinear);
  CHECK(layer_kind(4, FullPosition::kFirst) == AttentionKind::kFull);
  for (int i = 0; i < 8; ++i) {
    CHECK(layer_kind(i, AttentionPattern::kAllFull, FullPosition::kLast) == AttentionKind::kFull);
    CHECK(layer_kind(i, AttentionPattern::kAllLinear, FullPosition::kLast) == AttentionKind::kLinear);
  }
  for (int depth = 0; depth < 30; ++depth) {
    int count = 0;
    for (int i = 0; i < depth; ++i) count += layer_kind(i) == AttentionKind::kFull ? 1 : 0;
    CHECK(count == depth / 4);
  }
}

TEST_CASE("zero weights give the identity map") {
  std::mt19937_64 rng(1);
  const RotaryTable rope(4, 32);
  const BlockContext ctx{2, LinearVariant::kSimplified, 1e-6, &rope};
  for (AttentionKind kind : {AttentionKind::kFull, AttentionKind::kLinear}) {
    const LayerWeights l = zeros_like_layer(make_layer(rng, 8, 16, kind, false));
    const Mat x = random_mat(rng, 10, 8);
    CHECK((block_forward(x, l, ctx) - x).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("hand composition oracle, d=2") {
  std::mt19937_64 rng(2);
  const RotaryTable rope(2, 16);
  const BlockContext ctx{1, LinearVariant::kSimplified, 1e-6, &rope};
  for (AttentionKind kind : {AttentionKind::kFull, AttentionKind::kLinear}) {
    const LayerWeights l = make_layer(rng, 2, 3, kind, false);
    const Mat x = random_mat(rng, 5, 2);
    Mat expected(5, 2);
    // attention by hand, row by row
    Mat q(5, 2), k(5, 2), v(5, 2), xn(5, 2);
    for (int t = 0; t < 5; ++t) {
      const Vec n = rms_norm(x.row(t).transpose(), l.norm_attn.row(0).transpose());
      xn.row(t) = n.transpose();
      q.row(t) = rope_apply(l.attn.wq * n, t, rope).transpose();
      k.row(t) = rope_apply(l.attn.wk * n, t, rope).transpose();
      v.row(t) = (l.attn.wv * n).transpose();
    }
    for (int t = 0; t < 5; ++t) {
      Vec a = Vec::Zero(2);
      if (kind == AttentionKind::kFull) {
        Vec s(t + 1);
        for (int j = 0; j <= t; ++j) s(j) = q.row(t).dot(k.row(j)) / std::sqrt(2.0);
        const Vec p = softmax(s);
        for (int j = 0; j <= t; ++j) a += p(j) * v.row(j).transpose();
      } else {
        for (int j = 0; j <= t; ++j) a += q.row(t).dot(k.row(j)) * v.row(j).transpose();
        a = rms_norm(a, Vec::Ones(2), 1e-6);
      }
      const Vec h = x.row(t).transpose() + l.attn.wo * a;
      const Vec y = h + swiglu_ffn(rms_norm(h, l.norm_ffn.row(0).transpose()), l.ffn);
      expected.row(t) = y.transpose();
    }
    CHECK(rel_err(block_forward(x, l, ctx), expected) < 1e-12);
  }
}

TEST_CASE("block and stage: causality, gradients, incremental equivalence") {
  const int d = 8, h = 12, n = 9;
  const RotaryTable rope(4, 64);
  for (LinearVariant variant : {LinearVariant::kSimplified, LinearVariant::kGated}) {
    for (FullPosition pos : {FullPosition::kLast, FullPosition::kFirst}) {
      std::mt19937_64 rng(3);
      const BlockContext ctx{2, variant, 1e-6, &rope};
      Stage stage;
      for (int i = 0; i < 4; ++i) stage.push_back(make_layer(rng, d, h, layer_kind(i, pos), variant == LinearVariant::kGated));
      Mat x = random_mat(rng, n, d);
      StageCache cache;
      const Mat y = stage_forward(x, stage, ctx, &cache);

      for (int j = 0; j < n; ++j) {
        Mat x2 = x;
        x2.row(j) += random_mat(rng, 1, d);
        const Mat y2 = stage_forward(x2, stage, ctx);
        if (j > 0) CHECK((y2.topRows(j) - y.topRows(j)).cwiseAbs().maxCoeff() < 1e-12);
      }

      StageState state = StageState::make(stage, ctx, d, n);
      for (int t = 0; t < n; ++t) {
        const Vec o = stage_step(x.row(t).transpose(), stage, ctx, state);
        CHECK(rel_err(o.transpose(), y.row(t)) < 1e-10);
      }

      const Mat probe = random_mat(rng, n, d);
      Stage grad = stage;
      for (auto& l : grad) l = zeros_like_layer(l);
      const Mat dx = stage_backward(probe, cache, stage, ctx, grad);
      auto loss = [&] { return stage_forward(x, stage, ctx).cwiseProduct(probe).sum(); };
      check_grad(x, dx, loss);
      for (std::size_t i = 0; i < stage.size(); ++i) {
        check_grad(stage[i].norm_attn, grad[i].norm_attn, loss);
        check_grad(stage[i].norm_ffn, grad[i].norm_ffn, loss);
        check_grad(stage[i].attn.wq, grad[i].attn.wq, loss);
        check_grad(stage[i].attn.wo, grad[i].attn.wo, loss);
        check_grad(stage[i].ffn.down, grad[i].ffn.down, loss);
      }
    }
  }
}
