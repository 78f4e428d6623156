#include "iflame/attention.hpp"

#include <cmath>

namespace iflame {
namespace {

Eigen::Index head_dim_of(const Mat& m, int heads) {
  require(heads >= 1 && m.cols() % heads == 0, "attention: heads must divide the feature dimension");
  return m.cols() / heads;
}

Mat causal_softmax_scores(const Mat& qh, const Mat& kh, Real scale) {
  Mat p = (qh * kh.transpose()) * scale;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const auto live = p.row(i).head(i + 1);
    const Real m = live.maxCoeff();
    Real sum = 0;
    for (Eigen::Index j = 0; j <= i; ++j) {
      p(i, j) = std::exp(p(i, j) - m);
      sum += p(i, j);
    }
    p.row(i).head(i + 1) /= sum;
    p.row(i).tail(p.cols() - i - 1).setZero();
  }
  return p;
}

Mat causal_mask(Mat a) {
  for (Eigen::Index i = 0; i < a.rows(); ++i) a.row(i).tail(a.cols() - i - 1).setZero();
  return a;
}

Mat silu_rows(const Mat& m) { return m.unaryExpr([](Real z) { return silu(z); }); }

}  // namespace

Mat full_attention_parallel(const Mat& q, const Mat& k, const Mat& v, int heads) {
  const Eigen::Index hd = head_dim_of(q, heads);
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(hd));
  Mat out(q.rows(), q.cols());
  for (int h = 0; h < heads; ++h) {
    const Mat p = causal_softmax_scores(q.middleCols(h * hd, hd), k.middleCols(h * hd, hd), scale);
    out.middleCols(h * hd, hd) = p * v.middleCols(h * hd, hd);
  }
  return out;
}

void full_attention_parallel_backward(const Mat& dout, const Mat& q, const Mat& k, const Mat& v, int heads,
                                      Mat& dq, Mat& dk, Mat& dv) {
  const Eigen::Index hd = head_dim_of(q, heads);
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(hd));
  dq.setZero(q.rows(), q.cols());
  dk.setZero(k.rows(), k.cols());
  dv.setZero(v.rows(), v.cols());
  for (int h = 0; h < heads; ++h) {
    const Mat qh = q.middleCols(h * hd, hd);
    const Mat kh = k.middleCols(h * hd, hd);
    const Mat p = causal_softmax_scores(qh, kh, scale);
    const Mat doh = dout.middleCols(h * hd, hd);
    dv.middleCols(h * hd, hd) = p.transpose() * doh;
    const Mat dp = doh * v.middleCols(h * hd, hd).transpose();
    Mat ds = p.cwiseProduct(dp);
    const Vec row_dot = ds.rowwise().sum();
    ds -= p.cwiseProduct(row_dot.replicate(1, p.cols()));
    dq.middleCols(h * hd, hd) = ds * kh * scale;
    dk.middleCols(h * hd, hd) = ds.transpose() * qh * scale;
  }
}

Mat linear_attention_parallel(const Mat& q, const Mat& k, const Mat& v, int heads, Real eps, Mat* pre_norm) {
  const Eigen::Index hd = head_dim_of(q, heads);
  Mat raw(q.rows(), q.cols());
  for (int h = 0; h < heads; ++h) {
    const Mat a = causal_mask(q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose());
    raw.middleCols(h * hd, hd) = a * v.middleCols(h * hd, hd);
  }
  Mat out = head_rms_norm(raw, heads, eps);
  if (pre_norm) *pre_norm = std::move(raw);
  return out;
}

void linear_attention_parallel_backward(const Mat& dout, const Mat& q, const Mat& k, const Mat& v, int heads,
                                        Real eps, Mat& dq, Mat& dk, Mat& dv) {
  const Eigen::Index hd = head_dim_of(q, heads);
  Mat raw;
  linear_attention_parallel(q, k, v, heads, eps, &raw);
  Mat inv;
  head_rms_norm(raw, heads, eps, &inv);
  const Mat draw = head_rms_norm_backward(dout, raw, heads, inv);
  dq.resize(q.rows(), q.cols());
  dk.resize(k.rows(), k.cols());
  dv.resize(v.rows(), v.cols());
  for (int h = 0; h < heads; ++h) {
    const Mat qh = q.middleCols(h * hd, hd);
    const Mat kh = k.middleCols(h * hd, hd);
    const Mat a = causal_mask(qh * kh.transpose());
    const Mat dr = draw.middleCols(h * hd, hd);
    const Mat da = causal_mask(dr * v.middleCols(h * hd, hd).transpose());
    dv.middleCols(h * hd, hd) = a.transpose() * dr;
    dq.middleCols(h * hd, hd) = da * kh;
    dk.middleCols(h * hd, hd) = da.transpose() * qh;
  }
}

KVRing::KVRing(int heads, int head_dim, std::size_t capacity)
    : heads_(heads), head_dim_(head_dim), capacity_(capacity) {
  require(heads >= 1 && head_dim >= 1, "kv ring: bad shape");
}

void KVRing::append(const Vec& k, const Vec& v) {
  if (size_ >= capacity_) {
    fail(ErrorCode::kContextOverflow,
         "kv ring: context overflow at entry " + std::to_string(size_) + " (capacity " + std::to_string(capacity_) + ")");
  }
  keys_.insert(keys_.end(), k.data(), k.data() + width());
  values_.insert(values_.end(), v.data(), v.data() + width());
  ++size_;
}

LinearState::LinearState(int heads, int head_dim) : head_dim_(head_dim), s_(heads, Mat::Zero(head_dim, head_dim)) {}

void LinearState::accumulate(const Vec& k, const Vec& v) {
  for (int h = 0; h < heads(); ++h) {
    s_[h].noalias() += k.segment(h * head_dim_, head_dim_) * v.segment(h * head_dim_, head_dim_).transpose();
  }
}

Vec full_attention_step(const Vec& q, const Vec& k, const Vec& v, KVRing& ring) {
  ring.append(k, v);
  const int hd = ring.head_dim();
  const std::size_t n = ring.size();
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(hd));
  Vec out = Vec::Zero(q.size());
  Vec scores(static_cast<Eigen::Index>(n));
  for (int h = 0; h < ring.heads(); ++h) {
    const auto qh = q.segment(h * hd, hd);
    for (std::size_t j = 0; j < n; ++j) {
      scores[static_cast<Eigen::Index>(j)] =
          qh.dot(Eigen::Map<const Vec>(ring.key(j) + h * hd, hd)) * scale;
    }
    const Vec p = softmax(scores);
    auto oh = out.segment(h * hd, hd);
    for (std::size_t j = 0; j < n; ++j) {
      oh += p[static_cast<Eigen::Index>(j)] * Eigen::Map<const Vec>(ring.value(j) + h * hd, hd);
    }
  }
  return out;
}

Vec linear_attention_step(const Vec& q, const Vec& k, const Vec& v, LinearState& state, Real eps) {
  state.accumulate(k, v);
  const int hd = state.head_dim();
  Vec out(q.size());
  for (int h = 0; h < state.heads(); ++h) {
    Vec oh = state.head(h).transpose() * q.segment(h * hd, hd);
    const Real inv = 1.0 / std::sqrt(oh.squaredNorm() / hd + eps);
    out.segment(h * hd, hd) = oh * inv;
  }
  return out;
}

Mat attention_forward(const Mat& x, const AttentionWeights& w, const AttentionSpec& spec, AttentionCache* cache) {
  require(spec.rope != nullptr, "attention: rotary table missing");
  Mat q_lin = x * w.wq.transpose();
  Mat k_lin = x * w.wk.transpose();
  Mat v_lin = x * w.wv.transpose();
  Mat q = spec.gated() ? silu_rows(q_lin) : q_lin;
  Mat k = spec.gated() ? silu_rows(k_lin) : k_lin;
  Mat v = spec.gated() ? silu_rows(v_lin) : v_lin;
  rope_rows(q, spec.heads, *spec.rope);
  rope_rows(k, spec.heads, *spec.rope);
  Mat attn = spec.kind == AttentionKind::kFull ? full_attention_parallel(q, k, v, spec.heads)
                                               : linear_attention_parallel(q, k, v, spec.heads, spec.eps);
  Mat gate_lin;
  Mat o = attn;
  if (spec.gated()) {
    gate_lin = x * w.wg.transpose();
    o = attn.cwiseProduct(gate_lin.unaryExpr([](Real z) { return sigmoid(z); }));
  }
  Mat y = o * w.wo.transpose();
  if (cache) {
    cache->x = x;
    cache->q_lin = std::move(q_lin);
    cache->k_lin = std::move(k_lin);
    cache->v_lin = std::move(v_lin);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(attn);
    cache->gate_lin = std::move(gate_lin);
  }
  return y;
}

Mat attention_backward(const Mat& dy, const AttentionCache& c, const AttentionWeights& w, const AttentionSpec& spec,
                       AttentionWeights& grad) {
  Mat o = c.attn;
  Mat sig;
  if (spec.gated()) {
    sig = c.gate_lin.unaryExpr([](Real z) { return sigmoid(z); });
    o = c.attn.cwiseProduct(sig);
  }
  grad.wo.noalias() += dy.transpose() * o;
  const Mat d_o = dy * w.wo;
  Mat dattn = d_o;
  Mat dx = Mat::Zero(c.x.rows(), c.x.cols());
  if (spec.gated()) {
    dattn = d_o.cwiseProduct(sig);
    const Mat dgate = d_o.cwiseProduct(c.attn).cwiseProduct(sig.unaryExpr([](Real s) { return s * (1 - s); }));
    grad.wg.noalias() += dgate.transpose() * c.x;
    dx.noalias() += dgate * w.wg;
  }
  Mat dq, dk, dv;
  if (spec.kind == AttentionKind::kFull) {
    full_attention_parallel_backward(dattn, c.q, c.k, c.v, spec.heads, dq, dk, dv);
  } else {
    linear_attention_parallel_backward(dattn, c.q, c.k, c.v, spec.heads, spec.eps, dq, dk, dv);
  }
  rope_rows(dq, spec.heads, *spec.rope, 0, true);
  rope_rows(dk, spec.heads, *spec.rope, 0, true);
  if (spec.gated()) {
    auto act = [](const Mat& d, const Mat& lin) {
      return Mat(d.cwiseProduct(lin.unaryExpr([](Real z) { return silu_grad(z); })));
    };
    dq = act(dq, c.q_lin);
    dk = act(dk, c.k_lin);
    dv = act(dv, c.v_lin);
  }
  grad.wq.noalias() += dq.transpose() * c.x;
  grad.wk.noalias() += dk.transpose() * c.x;
  grad.wv.noalias() += dv.transpose() * c.x;
  dx.noalias() += dq * w.wq + dk * w.wk + dv * w.wv;
  return dx;
}

AttentionState AttentionState::make(const AttentionSpec& spec, int dim, std::size_t capacity) {
  AttentionState s;
  const int hd = dim / spec.heads;
  if (spec.kind == AttentionKind::kFull) {
    s.ring.emplace(spec.heads, hd, capacity);
  } else {
    s.linear.emplace(spec.heads, hd);
  }
  return s;
}

std::size_t AttentionState::bytes(std::size_t bytes_per_element) const {
  return (ring ? ring->bytes(bytes_per_element) : 0) + (linear ? linear->bytes(bytes_per_element) : 0);
}

Vec attention_step(const Vec& x, const AttentionWeights& w, const AttentionSpec& spec, AttentionState& state) {
  const Vec q_lin = w.wq * x;
  const Vec k_lin = w.wk * x;
  const Vec v_lin = w.wv * x;
  auto act = [&](const Vec& lin) -> Vec {
    return spec.gated() ? Vec(lin.unaryExpr([](Real z) { return silu(z); })) : lin;
  };
  Vec q = act(q_lin);
  Vec k = act(k_lin);
  const Vec v = act(v_lin);
  const int hd = static_cast<int>(x.size()) / spec.heads;
  for (int h = 0; h < spec.heads; ++h) {
    spec.rope->rotate(q.data() + h * hd, state.position);
    spec.rope->rotate(k.data() + h * hd, state.position);
  }
  Vec attn = spec.kind == AttentionKind::kFull ? full_attention_step(q, k, v, *state.ring)
                                               : linear_attention_step(q, k, v, *state.linear, spec.eps);
  if (spec.gated()) {
    const Vec g = w.wg * x;
    attn = attn.cwiseProduct(Vec(g.unaryExpr([](Real z) { return sigmoid(z); })));
  }
  ++state.position;
  return w.wo * attn;
}

}  // namespace iflame
