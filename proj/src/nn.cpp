#include "iflame/nn.hpp"

#include <cmath>

namespace iflame {

Real sigmoid(Real z) { return 1.0 / (1.0 + std::exp(-z)); }
Real silu(Real z) { return z * sigmoid(z); }
Real silu_grad(Real z) {
  const Real s = sigmoid(z);
  return s * (1.0 + z * (1.0 - s));
}

Vec rms_norm(const Vec& x, const Vec& gain, Real eps) {
  require(x.size() >= 1 && gain.size() == x.size(), "rms_norm: dimension mismatch");
  const Real inv = 1.0 / std::sqrt(x.squaredNorm() / static_cast<Real>(x.size()) + eps);
  return gain.cwiseProduct(x) * inv;
}

Mat rms_norm_rows(const Mat& x, const Mat& gain, Real eps, Vec* inv_rms) {
  const auto d = static_cast<Real>(x.cols());
  Vec inv(x.rows());
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    inv[r] = 1.0 / std::sqrt(x.row(r).squaredNorm() / d + eps);
    y.row(r) = x.row(r).cwiseProduct(gain) * inv[r];
  }
  if (inv_rms) *inv_rms = std::move(inv);
  return y;
}

Mat rms_norm_rows_backward(const Mat& dy, const Mat& x, const Mat& gain, const Vec& inv_rms, Mat* dgain) {
  const auto d = static_cast<Real>(x.cols());
  Mat dx(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Real inv = inv_rms[r];
    const auto gdy = dy.row(r).cwiseProduct(gain);
    const Real dot = gdy.dot(x.row(r));
    dx.row(r) = gdy * inv - x.row(r) * (inv * inv * inv * dot / d);
    if (dgain) dgain->row(0) += dy.row(r).cwiseProduct(x.row(r)) * inv;
  }
  return dx;
}

Mat head_rms_norm(const Mat& x, int heads, Real eps, Mat* inv_rms) {
  const Eigen::Index hd = x.cols() / heads;
  Mat y(x.rows(), x.cols());
  Mat inv(x.rows(), heads);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (int h = 0; h < heads; ++h) {
      const auto seg = x.row(r).segment(h * hd, hd);
      inv(r, h) = 1.0 / std::sqrt(seg.squaredNorm() / static_cast<Real>(hd) + eps);
      y.row(r).segment(h * hd, hd) = seg * inv(r, h);
    }
  }
  if (inv_rms) *inv_rms = std::move(inv);
  return y;
}

Mat head_rms_norm_backward(const Mat& dy, const Mat& x, int heads, const Mat& inv_rms) {
  const Eigen::Index hd = x.cols() / heads;
  Mat dx(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (int h = 0; h < heads; ++h) {
      const Real inv = inv_rms(r, h);
      const auto xs = x.row(r).segment(h * hd, hd);
      const auto ds = dy.row(r).segment(h * hd, hd);
      dx.row(r).segment(h * hd, hd) = ds * inv - xs * (inv * inv * inv * ds.dot(xs) / static_cast<Real>(hd));
    }
  }
  return dx;
}

int default_ffn_hidden(int dim) {
  const long rounded = std::lround(8.0 * dim / 3.0 / 64.0) * 64;
  return static_cast<int>(std::max(64L, rounded));
}

Vec swiglu_ffn(const Vec& x, const FfnWeights& w) {
  const Vec g = w.gate * x;
  const Vec u = w.up * x;
  Vec a(g.size());
  for (Eigen::Index i = 0; i < g.size(); ++i) a[i] = silu(g[i]) * u[i];
  return w.down * a;
}

Mat swiglu_rows(const Mat& x, const FfnWeights& w, FfnCache* cache) {
  Mat g = x * w.gate.transpose();
  Mat u = x * w.up.transpose();
  Mat a = g.unaryExpr([](Real z) { return silu(z); }).cwiseProduct(u);
  Mat y = a * w.down.transpose();
  if (cache) {
    cache->x = x;
    cache->g = std::move(g);
    cache->u = std::move(u);
  }
  return y;
}

Mat swiglu_rows_backward(const Mat& dy, const FfnCache& c, const FfnWeights& w, FfnWeights& grad) {
  const Mat sg = c.g.unaryExpr([](Real z) { return silu(z); });
  const Mat a = sg.cwiseProduct(c.u);
  const Mat da = dy * w.down;
  grad.down.noalias() += dy.transpose() * a;
  const Mat dg = da.cwiseProduct(c.u).cwiseProduct(c.g.unaryExpr([](Real z) { return silu_grad(z); }));
  const Mat du = da.cwiseProduct(sg);
  grad.gate.noalias() += dg.transpose() * c.x;
  grad.up.noalias() += du.transpose() * c.x;
  return dg * w.gate + du * w.up;
}

RotaryTable::RotaryTable(int head_dim, int max_positions, Real base)
    : head_dim_(head_dim), max_positions_(max_positions), base_(base) {
  require(head_dim > 0 && head_dim % 2 == 0, "rope: head dimension must be even, got " + std::to_string(head_dim));
  require(max_positions >= 1, "rope: max_positions must be >= 1");
  const int pairs = head_dim / 2;
  cos_.resize(static_cast<std::size_t>(max_positions) * pairs);
  sin_.resize(cos_.size());
  for (int p = 0; p < max_positions; ++p) {
    for (int i = 0; i < pairs; ++i) {
      const Real theta = std::pow(base, -2.0 * i / head_dim);
      const Real angle = p * theta;
      cos_[static_cast<std::size_t>(p) * pairs + i] = std::cos(angle);
      sin_[static_cast<std::size_t>(p) * pairs + i] = std::sin(angle);
    }
  }
}

void RotaryTable::rotate(Real* x, int position, bool inverse) const {
  if (position < 0 || position >= max_positions_) {
    fail(ErrorCode::kContextOverflow, "rope: position " + std::to_string(position) + " outside table of " +
                                          std::to_string(max_positions_));
  }
  const int pairs = head_dim_ / 2;
  const Real* c = cos_.data() + static_cast<std::size_t>(position) * pairs;
  const Real* s = sin_.data() + static_cast<std::size_t>(position) * pairs;
  const Real sign = inverse ? -1.0 : 1.0;
  for (int i = 0; i < pairs; ++i) {
    const Real a = x[2 * i];
    const Real b = x[2 * i + 1];
    x[2 * i] = a * c[i] - sign * b * s[i];
    x[2 * i + 1] = sign * a * s[i] + b * c[i];
  }
}

Vec rope_apply(const Vec& x, int position, const RotaryTable& table) {
  require(x.size() % 2 == 0, "rope: odd head dimension");
  require(x.size() == table.head_dim(), "rope: head dimension does not match table");
  Vec out = x;
  table.rotate(out.data(), position, false);
  return out;
}

void rope_rows(Mat& x, int heads, const RotaryTable& table, int first_position, bool inverse) {
  const Eigen::Index hd = x.cols() / heads;
  require(hd == table.head_dim(), "rope: head dimension does not match table");
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (int h = 0; h < heads; ++h) {
      table.rotate(x.row(r).data() + h * hd, first_position + static_cast<int>(r), inverse);
    }
  }
}

Vec softmax(const Vec& logits) {
  const Real m = logits.maxCoeff();
  Vec p = (logits.array() - m).exp().matrix();
  return p / p.sum();
}

Real cross_entropy(const Mat& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> valid,
                   Mat* dlogits) {
  require(targets.size() == static_cast<std::size_t>(logits.rows()) && valid.size() == targets.size(),
          "cross_entropy: length mismatch");
  std::size_t count = 0;
  for (auto v : valid) count += v ? 1 : 0;
  if (count == 0) fail(ErrorCode::kInvalidArgument, "cross_entropy: all positions masked");
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  Real total = 0;
  const Real scale = 1.0 / static_cast<Real>(count);
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    if (!valid[r]) continue;
    const TokenId t = targets[r];
    require(t >= 0 && t < logits.cols(), "cross_entropy: target outside vocabulary");
    const auto row = logits.row(r);
    const Real m = row.maxCoeff();
    const Real lse = m + std::log((row.array() - m).exp().sum());
    total += lse - row[t];
    if (dlogits) {
      dlogits->row(r) = (row.array() - lse).exp().matrix() * scale;
      (*dlogits)(r, t) -= scale;
    }
  }
  return total * scale;
}

}  // namespace iflame
