#include "iflame/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <cstdio>
#include <ostream>
#include <random>
#include <thread>

namespace iflame {

void TrainConfig::validate() const {
  require(batch_size >= 1, "train: batch_size must be >= 1");
  require(epochs >= 1, "train: epochs must be >= 1");
  require(warmup_epochs >= 0 && warmup_epochs <= epochs, "train: warmup_epochs must be in [0, epochs]");
  require(peak_lr > 0 && min_lr >= 0 && min_lr <= peak_lr, "train: need 0 <= min_lr <= peak_lr, peak_lr > 0");
  require(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "train: betas must be in [0, 1)");
  require(adam_eps > 0, "train: adam_eps must be > 0");
  require(max_faces >= 1, "train: max_faces must be >= 1");
}

double lr_at(std::size_t step, const LrSchedule& s) {
  if (s.warmup_steps > 0 && step <= s.warmup_steps) {
    return s.peak * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  if (step >= s.total_steps) return s.floor;
  const double span = static_cast<double>(s.total_steps - s.warmup_steps);
  const double progress = static_cast<double>(step - s.warmup_steps) / span;
  return s.floor + (s.peak - s.floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamOptimizer::AdamOptimizer(const ModelWeights& w, double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay), m_(zeros_like(w)), v_(zeros_like(w)) {}

namespace {

std::vector<Mat*> parameter_list(ModelWeights& w) {
  std::vector<Mat*> out;
  w.visit([&](const std::string&, Mat& m) { out.push_back(&m); });
  return out;
}

std::vector<const Mat*> parameter_list(const ModelWeights& w) {
  std::vector<const Mat*> out;
  w.visit([&](const std::string&, const Mat& m) { out.push_back(&m); });
  return out;
}

}  // namespace

void AdamOptimizer::step(ModelWeights& w, const ModelWeights& grad, double lr) {
  ++t_;
  const auto params = parameter_list(w);
  const auto grads = parameter_list(grad);
  const auto ms = parameter_list(m_);
  const auto vs = parameter_list(v_);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Mat& p = *params[i];
    const Mat& g = *grads[i];
    Mat& m = *ms[i];
    Mat& v = *vs[i];
    m = beta1_ * m + (1.0 - beta1_) * g;
    v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
    if (weight_decay_ > 0) p *= (1.0 - lr * weight_decay_);
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
  }
}

double loss_and_grad(std::span<const std::vector<TokenId>> batch, const ModelWeights& w, ModelWeights* grad,
                     std::size_t* scored) {
  require(!batch.empty(), "train: empty batch");
  const QuantizerConfig q{w.config.bins};
  std::size_t longest = 0;
  for (const auto& s : batch) {
    require(s.size() >= 2, "train: sequences need at least two tokens");
    longest = std::max(longest, s.size());
  }
  struct Item {
    std::vector<TokenId> inputs, targets;
    std::vector<std::uint8_t> valid;
    std::size_t count = 0;
  };
  std::vector<Item> items;
  std::size_t total = 0;
  for (const auto& s : batch) {
    std::vector<TokenId> padded = s;
    padded.resize(longest, q.pad_token());
    Item it;
    it.inputs.assign(padded.begin(), padded.end() - 1);
    it.targets.assign(padded.begin() + 1, padded.end());
    for (TokenId t : it.targets) {
      it.valid.push_back(t != q.pad_token() ? 1 : 0);
      it.count += it.valid.back();
    }
    total += it.count;
    items.push_back(std::move(it));
  }
  require(total > 0, "train: batch has no scored positions");
  double loss = 0;
  for (const Item& it : items) {
    if (it.count == 0) continue;
    const double weight = static_cast<double>(it.count) / static_cast<double>(total);
    ModelCache cache;
    const Mat logits = model_forward(it.inputs, w, nullptr, grad ? &cache : nullptr);
    Mat dlogits;
    loss += weight * cross_entropy(logits, it.targets, it.valid, grad ? &dlogits : nullptr);
    if (grad) {
      dlogits *= weight;
      model_backward(dlogits, cache, w, *grad);
    }
  }
  if (scored) *scored = total;
  return loss;
}

StepResult train_step(std::span<const std::vector<TokenId>> batch, ModelWeights& w, AdamOptimizer& opt, double lr,
                      double grad_clip) {
  ModelWeights grad = zeros_like(w);
  StepResult r;
  r.loss = loss_and_grad(batch, w, &grad, &r.tokens);
  if (!std::isfinite(r.loss)) {
    fail(ErrorCode::kNumeric, "train: non-finite loss at optimizer step " + std::to_string(opt.steps() + 1) +
                                  " (lr " + std::to_string(lr) + ", batch " + std::to_string(batch.size()) + ")");
  }
  double sq = 0;
  grad.visit([&](const std::string&, const Mat& g) { sq += g.squaredNorm(); });
  r.grad_norm = std::sqrt(sq);
  if (!std::isfinite(r.grad_norm)) fail(ErrorCode::kNumeric, "train: non-finite gradient norm");
  if (grad_clip > 0 && r.grad_norm > grad_clip) {
    const double scale = grad_clip / r.grad_norm;
    grad.visit([&](const std::string&, Mat& g) { g *= scale; });
  }
  opt.step(w, grad, lr);
  return r;
}

namespace {

TokenId argmax_lowest(const Mat& logits, Eigen::Index row) {
  Eigen::Index best = 0;
  for (Eigen::Index c = 1; c < logits.cols(); ++c) {
    if (logits(row, c) > logits(row, best)) best = c;
  }
  return static_cast<TokenId>(best);
}

struct FaceCount {
  std::size_t correct = 0;
  std::size_t total = 0;
};

FaceCount count_faces(const Mat& logits, std::span<const TokenId> targets, int bins) {
  const QuantizerConfig q{bins};
  FaceCount fc;
  for (std::size_t start = 0; start + kTokensPerFace <= targets.size(); start += kTokensPerFace) {
    bool whole = true;
    bool hit = true;
    for (std::size_t r = start; r < start + kTokensPerFace; ++r) {
      if (!q.is_coordinate(targets[r])) {
        whole = false;
        break;
      }
      hit = hit && argmax_lowest(logits, static_cast<Eigen::Index>(r)) == targets[r];
    }
    if (!whole) break;
    ++fc.total;
    fc.correct += hit ? 1 : 0;
  }
  return fc;
}

}  // namespace

double token_accuracy(const Mat& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> valid) {
  require(targets.size() == static_cast<std::size_t>(logits.rows()) && valid.size() == targets.size(),
          "token_accuracy: length mismatch");
  std::size_t total = 0, correct = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (!valid[r]) continue;
    ++total;
    correct += argmax_lowest(logits, static_cast<Eigen::Index>(r)) == targets[r] ? 1 : 0;
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

double face_accuracy(const Mat& logits, std::span<const TokenId> targets, int bins) {
  require(targets.size() == static_cast<std::size_t>(logits.rows()), "face_accuracy: length mismatch");
  const FaceCount fc = count_faces(logits, targets, bins);
  return fc.total == 0 ? 0.0 : static_cast<double>(fc.correct) / static_cast<double>(fc.total);
}

EvalReport evaluate(std::span<const std::vector<TokenId>> sequences, const ModelWeights& w, const std::string& split) {
  const QuantizerConfig q{w.config.bins};
  std::vector<Mat> blocks;
  std::vector<TokenId> targets;
  std::vector<std::uint8_t> valid;
  FaceCount faces;
  Eigen::Index rows = 0;
  for (const auto& s : sequences) {
    require(s.size() >= 2, "evaluate: sequences need at least two tokens");
    const std::vector<TokenId> inputs(s.begin(), s.end() - 1);
    const std::span<const TokenId> tgt(s.data() + 1, s.size() - 1);
    blocks.push_back(model_forward(inputs, w));
    const FaceCount fc = count_faces(blocks.back(), tgt, q.bins);
    faces.correct += fc.correct;
    faces.total += fc.total;
    for (TokenId t : tgt) {
      targets.push_back(t);
      valid.push_back(t != q.pad_token() ? 1 : 0);
    }
    rows += blocks.back().rows();
  }
  require(rows > 0, "evaluate: no sequences");
  Mat logits(rows, q.vocab_size());
  Eigen::Index at = 0;
  for (const Mat& b : blocks) {
    logits.middleRows(at, b.rows()) = b;
    at += b.rows();
  }
  EvalReport r;
  r.split = split;
  r.mean_loss = cross_entropy(logits, targets, valid);
  r.perplexity = std::exp(r.mean_loss);
  r.token_accuracy = token_accuracy(logits, targets, valid);
  r.face_accuracy = faces.total == 0 ? 0.0 : static_cast<double>(faces.correct) / static_cast<double>(faces.total);
  return r;
}

void write_eval_csv_header(std::ostream& out) { out << "split,token_acc,face_acc,ppl\n"; }

void write_eval_csv_row(std::ostream& out, const EvalReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f\n", r.split.c_str(), r.token_accuracy, r.face_accuracy,
                r.perplexity);
  out << buf;
}

unsigned worker_threads_from_env() {
  const char* env = std::getenv("IFLAME_THREADS");
  if (env == nullptr) return 1;
  const long n = std::strtol(env, nullptr, 10);
  return n >= 1 ? static_cast<unsigned>(n) : 1u;
}

std::vector<Mesh> load_dataset(const std::string& manifest_path, std::size_t max_faces, const QuantizerConfig& q,
                               unsigned threads) {
  std::ifstream in(manifest_path);
  if (!in) fail(ErrorCode::kIo, "cannot open manifest " + manifest_path);
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  std::vector<std::string> paths;
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    std::filesystem::path p(line.substr(b, e - b + 1));
    if (p.is_relative()) p = base / p;
    paths.push_back(p.string());
  }

  std::vector<std::optional<Mesh>> slots(paths.size());
  std::vector<std::exception_ptr> errors(std::max(1u, threads));
  auto work = [&](unsigned worker, unsigned stride) {
    try {
      for (std::size_t i = worker; i < paths.size(); i += stride) {
        Mesh m = normalize(load_obj(paths[i]));
        if (canonicalize(m, q).faces.size() <= max_faces) slots[i] = std::move(m);
      }
    } catch (...) {
      errors[worker] = std::current_exception();
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(1, paths.size()))));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(work, t, n);
  work(0, n);
  for (auto& th : pool) th.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<Mesh> meshes;
  for (auto& s : slots) {
    if (s) meshes.push_back(std::move(*s));
  }
  return meshes;
}

std::vector<TokenId> mesh_to_sequence(const Mesh& normalized, const QuantizerConfig& q, bool do_augment,
                                      std::uint64_t seed) {
  const Mesh m = do_augment ? augment(normalized, seed) : normalized;
  return tokenize(canonicalize(m, q), q);
}

TrainSummary train(ModelWeights& w, std::span<const Mesh> meshes, const TrainConfig& cfg, std::ostream* log_csv) {
  cfg.validate();
  require(!meshes.empty(), "train: empty dataset");
  const QuantizerConfig q{w.config.bins};
  const std::size_t per_epoch = (meshes.size() + cfg.batch_size - 1) / cfg.batch_size;
  LrSchedule schedule;
  schedule.peak = cfg.peak_lr;
  schedule.floor = cfg.min_lr;
  schedule.total_steps = per_epoch * static_cast<std::size_t>(cfg.epochs);
  schedule.warmup_steps = per_epoch * static_cast<std::size_t>(cfg.warmup_epochs);

  AdamOptimizer opt(w, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  std::mt19937_64 rng(cfg.seed);
  TrainSummary summary;
  if (log_csv) *log_csv << "step,lr,loss,tokens_per_s\n";
  std::size_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::vector<TokenId>> seqs(meshes.size());
    for (std::size_t i = 0; i < meshes.size(); ++i) {
      const std::uint64_t seed = cfg.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(epoch) * 1000003ull + i;
      seqs[i] = mesh_to_sequence(meshes[i], q, cfg.augment, seed);
    }
    std::vector<std::size_t> order(meshes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      std::vector<std::vector<TokenId>> batch;
      for (std::size_t i = b * cfg.batch_size; i < std::min(order.size(), (b + 1) * cfg.batch_size); ++i) {
        batch.push_back(seqs[order[i]]);
      }
      const double lr = lr_at(step + 1, schedule);
      const auto t0 = std::chrono::steady_clock::now();
      const StepResult r = train_step(batch, w, opt, lr, cfg.grad_clip);
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
      TrainLogRow row{step, lr, r.loss, dt.count() > 0 ? static_cast<double>(r.tokens) / dt.count() : 0.0};
      summary.log.push_back(row);
      if (log_csv) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%zu,%.8g,%.8g,%.1f\n", row.step, row.lr, row.loss, row.tokens_per_s);
        *log_csv << buf;
      }
      ++step;
    }
  }
  std::vector<std::vector<TokenId>> plain;
  for (const Mesh& m : meshes) plain.push_back(mesh_to_sequence(m, q, false, 0));
  summary.eval = evaluate(plain, w, "train");
  return summary;
}

}  // namespace iflame
