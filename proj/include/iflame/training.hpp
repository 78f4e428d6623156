#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "iflame/hourglass.hpp"
#include "iflame/mesh_codec.hpp"

namespace iflame {

struct TrainConfig {
  int batch_size = 8;
  int epochs = 10;
  double peak_lr = 1e-3;
  double min_lr = 0.0;  // cosine floor
  int warmup_epochs = 2;
  std::uint64_t seed = 0;
  bool augment = true;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global L2 norm; <= 0 disables
  std::size_t max_faces = 800;

  void validate() const;
};

/// Linear warmup from 0 to peak, then cosine decay to the floor at total_steps.
struct LrSchedule {
  double peak = 1e-3;
  double floor = 0.0;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
};

double lr_at(std::size_t step, const LrSchedule& schedule);

/// AdamW over every parameter array of a ModelWeights.
class AdamOptimizer {
 public:
  AdamOptimizer(const ModelWeights& w, double beta1, double beta2, double eps, double weight_decay);

  void step(ModelWeights& w, const ModelWeights& grad, double lr);
  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  ModelWeights m_;
  ModelWeights v_;
};

struct StepResult {
  double loss = 0;
  std::size_t tokens = 0;  // scored target positions
  double grad_norm = 0;
};

/// Pads the batch with [P], scores positions 0..T-2 against tokens 1..T-1
/// with [P] targets masked, backpropagates and applies one optimizer update.
StepResult train_step(std::span<const std::vector<TokenId>> batch, ModelWeights& w, AdamOptimizer& opt, double lr,
                      double grad_clip = 0.0);

/// Mean masked next-token loss and its gradient, accumulated into grad.
double loss_and_grad(std::span<const std::vector<TokenId>> batch, const ModelWeights& w, ModelWeights* grad,
                     std::size_t* scored = nullptr);

// ---------------------------------------------------------------------------
// Teacher-forced metrics

/// Fraction of valid rows whose argmax (lowest id on ties) equals the target.
double token_accuracy(const Mat& logits, std::span<const TokenId> targets, std::span<const std::uint8_t> valid);

/// Fraction of faces whose nine coordinate targets are all predicted. Faces
/// are the consecutive 9-row groups of coordinate targets starting at row 0
/// (the row predicting the first token after [S]).
double face_accuracy(const Mat& logits, std::span<const TokenId> targets, int bins);

struct EvalReport {
  std::string split;
  double token_accuracy = 0;
  double face_accuracy = 0;
  double perplexity = 0;
  double mean_loss = 0;
};

EvalReport evaluate(std::span<const std::vector<TokenId>> sequences, const ModelWeights& w,
                    const std::string& split = "eval");

void write_eval_csv_header(std::ostream& out);
void write_eval_csv_row(std::ostream& out, const EvalReport& r);

// ---------------------------------------------------------------------------
// Dataset + training loop

/// Loads every OBJ listed in a manifest (one path per line, relative paths
/// resolved against the manifest directory), normalizes, and keeps meshes
/// with at most max_faces canonical faces. Loading runs on `threads` workers.
std::vector<Mesh> load_dataset(const std::string& manifest_path, std::size_t max_faces, const QuantizerConfig& q,
                               unsigned threads = 1);

/// Worker count from IFLAME_THREADS (default 1, minimum 1).
unsigned worker_threads_from_env();

std::vector<TokenId> mesh_to_sequence(const Mesh& normalized, const QuantizerConfig& q, bool augment,
                                      std::uint64_t seed);

struct TrainLogRow {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  double tokens_per_s = 0;
};

struct TrainSummary {
  std::vector<TrainLogRow> log;
  EvalReport eval;
};

/// Trains w in place over meshes for cfg.epochs. When log_csv is given, one
/// CSV row (step, lr, loss, tokens_per_s) is written per step.
TrainSummary train(ModelWeights& w, std::span<const Mesh> meshes, const TrainConfig& cfg,
                   std::ostream* log_csv = nullptr);

}  // namespace iflame
