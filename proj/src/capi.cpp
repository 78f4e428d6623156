#include "iflame/iflame.h"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <new>
#include <sstream>
#include <string>

#include "iflame/bench.hpp"
#include "iflame/checkpoint.hpp"
#include "iflame/config_file.hpp"
#include "iflame/inference.hpp"
#include "iflame/mesh_codec.hpp"
#include "iflame/training.hpp"
#include "iflame/variants.hpp"

struct iflame_mesh {
  iflame::Mesh mesh;
};

struct iflame_tokens {
  iflame::QuantizerConfig quantizer;
  std::vector<iflame::TokenId> tokens;
};

struct iflame_model {
  iflame::ModelWeights weights;
};

namespace {

thread_local std::string g_last_error;

template <typename Fn>
iflame_status guarded(Fn&& fn) {
  try {
    g_last_error.clear();
    fn();
    return IFLAME_OK;
  } catch (const iflame::Error& e) {
    g_last_error = e.what();
    return static_cast<iflame_status>(static_cast<int>(e.code()));
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return IFLAME_ERR_OUT_OF_MEMORY;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return IFLAME_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return IFLAME_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (p == nullptr) iflame::fail(iflame::ErrorCode::kInvalidArgument, std::string(what) + " is null");
}

void copy_name(char (&dst)[16], const std::string& src) {
  std::snprintf(dst, sizeof(dst), "%s", src.c_str());
}

size_t emit(const std::string& s, char* buf, size_t cap) {
  if (buf != nullptr && cap > 0) {
    const size_t n = std::min(cap - 1, s.size());
    std::memcpy(buf, s.data(), n);
    buf[n] = '\0';
  }
  return s.size();
}

iflame::ModelConfig base_config(const char* config_path) {
  return config_path != nullptr ? iflame::load_config(config_path).model : iflame::ModelConfig{};
}

}  // namespace

extern "C" {

const char* iflame_last_error(void) { return g_last_error.c_str(); }
const char* iflame_version(void) { return "0.1.0"; }

iflame_status iflame_mesh_load_obj(const char* path, iflame_mesh** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    auto m = std::make_unique<iflame_mesh>();
    m->mesh = iflame::load_obj(path);
    *out = m.release();
  });
}

iflame_status iflame_mesh_save_obj(const iflame_mesh* mesh, const char* path) {
  return guarded([&] {
    need(mesh, "mesh");
    need(path, "path");
    iflame::save_obj(path, mesh->mesh);
  });
}

iflame_status iflame_mesh_counts(const iflame_mesh* mesh, size_t* vertices, size_t* faces) {
  return guarded([&] {
    need(mesh, "mesh");
    if (vertices) *vertices = mesh->mesh.vertices.size();
    if (faces) *faces = mesh->mesh.faces.size();
  });
}

void iflame_mesh_free(iflame_mesh* mesh) { delete mesh; }

iflame_status iflame_tokenize(const iflame_mesh* mesh, int bins, iflame_tokens** out) {
  return guarded([&] {
    need(mesh, "mesh");
    need(out, "out");
    auto t = std::make_unique<iflame_tokens>();
    t->quantizer.bins = bins;
    t->quantizer.validate();
    t->tokens = iflame::tokenize(iflame::canonicalize(iflame::normalize(mesh->mesh), t->quantizer), t->quantizer);
    *out = t.release();
  });
}

iflame_status iflame_detokenize(const iflame_tokens* tokens, iflame_mesh** out, size_t* dropped_faces) {
  return guarded([&] {
    need(tokens, "tokens");
    need(out, "out");
    auto m = std::make_unique<iflame_mesh>();
    iflame::DetokenizeReport report;
    m->mesh = iflame::detokenize(tokens->tokens, tokens->quantizer, &report);
    if (dropped_faces) *dropped_faces = report.degenerate_faces;
    *out = m.release();
  });
}

iflame_status iflame_tokens_create(int bins, const int32_t* data, size_t count, iflame_tokens** out) {
  return guarded([&] {
    need(out, "out");
    if (count > 0) need(data, "data");
    auto t = std::make_unique<iflame_tokens>();
    t->quantizer.bins = bins;
    t->quantizer.validate();
    for (size_t i = 0; i < count; ++i) {
      iflame::require(data[i] >= 0 && data[i] < t->quantizer.vocab_size(), "token id out of range");
    }
    t->tokens.assign(data, data + count);
    *out = t.release();
  });
}

iflame_status iflame_tokens_load(const char* path, iflame_tokens** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    iflame::TokenFile f = iflame::load_token_file(path);
    auto t = std::make_unique<iflame_tokens>();
    t->quantizer = f.quantizer;
    t->tokens = std::move(f.tokens);
    *out = t.release();
  });
}

iflame_status iflame_tokens_save(const iflame_tokens* tokens, const char* path) {
  return guarded([&] {
    need(tokens, "tokens");
    need(path, "path");
    iflame::save_token_file(path, tokens->tokens, tokens->quantizer);
  });
}

size_t iflame_tokens_size(const iflame_tokens* tokens) { return tokens ? tokens->tokens.size() : 0; }
const int32_t* iflame_tokens_data(const iflame_tokens* tokens) { return tokens ? tokens->tokens.data() : nullptr; }
int iflame_tokens_bins(const iflame_tokens* tokens) { return tokens ? tokens->quantizer.bins : 0; }

size_t iflame_tokens_faces(const iflame_tokens* tokens) {
  if (tokens == nullptr) return 0;
  size_t coords = 0;
  for (iflame::TokenId t : tokens->tokens) coords += tokens->quantizer.is_coordinate(t) ? 1 : 0;
  return coords / iflame::kTokensPerFace;
}

void iflame_tokens_free(iflame_tokens* tokens) { delete tokens; }

iflame_status iflame_model_init(const char* config_path, const char* variant, uint64_t seed, iflame_model** out) {
  return guarded([&] {
    need(out, "out");
    iflame::ModelConfig cfg = base_config(config_path);
    if (variant != nullptr) cfg = iflame::variant_config(iflame::parse_variant(variant), cfg);
    auto m = std::make_unique<iflame_model>();
    m->weights = iflame::init_weights(cfg, seed);
    *out = m.release();
  });
}

iflame_status iflame_model_load(const char* checkpoint_path, iflame_model** out) {
  return guarded([&] {
    need(checkpoint_path, "checkpoint_path");
    need(out, "out");
    auto m = std::make_unique<iflame_model>();
    m->weights = iflame::load_checkpoint(checkpoint_path);
    *out = m.release();
  });
}

iflame_status iflame_model_save(const iflame_model* model, const char* checkpoint_path) {
  return guarded([&] {
    need(model, "model");
    need(checkpoint_path, "checkpoint_path");
    iflame::save_checkpoint(checkpoint_path, model->weights);
  });
}

size_t iflame_model_parameter_count(const iflame_model* model) {
  return model ? iflame::parameter_count(model->weights) : 0;
}

int iflame_model_bins(const iflame_model* model) { return model ? model->weights.config.bins : 0; }

void iflame_model_free(iflame_model* model) { delete model; }

iflame_status iflame_train(const char* config_path, const char* manifest_path, const char* log_csv_path,
                           const char* eval_csv_path, iflame_model** out, iflame_eval* eval) {
  return guarded([&] {
    need(config_path, "config_path");
    need(manifest_path, "manifest_path");
    need(out, "out");
    const iflame::RunConfig rc = iflame::load_config(config_path);
    const iflame::QuantizerConfig q{rc.model.bins};
    const std::vector<iflame::Mesh> meshes =
        iflame::load_dataset(manifest_path, rc.train.max_faces, q, iflame::worker_threads_from_env());
    if (meshes.empty()) {
      iflame::fail(iflame::ErrorCode::kInvalidArgument,
                   std::string("no meshes with at most ") + std::to_string(rc.train.max_faces) + " faces in " +
                       manifest_path);
    }
    auto m = std::make_unique<iflame_model>();
    m->weights = iflame::init_weights(rc.model, rc.init_seed);
    std::ofstream log;
    if (log_csv_path != nullptr) {
      log.open(log_csv_path);
      if (!log) iflame::fail(iflame::ErrorCode::kIo, std::string("cannot open ") + log_csv_path);
    }
    const iflame::TrainSummary summary =
        iflame::train(m->weights, meshes, rc.train, log_csv_path != nullptr ? &log : nullptr);
    if (eval_csv_path != nullptr) {
      std::ofstream ev(eval_csv_path);
      if (!ev) iflame::fail(iflame::ErrorCode::kIo, std::string("cannot open ") + eval_csv_path);
      iflame::write_eval_csv_header(ev);
      iflame::write_eval_csv_row(ev, summary.eval);
    }
    if (eval != nullptr) {
      eval->token_accuracy = summary.eval.token_accuracy;
      eval->face_accuracy = summary.eval.face_accuracy;
      eval->perplexity = summary.eval.perplexity;
      eval->mean_loss = summary.eval.mean_loss;
    }
    *out = m.release();
  });
}

iflame_sampler iflame_sampler_defaults(void) {
  const iflame::SamplerConfig d;
  return iflame_sampler{d.top_p, d.top_k, d.temperature, d.seed, d.strict_grammar ? 1 : 0};
}

namespace {

iflame::SamplerConfig to_sampler(const iflame_sampler* s) {
  iflame::SamplerConfig c;
  if (s != nullptr) {
    c.top_p = s->top_p;
    c.top_k = s->top_k;
    c.temperature = s->temperature;
    c.seed = s->seed;
    c.strict_grammar = s->strict_grammar != 0;
  }
  c.validate();
  return c;
}

}  // namespace

iflame_status iflame_generate(const iflame_model* model, const iflame_sampler* sampler, size_t max_faces,
                              iflame_tokens** out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    auto t = std::make_unique<iflame_tokens>();
    t->quantizer.bins = model->weights.config.bins;
    t->tokens = iflame::generate(model->weights, to_sampler(sampler), max_faces);
    *out = t.release();
  });
}

iflame_status iflame_complete(const iflame_model* model, const iflame_tokens* prefix, size_t prefix_faces,
                              const iflame_sampler* sampler, size_t max_faces, iflame_tokens** out) {
  return guarded([&] {
    need(model, "model");
    need(prefix, "prefix");
    need(out, "out");
    iflame::require(prefix->quantizer.bins == model->weights.config.bins,
                    "prefix bins do not match the model's quantizer");
    const size_t take = 1 + iflame::kTokensPerFace * prefix_faces;
    iflame::require(prefix->tokens.size() >= take, "prefix has fewer than the requested faces");
    const std::span<const iflame::TokenId> head(prefix->tokens.data(), take);
    auto t = std::make_unique<iflame_tokens>();
    t->quantizer = prefix->quantizer;
    t->tokens = iflame::complete(head, model->weights, to_sampler(sampler), max_faces);
    *out = t.release();
  });
}

iflame_bench_options iflame_bench_defaults(void) {
  const iflame::BenchOptions d;
  return iflame_bench_options{nullptr, 128, 4, d.n, d.batch, d.runs, d.warmup_runs, d.seed};
}

iflame_status iflame_bench(const char* variant, const iflame_bench_options* options, iflame_bench_report* out) {
  return guarded([&] {
    need(variant, "variant");
    need(out, "out");
    const iflame_bench_options o = options != nullptr ? *options : iflame_bench_defaults();
    iflame::ModelConfig base = base_config(o.config_path);
    if (o.dim > 0) base.dim = o.dim;
    if (o.heads > 0) base.heads = o.heads;
    base.max_context = std::max<int>(base.max_context, static_cast<int>(o.seq_len));
    const iflame::ModelConfig cfg = iflame::variant_config(iflame::parse_variant(variant), base);
    const iflame::ModelWeights w = iflame::init_weights(cfg, o.seed);
    iflame::BenchOptions bo;
    bo.n = o.seq_len;
    bo.batch = o.batch;
    bo.runs = o.runs;
    bo.warmup_runs = o.warmup_runs;
    bo.seed = o.seed;
    const iflame::BenchReport r = iflame::run_decode_bench(w, variant, bo);
    copy_name(out->variant, r.variant);
    out->seq_len = r.n;
    out->batch = r.batch;
    out->ms_per_token = r.ms_per_token;
    out->tokens_per_s = r.tokens_per_s;
    out->cache_bytes = r.cache_bytes;
    out->predicted_cache_bytes = r.predicted_cache_bytes;
    out->peak_resident_bytes = r.peak_resident_bytes;
    out->wall_s = r.wall_s;
    copy_name(out->status, r.status);
  });
}

size_t iflame_bench_format_csv(const iflame_bench_report* report, int header, char* buf, size_t cap) {
  if (report == nullptr) return 0;
  iflame::BenchReport r;
  r.variant = report->variant;
  r.n = report->seq_len;
  r.batch = report->batch;
  r.ms_per_token = report->ms_per_token;
  r.tokens_per_s = report->tokens_per_s;
  r.cache_bytes = report->cache_bytes;
  r.peak_resident_bytes = report->peak_resident_bytes;
  r.wall_s = report->wall_s;
  r.status = report->status;
  std::ostringstream os;
  if (header) iflame::write_bench_csv_header(os);
  iflame::write_bench_csv_row(os, r);
  return emit(os.str(), buf, cap);
}

iflame_status iflame_inspect_cache(const char* variant, const char* config_path, size_t seq_len,
                                   size_t bytes_per_element, iflame_cache_report* out) {
  return guarded([&] {
    need(out, "out");
    iflame::require(bytes_per_element >= 1, "bytes_per_element must be >= 1");
    iflame::ModelConfig cfg = base_config(config_path);
    std::string name = variant != nullptr ? variant : "config";
    if (variant != nullptr) cfg = iflame::variant_config(iflame::parse_variant(variant), cfg);
    const iflame::CacheReport r = iflame::cache_bytes(cfg, seq_len, bytes_per_element, name);
    copy_name(out->variant, r.variant);
    out->seq_len = r.n;
    out->bytes_per_element = r.bytes_per_element;
    out->kv_positions = r.kv_positions;
    out->baseline_positions = r.baseline_positions;
    out->kv_bytes = r.kv_bytes;
    out->state_bytes = r.state_bytes;
    out->buffer_bytes = r.buffer_bytes;
    out->baseline_bytes = r.baseline_bytes;
    out->reduction_pct = r.reduction_pct;
  });
}

size_t iflame_cache_format(const iflame_cache_report* report, int csv, char* buf, size_t cap) {
  if (report == nullptr) return 0;
  iflame::CacheReport r;
  r.variant = report->variant;
  r.n = report->seq_len;
  r.bytes_per_element = report->bytes_per_element;
  r.kv_positions = report->kv_positions;
  r.baseline_positions = report->baseline_positions;
  r.kv_bytes = report->kv_bytes;
  r.state_bytes = report->state_bytes;
  r.buffer_bytes = report->buffer_bytes;
  r.baseline_bytes = report->baseline_bytes;
  r.reduction_pct = report->reduction_pct;
  std::ostringstream os;
  if (csv) {
    iflame::write_cache_report_csv_header(os);
    iflame::write_cache_report_csv_row(os, r);
  } else {
    iflame::write_cache_report_kv(os, r);
  }
  return emit(os.str(), buf, cap);
}

}  // extern "C"
