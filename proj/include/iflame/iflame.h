#ifndef IFLAME_IFLAME_H
#define IFLAME_IFLAME_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define IFLAME_API __declspec(dllexport)
#else
#define IFLAME_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum iflame_status {
  IFLAME_OK = 0,
  IFLAME_ERR_INVALID_ARGUMENT = 1,
  IFLAME_ERR_IO = 2,
  IFLAME_ERR_PARSE = 3,
  IFLAME_ERR_CONTEXT_OVERFLOW = 4,
  IFLAME_ERR_NUMERIC = 5,
  IFLAME_ERR_OUT_OF_MEMORY = 6,
  IFLAME_ERR_INTERNAL = 7
} iflame_status;

typedef struct iflame_mesh iflame_mesh;
typedef struct iflame_tokens iflame_tokens;
typedef struct iflame_model iflame_model;

/* Message of the last failed call on this thread ("" if none). */
IFLAME_API const char* iflame_last_error(void);
IFLAME_API const char* iflame_version(void);

/* Meshes */
IFLAME_API iflame_status iflame_mesh_load_obj(const char* path, iflame_mesh** out);
IFLAME_API iflame_status iflame_mesh_save_obj(const iflame_mesh* mesh, const char* path);
IFLAME_API iflame_status iflame_mesh_counts(const iflame_mesh* mesh, size_t* vertices, size_t* faces);
IFLAME_API void iflame_mesh_free(iflame_mesh* mesh);

/* Token sequences. tokenize normalizes, canonicalizes and quantizes with
   `bins` levels per axis. */
IFLAME_API iflame_status iflame_tokenize(const iflame_mesh* mesh, int bins, iflame_tokens** out);
IFLAME_API iflame_status iflame_detokenize(const iflame_tokens* tokens, iflame_mesh** out, size_t* dropped_faces);
IFLAME_API iflame_status iflame_tokens_create(int bins, const int32_t* data, size_t count, iflame_tokens** out);
IFLAME_API iflame_status iflame_tokens_load(const char* path, iflame_tokens** out);
IFLAME_API iflame_status iflame_tokens_save(const iflame_tokens* tokens, const char* path);
IFLAME_API size_t iflame_tokens_size(const iflame_tokens* tokens);
IFLAME_API const int32_t* iflame_tokens_data(const iflame_tokens* tokens);
IFLAME_API int iflame_tokens_bins(const iflame_tokens* tokens);
/* Number of whole faces in a grammatical sequence. */
IFLAME_API size_t iflame_tokens_faces(const iflame_tokens* tokens);
IFLAME_API void iflame_tokens_free(iflame_tokens* tokens);

/* Models. config_path and variant may be NULL; a variant overrides the
   architecture read from the config file. */
IFLAME_API iflame_status iflame_model_init(const char* config_path, const char* variant, uint64_t seed,
                                           iflame_model** out);
IFLAME_API iflame_status iflame_model_load(const char* checkpoint_path, iflame_model** out);
IFLAME_API iflame_status iflame_model_save(const iflame_model* model, const char* checkpoint_path);
IFLAME_API size_t iflame_model_parameter_count(const iflame_model* model);
IFLAME_API int iflame_model_bins(const iflame_model* model);
IFLAME_API void iflame_model_free(iflame_model* model);

/* Training */
typedef struct iflame_eval {
  double token_accuracy;
  double face_accuracy;
  double perplexity;
  double mean_loss;
} iflame_eval;

/* Trains a fresh model built from the config on the meshes listed in the
   manifest. log_csv_path and eval_csv_path may be NULL. */
IFLAME_API iflame_status iflame_train(const char* config_path, const char* manifest_path, const char* log_csv_path,
                                      const char* eval_csv_path, iflame_model** out, iflame_eval* eval);

/* Sampling */
typedef struct iflame_sampler {
  double top_p;
  int top_k;
  double temperature;
  uint64_t seed;
  int strict_grammar;
} iflame_sampler;

IFLAME_API iflame_sampler iflame_sampler_defaults(void);
IFLAME_API iflame_status iflame_generate(const iflame_model* model, const iflame_sampler* sampler, size_t max_faces,
                                         iflame_tokens** out);
/* Continues the first prefix_faces faces of prefix (which must be grammatical). */
IFLAME_API iflame_status iflame_complete(const iflame_model* model, const iflame_tokens* prefix, size_t prefix_faces,
                                         const iflame_sampler* sampler, size_t max_faces, iflame_tokens** out);

/* Benchmarks and cache accounting. config_path may be NULL; dim and heads
   override the config when positive. */
typedef struct iflame_bench_options {
  const char* config_path;
  int dim;
  int heads;
  size_t seq_len;
  int batch;
  int runs;
  int warmup_runs;
  uint64_t seed;
} iflame_bench_options;

typedef struct iflame_bench_report {
  char variant[16];
  size_t seq_len;
  int batch;
  double ms_per_token;
  double tokens_per_s;
  size_t cache_bytes;
  size_t predicted_cache_bytes;
  size_t peak_resident_bytes;
  double wall_s;
  char status[16];
} iflame_bench_report;

IFLAME_API iflame_bench_options iflame_bench_defaults(void);
IFLAME_API iflame_status iflame_bench(const char* variant, const iflame_bench_options* options,
                                      iflame_bench_report* out);
/* Formats the CSV header (when header is nonzero) and one row into buf.
   Returns the length needed excluding the terminator. */
IFLAME_API size_t iflame_bench_format_csv(const iflame_bench_report* report, int header, char* buf, size_t cap);

typedef struct iflame_cache_report {
  char variant[16];
  size_t seq_len;
  size_t bytes_per_element;
  size_t kv_positions;
  size_t baseline_positions;
  size_t kv_bytes;
  size_t state_bytes;
  size_t buffer_bytes;
  size_t baseline_bytes;
  double reduction_pct;
} iflame_cache_report;

IFLAME_API iflame_status iflame_inspect_cache(const char* variant, const char* config_path, size_t seq_len,
                                              size_t bytes_per_element, iflame_cache_report* out);
/* key=value lines, or a CSV header plus row when csv is nonzero. */
IFLAME_API size_t iflame_cache_format(const iflame_cache_report* report, int csv, char* buf, size_t cap);

#ifdef __cplusplus
}
#endif

#endif
