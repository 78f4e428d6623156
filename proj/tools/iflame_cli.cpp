#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "iflame/iflame.h"

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

struct RuntimeFailure {
  std::string message;
};

void check(iflame_status s, const std::string& what) {
  if (s != IFLAME_OK) throw RuntimeFailure{what + ": " + iflame_last_error()};
}

template <typename T, void (*Free)(T*)>
struct Owned {
  T* p = nullptr;
  Owned() = default;
  Owned(const Owned&) = delete;
  Owned& operator=(const Owned&) = delete;
  ~Owned() { Free(p); }
  T** out() { return &p; }
  T* get() const { return p; }
};

using Mesh = Owned<iflame_mesh, iflame_mesh_free>;
using Tokens = Owned<iflame_tokens, iflame_tokens_free>;
using Model = Owned<iflame_model, iflame_model_free>;

void write_mesh_or_empty(const iflame_tokens* tokens, const std::string& path) {
  if (iflame_tokens_faces(tokens) == 0) {
    std::ofstream out(path);
    if (!out) throw RuntimeFailure{"cannot open " + path};
    out << "# no faces generated\n";
    std::cerr << "warning: sequence contains no faces; wrote an empty mesh\n";
    return;
  }
  Mesh mesh;
  size_t dropped = 0;
  check(iflame_detokenize(tokens, mesh.out(), &dropped), "detokenize");
  check(iflame_mesh_save_obj(mesh.get(), path.c_str()), "write " + path);
  if (dropped > 0) std::cerr << "dropped " << dropped << " degenerate faces\n";
}

struct SamplerFlags {
  iflame_sampler s = iflame_sampler_defaults();
  bool strict = false;

  void add(CLI::App* app) {
    app->add_option("--top-p", s.top_p, "nucleus mass")->capture_default_str();
    app->add_option("--top-k", s.top_k, "top-k cutoff")->capture_default_str();
    app->add_option("--temperature", s.temperature, "softmax temperature")->capture_default_str();
    app->add_option("--seed", s.seed, "sampling seed")->capture_default_str();
    app->add_flag("--strict-grammar", strict, "mask tokens that would break the face grammar");
  }
  const iflame_sampler* get() {
    s.strict_grammar = strict ? 1 : 0;
    return &s;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"iflame: mesh tokenization, training, generation and cache benchmarks"};
  app.require_subcommand(1);

  std::string input, output, tokens_out, data, config, log_csv, eval_csv, checkpoint, variant, prefix_mesh,
      prefix_tokens;
  int bins = 128;
  size_t max_faces = 800, prefix_faces = 0, seq_len = 1800, bpe = 2;
  uint64_t seed = 0;
  bool csv = false;
  SamplerFlags gen_flags, comp_flags;
  iflame_bench_options bench = iflame_bench_defaults();

  auto* tok = app.add_subcommand("tokenize", "OBJ mesh to token file");
  tok->add_option("--input", input, "input OBJ")->required();
  tok->add_option("--bins", bins, "quantization levels per axis")->capture_default_str();
  tok->add_option("--out", output, "output token file")->required();

  auto* detok = app.add_subcommand("detokenize", "token file to OBJ mesh");
  detok->add_option("--input", input, "input token file")->required();
  detok->add_option("--out", output, "output OBJ")->required();

  auto* train = app.add_subcommand("train", "train a model on a mesh manifest");
  train->add_option("--data", data, "manifest, one OBJ path per line")->required();
  train->add_option("--config", config, "key = value config file")->required();
  train->add_option("--out", output, "checkpoint to write")->required();
  train->add_option("--log", log_csv, "per-step CSV log");
  train->add_option("--eval", eval_csv, "final evaluation CSV");

  auto* init = app.add_subcommand("init", "write a randomly initialized checkpoint");
  init->add_option("--config", config, "key = value config file");
  init->add_option("--variant", variant, "full, linear, I, I+S or I+S+H");
  init->add_option("--seed", seed, "initialization seed")->capture_default_str();
  init->add_option("--out", output, "checkpoint to write")->required();

  auto* gen = app.add_subcommand("generate", "sample a mesh from a checkpoint");
  gen->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  gen->add_option("--max-faces", max_faces, "face cap")->capture_default_str();
  gen_flags.add(gen);
  gen->add_option("--out", output, "output OBJ")->required();
  gen->add_option("--tokens-out", tokens_out, "also write the token sequence");

  auto* comp = app.add_subcommand("complete", "continue a partial mesh");
  comp->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  auto* pm = comp->add_option("--prefix-mesh", prefix_mesh, "OBJ whose canonical faces form the prefix");
  auto* pt = comp->add_option("--prefix-tokens", prefix_tokens, "token file holding the prefix");
  pm->excludes(pt);
  comp->add_option("--prefix-faces", prefix_faces, "number of leading faces kept")->required();
  comp->add_option("--max-faces", max_faces, "total face cap")->capture_default_str();
  comp_flags.add(comp);
  comp->add_option("--out", output, "output OBJ")->required();
  comp->add_option("--tokens-out", tokens_out, "also write the token sequence");

  auto* bn = app.add_subcommand("bench", "greedy decode benchmark on random weights");
  bn->add_option("--variant", variant, "full, linear, I, I+S, I+S+H or all")->required();
  bn->add_option("--seq-len", bench.seq_len, "tokens per session")->capture_default_str();
  bn->add_option("--batch", bench.batch, "sessions stepped together")->capture_default_str();
  bn->add_option("--runs", bench.runs, "timed runs (median reported)")->capture_default_str();
  bn->add_option("--warmup", bench.warmup_runs, "untimed runs")->capture_default_str();
  bn->add_option("--dim", bench.dim, "model width (<= 0 keeps the config value)")->capture_default_str();
  bn->add_option("--heads", bench.heads, "attention heads (<= 0 keeps the config value)")->capture_default_str();
  bn->add_option("--config", config, "key = value config file");
  bn->add_option("--seed", bench.seed, "initialization seed")->capture_default_str();
  bn->add_option("--out", output, "CSV file (default stdout)");

  auto* ic = app.add_subcommand("inspect-cache", "closed-form cache footprint");
  ic->add_option("--variant", variant, "full, linear, I, I+S or I+S+H");
  ic->add_option("--seq-len", seq_len, "coordinate tokens")->required();
  ic->add_option("--bytes-per-element", bpe, "bytes per cached scalar")->capture_default_str();
  ic->add_option("--config", config, "key = value config file");
  ic->add_flag("--csv", csv, "CSV instead of key=value lines");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  const char* cfg = config.empty() ? nullptr : config.c_str();
  try {
    if (*tok) {
      Mesh mesh;
      Tokens tokens;
      check(iflame_mesh_load_obj(input.c_str(), mesh.out()), "load " + input);
      check(iflame_tokenize(mesh.get(), bins, tokens.out()), "tokenize");
      check(iflame_tokens_save(tokens.get(), output.c_str()), "write " + output);
      std::cout << "faces=" << iflame_tokens_faces(tokens.get()) << " tokens=" << iflame_tokens_size(tokens.get())
                << '\n';
    } else if (*detok) {
      Tokens tokens;
      Mesh mesh;
      size_t dropped = 0;
      check(iflame_tokens_load(input.c_str(), tokens.out()), "load " + input);
      check(iflame_detokenize(tokens.get(), mesh.out(), &dropped), "detokenize");
      check(iflame_mesh_save_obj(mesh.get(), output.c_str()), "write " + output);
      size_t v = 0, f = 0;
      iflame_mesh_counts(mesh.get(), &v, &f);
      std::cout << "vertices=" << v << " faces=" << f << " dropped=" << dropped << '\n';
    } else if (*train) {
      Model model;
      iflame_eval ev{};
      check(iflame_train(config.c_str(), data.c_str(), log_csv.empty() ? nullptr : log_csv.c_str(),
                         eval_csv.empty() ? nullptr : eval_csv.c_str(), model.out(), &ev),
            "train");
      check(iflame_model_save(model.get(), output.c_str()), "write " + output);
      std::printf("token_acc=%.6f face_acc=%.6f ppl=%.6f\n", ev.token_accuracy, ev.face_accuracy, ev.perplexity);
    } else if (*init) {
      Model model;
      check(iflame_model_init(cfg, variant.empty() ? nullptr : variant.c_str(), seed, model.out()), "init");
      check(iflame_model_save(model.get(), output.c_str()), "write " + output);
      std::cout << "parameters=" << iflame_model_parameter_count(model.get()) << '\n';
    } else if (*gen) {
      Model model;
      Tokens tokens;
      check(iflame_model_load(checkpoint.c_str(), model.out()), "load " + checkpoint);
      check(iflame_generate(model.get(), gen_flags.get(), max_faces, tokens.out()), "generate");
      if (!tokens_out.empty()) check(iflame_tokens_save(tokens.get(), tokens_out.c_str()), "write " + tokens_out);
      write_mesh_or_empty(tokens.get(), output);
      std::cout << "faces=" << iflame_tokens_faces(tokens.get()) << " tokens=" << iflame_tokens_size(tokens.get())
                << '\n';
    } else if (*comp) {
      if (prefix_mesh.empty() == prefix_tokens.empty()) {
        std::cerr << "complete: give exactly one of --prefix-mesh or --prefix-tokens\n" << comp->help();
        return kUsage;
      }
      Model model;
      Tokens prefix, tokens;
      check(iflame_model_load(checkpoint.c_str(), model.out()), "load " + checkpoint);
      if (!prefix_mesh.empty()) {
        Mesh mesh;
        check(iflame_mesh_load_obj(prefix_mesh.c_str(), mesh.out()), "load " + prefix_mesh);
        check(iflame_tokenize(mesh.get(), iflame_model_bins(model.get()), prefix.out()), "tokenize prefix");
      } else {
        check(iflame_tokens_load(prefix_tokens.c_str(), prefix.out()), "load " + prefix_tokens);
      }
      check(iflame_complete(model.get(), prefix.get(), prefix_faces, comp_flags.get(), max_faces, tokens.out()),
            "complete");
      if (!tokens_out.empty()) check(iflame_tokens_save(tokens.get(), tokens_out.c_str()), "write " + tokens_out);
      write_mesh_or_empty(tokens.get(), output);
      std::cout << "faces=" << iflame_tokens_faces(tokens.get()) << " tokens=" << iflame_tokens_size(tokens.get())
                << '\n';
    } else if (*bn) {
      bench.config_path = cfg;
      std::vector<std::string> variants;
      if (variant == "all") {
        variants = {"full", "linear", "I", "I+S", "I+S+H"};
      } else {
        variants = {variant};
      }
      std::ofstream file;
      if (!output.empty()) {
        file.open(output);
        if (!file) throw RuntimeFailure{"cannot open " + output};
      }
      std::ostream& out = output.empty() ? std::cout : file;
      bool header = true;
      for (const std::string& v : variants) {
        iflame_bench_report r{};
        check(iflame_bench(v.c_str(), &bench, &r), "bench " + v);
        std::string row(iflame_bench_format_csv(&r, header, nullptr, 0), '\0');
        iflame_bench_format_csv(&r, header, row.data(), row.size() + 1);
        out << row << std::flush;
        header = false;
      }
    } else if (*ic) {
      iflame_cache_report r{};
      check(iflame_inspect_cache(variant.empty() ? nullptr : variant.c_str(), cfg, seq_len, bpe, &r),
            "inspect-cache");
      std::string text(iflame_cache_format(&r, csv ? 1 : 0, nullptr, 0), '\0');
      iflame_cache_format(&r, csv ? 1 : 0, text.data(), text.size() + 1);
      std::cout << text;
    }
  } catch (const RuntimeFailure& f) {
    std::cerr << "error: " << f.message << '\n';
    return kRuntime;
  }
  return 0;
}
