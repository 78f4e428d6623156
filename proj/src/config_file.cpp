#include "iflame/config_file.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <utility>
#include <vector>

#include "iflame/variants.hpp"

namespace iflame {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  fail(ErrorCode::kParse, "config: bad value '" + value + "' for " + key);
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v);
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v);
  return out;
}

double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) bad_value(key, v);
    return d;
  } catch (const std::logic_error&) {
    bad_value(key, v);
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v);
}

int to_int32(const std::string& key, const std::string& v) { return static_cast<int>(to_int(key, v)); }

std::string fmt_real(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace

bool set_model_key(ModelConfig& c, const std::string& key, const std::string& v) {
  if (key == "dim") {
    c.dim = to_int32(key, v);
  } else if (key == "heads") {
    c.heads = to_int32(key, v);
  } else if (key == "hourglass") {
    c.hourglass = to_bool(key, v);
  } else if (key == "depths") {
    std::stringstream ss(v);
    std::string part;
    std::vector<int> d;
    while (std::getline(ss, part, ',')) d.push_back(to_int32(key, trim(part)));
    if (d.size() != c.depths.size()) bad_value(key, v);
    for (std::size_t i = 0; i < d.size(); ++i) c.depths[i] = d[i];
  } else if (key == "plain_depth") {
    c.plain_depth = to_int32(key, v);
  } else if (key == "pool") {
    c.pool = to_int32(key, v);
  } else if (key == "bins") {
    c.bins = to_int32(key, v);
  } else if (key == "max_context") {
    c.max_context = to_int32(key, v);
  } else if (key == "ffn_hidden") {
    c.ffn_hidden = to_int32(key, v);
  } else if (key == "pattern") {
    if (v == "interleaved") {
      c.pattern = AttentionPattern::kInterleaved;
    } else if (v == "full") {
      c.pattern = AttentionPattern::kAllFull;
    } else if (v == "linear") {
      c.pattern = AttentionPattern::kAllLinear;
    } else {
      bad_value(key, v);
    }
  } else if (key == "linear_variant") {
    if (v == "simplified") {
      c.linear_variant = LinearVariant::kSimplified;
    } else if (v == "gated") {
      c.linear_variant = LinearVariant::kGated;
    } else {
      bad_value(key, v);
    }
  } else if (key == "full_position") {
    if (v == "first") {
      c.full_position = FullPosition::kFirst;
    } else if (v == "last") {
      c.full_position = FullPosition::kLast;
    } else {
      bad_value(key, v);
    }
  } else if (key == "rope_base") {
    c.rope_base = to_real(key, v);
  } else if (key == "norm_eps") {
    c.norm_eps = to_real(key, v);
  } else if (key == "tie_embeddings") {
    c.tie_embeddings = to_bool(key, v);
  } else if (key == "learned_pad") {
    c.learned_pad = to_bool(key, v);
  } else {
    return false;
  }
  return true;
}

bool set_train_key(TrainConfig& c, const std::string& key, const std::string& v) {
  if (key == "batch_size") {
    c.batch_size = to_int32(key, v);
  } else if (key == "epochs") {
    c.epochs = to_int32(key, v);
  } else if (key == "peak_lr") {
    c.peak_lr = to_real(key, v);
  } else if (key == "min_lr") {
    c.min_lr = to_real(key, v);
  } else if (key == "warmup_epochs") {
    c.warmup_epochs = to_int32(key, v);
  } else if (key == "seed") {
    c.seed = to_u64(key, v);
  } else if (key == "augment") {
    c.augment = to_bool(key, v);
  } else if (key == "beta1") {
    c.beta1 = to_real(key, v);
  } else if (key == "beta2") {
    c.beta2 = to_real(key, v);
  } else if (key == "adam_eps") {
    c.adam_eps = to_real(key, v);
  } else if (key == "weight_decay") {
    c.weight_decay = to_real(key, v);
  } else if (key == "grad_clip") {
    c.grad_clip = to_real(key, v);
  } else if (key == "max_faces") {
    c.max_faces = static_cast<std::size_t>(to_u64(key, v));
  } else {
    return false;
  }
  return true;
}

RunConfig parse_config(std::istream& in, const std::string& source) {
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string variant;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::kParse, source + ":" + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key == "variant") {
      variant = value;
    } else {
      pairs.emplace_back(std::move(key), std::move(value));
    }
  }
  RunConfig rc;
  if (!variant.empty()) rc.model = variant_config(parse_variant(variant), rc.model);
  for (const auto& [key, value] : pairs) {
    if (key == "init_seed") {
      rc.init_seed = to_u64(key, value);
      continue;
    }
    if (set_model_key(rc.model, key, value) || set_train_key(rc.train, key, value)) continue;
    fail(ErrorCode::kParse, source + ": unknown key '" + key + "'");
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open config " + path);
  return parse_config(in, path);
}

void write_model_config(std::ostream& out, const ModelConfig& c) {
  const char* pattern = c.pattern == AttentionPattern::kInterleaved ? "interleaved"
                        : c.pattern == AttentionPattern::kAllFull   ? "full"
                                                                    : "linear";
  out << "dim = " << c.dim << '\n'
      << "heads = " << c.heads << '\n'
      << "hourglass = " << (c.hourglass ? "true" : "false") << '\n'
      << "depths = " << c.depths[0] << ',' << c.depths[1] << ',' << c.depths[2] << ',' << c.depths[3] << ','
      << c.depths[4] << '\n'
      << "plain_depth = " << c.plain_depth << '\n'
      << "pool = " << c.pool << '\n'
      << "bins = " << c.bins << '\n'
      << "max_context = " << c.max_context << '\n'
      << "ffn_hidden = " << c.ffn_hidden << '\n'
      << "pattern = " << pattern << '\n'
      << "linear_variant = " << (c.linear_variant == LinearVariant::kGated ? "gated" : "simplified") << '\n'
      << "full_position = " << (c.full_position == FullPosition::kFirst ? "first" : "last") << '\n'
      << "rope_base = " << fmt_real(c.rope_base) << '\n'
      << "norm_eps = " << fmt_real(c.norm_eps) << '\n'
      << "tie_embeddings = " << (c.tie_embeddings ? "true" : "false") << '\n'
      << "learned_pad = " << (c.learned_pad ? "true" : "false") << '\n';
}

void write_train_config(std::ostream& out, const TrainConfig& c) {
  out << "batch_size = " << c.batch_size << '\n'
      << "epochs = " << c.epochs << '\n'
      << "peak_lr = " << fmt_real(c.peak_lr) << '\n'
      << "min_lr = " << fmt_real(c.min_lr) << '\n'
      << "warmup_epochs = " << c.warmup_epochs << '\n'
      << "seed = " << c.seed << '\n'
      << "augment = " << (c.augment ? "true" : "false") << '\n'
      << "beta1 = " << fmt_real(c.beta1) << '\n'
      << "beta2 = " << fmt_real(c.beta2) << '\n'
      << "adam_eps = " << fmt_real(c.adam_eps) << '\n'
      << "weight_decay = " << fmt_real(c.weight_decay) << '\n'
      << "grad_clip = " << fmt_real(c.grad_clip) << '\n'
      << "max_faces = " << c.max_faces << '\n';
}

}  // namespace iflame
