#include "iflame/mesh_codec.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

namespace iflame {
namespace {

using QuantKey = std::array<int, 3>;  // (z, y, x) bins; ordering is the canonical sort key

QuantKey quantize_point(const Point3& p, const QuantizerConfig& cfg) {
  return {quantize_coord(p[2], cfg), quantize_coord(p[1], cfg), quantize_coord(p[0], cfg)};
}

Point3 dequantize_key(const QuantKey& k, const QuantizerConfig& cfg) {
  return {dequantize_coord(k[2], cfg), dequantize_coord(k[1], cfg), dequantize_coord(k[0], cfg)};
}

Face rotate_smallest_first(const Face& f) {
  if (f[1] < f[0] && f[1] < f[2]) return {f[1], f[2], f[0]};
  if (f[2] < f[0] && f[2] < f[1]) return {f[2], f[0], f[1]};
  return f;
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Parses the vertex index of an OBJ face corner ("7", "7/2", "7//3", "7/2/3").
long parse_corner(std::string_view corner, std::size_t line_no) {
  const auto slash = corner.find('/');
  const std::string_view head = corner.substr(0, slash);
  long value = 0;
  const auto [ptr, ec] = std::from_chars(head.data(), head.data() + head.size(), value);
  if (ec != std::errc() || ptr != head.data() + head.size()) {
    fail(ErrorCode::kParse, "obj line " + std::to_string(line_no) + ": bad face index '" +
                                std::string(corner) + "'");
  }
  if (value <= 0) {
    fail(ErrorCode::kParse, "obj line " + std::to_string(line_no) +
                                ": non-positive face index (relative indices unsupported)");
  }
  return value;
}

}  // namespace

void QuantizerConfig::validate() const {
  require(bins >= 2 && bins <= 1024, "bins must be in [2, 1024], got " + std::to_string(bins));
}

Mesh parse_obj(std::istream& in) {
  Mesh mesh;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view sv = trim(line);
    if (sv.empty() || sv.front() == '#') continue;
    std::istringstream fields{std::string(sv)};
    std::string tag;
    fields >> tag;
    if (tag == "v") {
      Point3 p{};
      if (!(fields >> p[0] >> p[1] >> p[2]) || !std::isfinite(p[0]) || !std::isfinite(p[1]) ||
          !std::isfinite(p[2])) {
        fail(ErrorCode::kParse, "obj line " + std::to_string(line_no) + ": malformed vertex");
      }
      mesh.vertices.push_back(p);
    } else if (tag == "f") {
      std::vector<long> corners;
      std::string corner;
      while (fields >> corner) corners.push_back(parse_corner(corner, line_no));
      if (corners.size() < 3) {
        fail(ErrorCode::kParse, "obj line " + std::to_string(line_no) + ": face needs >= 3 corners");
      }
      for (std::size_t i = 1; i + 1 < corners.size(); ++i) {
        mesh.faces.push_back({static_cast<std::int32_t>(corners[0] - 1),
                              static_cast<std::int32_t>(corners[i] - 1),
                              static_cast<std::int32_t>(corners[i + 1] - 1)});
      }
    }
    // vn, vt, o, g, s, usemtl, mtllib: ignored
  }
  const auto n = static_cast<std::int32_t>(mesh.vertices.size());
  for (const Face& f : mesh.faces) {
    for (std::int32_t idx : f) {
      if (idx >= n) {
        fail(ErrorCode::kParse, "obj face index " + std::to_string(idx + 1) + " out of range (" +
                                    std::to_string(n) + " vertices)");
      }
    }
  }
  return mesh;
}

Mesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  return parse_obj(in);
}

void write_obj(std::ostream& out, const Mesh& mesh) {
  char buf[96];
  for (const Point3& p : mesh.vertices) {
    std::snprintf(buf, sizeof(buf), "v %.9g %.9g %.9g\n", p[0], p[1], p[2]);
    out << buf;
  }
  for (const Face& f : mesh.faces) out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
}

void save_obj(const std::string& path, const Mesh& mesh) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  write_obj(out, mesh);
  if (!out) fail(ErrorCode::kIo, "write failed: " + path);
}

Mesh normalize(const Mesh& mesh) {
  require(!mesh.vertices.empty(), "normalize: mesh has no vertices");
  Point3 lo = mesh.vertices.front();
  Point3 hi = lo;
  for (const Point3& p : mesh.vertices) {
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  }
  const Real extent = std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
  if (!(extent > 0)) fail(ErrorCode::kInvalidArgument, "normalize: degenerate mesh (zero extent)");
  Mesh out = mesh;
  for (Point3& p : out.vertices) {
    for (int a = 0; a < 3; ++a) {
      const Real center = 0.5 * (lo[a] + hi[a]);
      p[a] = std::clamp((p[a] - center) / extent, Real(-0.5), Real(0.5));
    }
  }
  return out;
}

int quantize_coord(Real x, const QuantizerConfig& cfg) {
  const Real scaled = std::floor((x + 0.5) * cfg.bins);
  if (!(scaled >= 0)) return 0;  // also maps NaN to bin 0
  return static_cast<int>(std::min<Real>(scaled, cfg.bins - 1));
}

Real dequantize_coord(int bin, const QuantizerConfig& cfg) {
  return (static_cast<Real>(bin) + 0.5) / cfg.bins - 0.5;
}

Mesh canonicalize(const Mesh& mesh, const QuantizerConfig& cfg, CanonicalizeReport* report) {
  cfg.validate();
  std::vector<QuantKey> keys;
  keys.reserve(mesh.vertices.size());
  for (const Point3& p : mesh.vertices) keys.push_back(quantize_point(p, cfg));

  std::vector<std::array<QuantKey, 3>> kept;
  CanonicalizeReport rep;
  for (const Face& f : mesh.faces) {
    std::array<QuantKey, 3> corners{keys.at(f[0]), keys.at(f[1]), keys.at(f[2])};
    if (corners[0] == corners[1] || corners[1] == corners[2] || corners[0] == corners[2]) {
      ++rep.dropped_faces;
      continue;
    }
    kept.push_back(corners);
  }

  std::vector<QuantKey> all_unique = keys;
  std::sort(all_unique.begin(), all_unique.end());
  all_unique.erase(std::unique(all_unique.begin(), all_unique.end()), all_unique.end());
  rep.merged_vertices = keys.size() - all_unique.size();

  std::vector<QuantKey> used;
  used.reserve(kept.size() * 3);
  for (const auto& c : kept) used.insert(used.end(), c.begin(), c.end());
  std::sort(used.begin(), used.end());
  used.erase(std::unique(used.begin(), used.end()), used.end());
  rep.unreferenced_vertices = all_unique.size() - used.size();

  auto index_of = [&](const QuantKey& k) {
    return static_cast<std::int32_t>(std::lower_bound(used.begin(), used.end(), k) - used.begin());
  };

  Mesh out;
  out.vertices.reserve(used.size());
  for (const QuantKey& k : used) out.vertices.push_back(dequantize_key(k, cfg));
  out.faces.reserve(kept.size());
  for (const auto& c : kept) {
    out.faces.push_back(rotate_smallest_first({index_of(c[0]), index_of(c[1]), index_of(c[2])}));
  }
  std::sort(out.faces.begin(), out.faces.end());
  if (report) *report = rep;
  return out;
}

std::vector<TokenId> tokenize(const Mesh& mesh, const QuantizerConfig& cfg) {
  cfg.validate();
  if (mesh.faces.empty()) fail(ErrorCode::kInvalidArgument, "tokenize: mesh has no faces");
  std::vector<TokenId> tokens;
  tokens.reserve(mesh.faces.size() * kTokensPerFace + 2);
  tokens.push_back(cfg.start_token());
  for (const Face& f : mesh.faces) {
    for (std::int32_t idx : f) {
      const QuantKey k = quantize_point(mesh.vertices.at(idx), cfg);
      tokens.insert(tokens.end(), k.begin(), k.end());
    }
  }
  tokens.push_back(cfg.end_token());
  return tokens;
}

Mesh detokenize(std::span<const TokenId> tokens, const QuantizerConfig& cfg, DetokenizeReport* report) {
  cfg.validate();
  if (tokens.empty() || tokens.front() != cfg.start_token()) {
    fail(ErrorCode::kInvalidArgument, "detokenize: sequence must begin with [S]");
  }
  DetokenizeReport rep;
  std::vector<std::array<QuantKey, 3>> faces;
  std::size_t pos = 1;
  while (pos < tokens.size()) {
    if (tokens[pos] == cfg.end_token()) break;
    std::size_t group = 0;
    std::array<TokenId, kTokensPerFace> buf{};
    while (group < kTokensPerFace && pos < tokens.size() && tokens[pos] != cfg.end_token()) {
      const TokenId t = tokens[pos];
      if (!cfg.is_coordinate(t)) {
        fail(ErrorCode::kInvalidArgument, "detokenize: non-coordinate token " + std::to_string(t) +
                                              " inside a face group at position " + std::to_string(pos));
      }
      buf[group++] = t;
      ++pos;
    }
    if (group < kTokensPerFace) {
      rep.discarded_tokens += group;
      break;
    }
    std::array<QuantKey, 3> corners;
    for (int c = 0; c < 3; ++c) corners[c] = {buf[3 * c], buf[3 * c + 1], buf[3 * c + 2]};
    if (corners[0] == corners[1] || corners[1] == corners[2] || corners[0] == corners[2]) {
      ++rep.degenerate_faces;
      continue;
    }
    faces.push_back(corners);
  }
  if (faces.empty()) fail(ErrorCode::kInvalidArgument, "detokenize: sequence contains no complete faces");

  std::vector<QuantKey> used;
  for (const auto& c : faces) used.insert(used.end(), c.begin(), c.end());
  std::sort(used.begin(), used.end());
  used.erase(std::unique(used.begin(), used.end()), used.end());

  Mesh out;
  for (const QuantKey& k : used) out.vertices.push_back(dequantize_key(k, cfg));
  for (const auto& c : faces) {
    Face f;
    for (int i = 0; i < 3; ++i) {
      f[i] = static_cast<std::int32_t>(std::lower_bound(used.begin(), used.end(), c[i]) - used.begin());
    }
    out.faces.push_back(f);
  }
  rep.faces = out.faces.size();
  if (report) *report = rep;
  return out;
}

bool is_grammatical(std::span<const TokenId> tokens, const QuantizerConfig& cfg) {
  if (tokens.empty() || tokens.front() != cfg.start_token()) return false;
  std::size_t pos = 1;
  while (pos < tokens.size() && cfg.is_coordinate(tokens[pos])) ++pos;
  if ((pos - 1) % kTokensPerFace != 0) return false;
  if (pos >= tokens.size() || tokens[pos] != cfg.end_token()) return false;
  for (++pos; pos < tokens.size(); ++pos) {
    if (tokens[pos] != cfg.pad_token()) return false;
  }
  return true;
}

AugmentParams sample_augment(const Mesh& mesh, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Real> scale_dist(0.75, 1.0);
  AugmentParams params;
  for (int a = 0; a < 3; ++a) params.scale[a] = scale_dist(rng);
  for (int a = 0; a < 3; ++a) {
    Real lo = 0, hi = 0;
    if (!mesh.vertices.empty()) {
      lo = hi = mesh.vertices.front()[a] * params.scale[a];
      for (const Point3& p : mesh.vertices) {
        lo = std::min(lo, p[a] * params.scale[a]);
        hi = std::max(hi, p[a] * params.scale[a]);
      }
    }
    const Real t_lo = -0.5 - lo;
    const Real t_hi = 0.5 - hi;
    params.translation[a] = t_hi > t_lo ? std::uniform_real_distribution<Real>(t_lo, t_hi)(rng) : Real(0);
  }
  return params;
}

Mesh apply_augment(const Mesh& mesh, const AugmentParams& params) {
  Mesh out = mesh;
  for (Point3& p : out.vertices) {
    for (int a = 0; a < 3; ++a) {
      p[a] = std::clamp(p[a] * params.scale[a] + params.translation[a], Real(-0.5), Real(0.5));
    }
  }
  return out;
}

Mesh augment(const Mesh& mesh, std::uint64_t seed) { return apply_augment(mesh, sample_augment(mesh, seed)); }

std::vector<Mesh> filter_dataset(std::span<const Mesh> meshes, std::size_t max_faces,
                                 const QuantizerConfig& cfg) {
  std::vector<Mesh> kept;
  for (const Mesh& m : meshes) {
    if (canonicalize(m, cfg).faces.size() <= max_faces) kept.push_back(m);
  }
  return kept;
}

void write_token_file(std::ostream& out, std::span<const TokenId> tokens, const QuantizerConfig& cfg) {
  out << "iflame-tokens v1 bins=" << cfg.bins << '\n';
  std::size_t i = 0;
  if (i < tokens.size() && tokens[i] == cfg.start_token()) out << tokens[i++] << '\n';
  std::size_t run = 0;
  for (; i < tokens.size(); ++i) {
    const bool coord = cfg.is_coordinate(tokens[i]);
    if (!coord && run > 0) {
      out << '\n';
      run = 0;
    }
    out << (run > 0 ? " " : "") << tokens[i];
    ++run;
    if (!coord || run == kTokensPerFace) {
      out << '\n';
      run = 0;
    }
  }
  if (run > 0) out << '\n';
}

void save_token_file(const std::string& path, std::span<const TokenId> tokens, const QuantizerConfig& cfg) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  write_token_file(out, tokens, cfg);
  if (!out) fail(ErrorCode::kIo, "write failed: " + path);
}

TokenFile read_token_file(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) fail(ErrorCode::kParse, "token file: missing header");
  header = std::string(trim(header));
  constexpr std::string_view kPrefix = "iflame-tokens v1 bins=";
  if (header.rfind(kPrefix, 0) != 0) fail(ErrorCode::kParse, "token file: bad header '" + header + "'");
  TokenFile file;
  const std::string_view num = std::string_view(header).substr(kPrefix.size());
  const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), file.quantizer.bins);
  if (ec != std::errc() || ptr != num.data() + num.size()) {
    fail(ErrorCode::kParse, "token file: bad bins value");
  }
  try {
    file.quantizer.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kParse, std::string("token file: ") + e.what());
  }
  std::string word;
  while (in >> word) {
    TokenId t = 0;
    const auto [p, e] = std::from_chars(word.data(), word.data() + word.size(), t);
    if (e != std::errc() || p != word.data() + word.size() || t < 0 || t >= file.quantizer.vocab_size()) {
      fail(ErrorCode::kParse, "token file: bad token '" + word + "'");
    }
    file.tokens.push_back(t);
  }
  return file;
}

TokenFile load_token_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  return read_token_file(in);
}

}  // namespace iflame
