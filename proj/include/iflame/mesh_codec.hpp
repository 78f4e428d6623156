#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "iflame/types.hpp"

namespace iflame {

using Point3 = std::array<Real, 3>;  // x, y, z
using Face = std::array<std::int32_t, 3>;

struct Mesh {
  std::vector<Point3> vertices;
  std::vector<Face> faces;

  bool operator==(const Mesh&) const = default;
};

/// Quantization grid over the cube [-0.5, 0.5]^3. Token ids [0, bins) are
/// coordinate bins; bins, bins+1 and bins+2 are [S], [E] and [P].
struct QuantizerConfig {
  int bins = 128;

  int vocab_size() const { return bins + 3; }
  TokenId start_token() const { return bins; }
  TokenId end_token() const { return bins + 1; }
  TokenId pad_token() const { return bins + 2; }
  bool is_coordinate(TokenId t) const { return t >= 0 && t < bins; }
  void validate() const;
};

inline constexpr int kTokensPerVertex = 3;
inline constexpr int kTokensPerFace = 9;

// Wavefront OBJ subset: `v` and `f` records only. Faces with more than three
// corners are fan-triangulated around their first corner.
Mesh parse_obj(std::istream& in);
Mesh load_obj(const std::string& path);
void write_obj(std::ostream& out, const Mesh& mesh);
void save_obj(const std::string& path, const Mesh& mesh);

/// Uniform scale + translation placing the bounding box centre at the origin
/// with the longest axis spanning [-0.5, 0.5].
Mesh normalize(const Mesh& mesh);

int quantize_coord(Real x, const QuantizerConfig& cfg);
Real dequantize_coord(int bin, const QuantizerConfig& cfg);

struct CanonicalizeReport {
  std::size_t merged_vertices = 0;
  std::size_t dropped_faces = 0;
  std::size_t unreferenced_vertices = 0;
};

/// Snaps vertices to bin centres, merges duplicates, sorts vertices by
/// (z, y, x), drops degenerate faces, rotates each face so its smallest index
/// leads and sorts faces lexicographically.
Mesh canonicalize(const Mesh& mesh, const QuantizerConfig& cfg, CanonicalizeReport* report = nullptr);

/// [S], then per face and per corner the (z, y, x) bins, then [E].
std::vector<TokenId> tokenize(const Mesh& mesh, const QuantizerConfig& cfg);

struct DetokenizeReport {
  std::size_t faces = 0;
  std::size_t discarded_tokens = 0;
  std::size_t degenerate_faces = 0;
};

Mesh detokenize(std::span<const TokenId> tokens, const QuantizerConfig& cfg,
                DetokenizeReport* report = nullptr);

/// True iff tokens match [S] (coord^9)* [E] [P]*.
bool is_grammatical(std::span<const TokenId> tokens, const QuantizerConfig& cfg);

struct AugmentParams {
  Point3 scale{1.0, 1.0, 1.0};
  Point3 translation{0.0, 0.0, 0.0};
};

AugmentParams sample_augment(const Mesh& mesh, std::uint64_t seed);
Mesh apply_augment(const Mesh& mesh, const AugmentParams& params);
Mesh augment(const Mesh& mesh, std::uint64_t seed);

/// Keeps meshes whose canonical face count is at most max_faces.
std::vector<Mesh> filter_dataset(std::span<const Mesh> meshes, std::size_t max_faces,
                                 const QuantizerConfig& cfg);

// Token stream file: header line `iflame-tokens v1 bins=<b>`, then ids.
struct TokenFile {
  QuantizerConfig quantizer;
  std::vector<TokenId> tokens;
};

void write_token_file(std::ostream& out, std::span<const TokenId> tokens, const QuantizerConfig& cfg);
void save_token_file(const std::string& path, std::span<const TokenId> tokens, const QuantizerConfig& cfg);
TokenFile read_token_file(std::istream& in);
TokenFile load_token_file(const std::string& path);

}  // namespace iflame
