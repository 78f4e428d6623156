#pragma once

#include <iosfwd>
#include <string>

#include "iflame/hourglass.hpp"

namespace iflame {

/// Checkpoint layout: a text header ("iflame-checkpoint v1", a [config]
/// section of key = value lines, a [manifest] section with one
/// "name f64 rows cols offset" line per array), then "[data]" followed by the
/// arrays as little-endian doubles, row-major, at the listed byte offsets.
void write_checkpoint(std::ostream& out, const ModelWeights& w);
void save_checkpoint(const std::string& path, const ModelWeights& w);
ModelWeights read_checkpoint(std::istream& in);
ModelWeights load_checkpoint(const std::string& path);

}  // namespace iflame
