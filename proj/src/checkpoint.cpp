#include "iflame/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <iterator>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "iflame/config_file.hpp"

namespace iflame {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
static_assert(sizeof(Real) == 8);

namespace {

constexpr const char* kMagic = "iflame-checkpoint v1";

struct Entry {
  Eigen::Index rows = 0, cols = 0;
  std::size_t offset = 0;
};

}  // namespace

void write_checkpoint(std::ostream& out, const ModelWeights& w) {
  out << kMagic << "\n[config]\n";
  write_model_config(out, w.config);
  out << "[manifest]\n";
  std::size_t offset = 0;
  w.visit([&](const std::string& name, const Mat& m) {
    out << name << " f64 " << m.rows() << ' ' << m.cols() << ' ' << offset << '\n';
    offset += static_cast<std::size_t>(m.size()) * sizeof(Real);
  });
  out << "[data]\n";
  w.visit([&](const std::string&, const Mat& m) {
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(Real)));
  });
  if (!out) fail(ErrorCode::kIo, "checkpoint: write failed");
}

void save_checkpoint(const std::string& path, const ModelWeights& w) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot open " + path + " for writing");
  write_checkpoint(out, w);
}

ModelWeights read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMagic) fail(ErrorCode::kParse, "checkpoint: bad magic line");
  if (!std::getline(in, line) || line != "[config]") fail(ErrorCode::kParse, "checkpoint: missing [config]");
  std::stringstream cfg_text;
  while (std::getline(in, line) && line != "[manifest]") cfg_text << line << '\n';
  if (line != "[manifest]") fail(ErrorCode::kParse, "checkpoint: missing [manifest]");
  const RunConfig rc = parse_config(cfg_text, "checkpoint");

  std::map<std::string, Entry> manifest;
  while (std::getline(in, line) && line != "[data]") {
    std::istringstream ls(line);
    std::string name, dtype;
    Entry e;
    if (!(ls >> name >> dtype >> e.rows >> e.cols >> e.offset) || dtype != "f64") {
      fail(ErrorCode::kParse, "checkpoint: bad manifest line '" + line + "'");
    }
    manifest[name] = e;
  }
  if (line != "[data]") fail(ErrorCode::kParse, "checkpoint: missing [data]");
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  ModelWeights w = init_weights(rc.model, 0);
  std::size_t seen = 0;
  w.visit([&](const std::string& name, Mat& m) {
    const auto it = manifest.find(name);
    if (it == manifest.end()) fail(ErrorCode::kParse, "checkpoint: missing array " + name);
    const Entry& e = it->second;
    if (e.rows != m.rows() || e.cols != m.cols()) {
      fail(ErrorCode::kParse, "checkpoint: shape mismatch for " + name);
    }
    const std::size_t bytes = static_cast<std::size_t>(m.size()) * sizeof(Real);
    if (e.offset + bytes > data.size()) fail(ErrorCode::kParse, "checkpoint: truncated data for " + name);
    std::memcpy(m.data(), data.data() + e.offset, bytes);
    ++seen;
  });
  if (seen != manifest.size()) fail(ErrorCode::kParse, "checkpoint: manifest lists unknown arrays");
  return w;
}

ModelWeights load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open checkpoint " + path);
  return read_checkpoint(in);
}

}  // namespace iflame
