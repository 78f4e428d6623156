#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "iflame/hourglass.hpp"
#include "iflame/training.hpp"

namespace iflame {

/// Contents of a key = value configuration file. Blank lines and lines
/// starting with '#' are ignored. A `variant` key selects the architecture
/// first; every other key then overrides individual fields.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::uint64_t init_seed = 0;
};

RunConfig parse_config(std::istream& in, const std::string& source = "<config>");
RunConfig load_config(const std::string& path);

/// Returns false when key is not a model key.
bool set_model_key(ModelConfig& cfg, const std::string& key, const std::string& value);
bool set_train_key(TrainConfig& cfg, const std::string& key, const std::string& value);

/// Writes every model field as key = value lines; parse_config reads them back.
void write_model_config(std::ostream& out, const ModelConfig& cfg);
void write_train_config(std::ostream& out, const TrainConfig& cfg);

}  // namespace iflame
