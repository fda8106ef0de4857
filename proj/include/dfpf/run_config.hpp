#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dfpf/config.hpp"

namespace dfpf {

struct DataConfig {
  std::string root;          // prepared dataset with A/, B/, label/
  std::string split;         // manifest path; empty: <root>/split.json if present, else a fresh split
  uint64_t split_seed = 0;
  bool synthetic = false;    // generate pairs instead of reading root
  int synthetic_pairs = 20;
  int synthetic_size = 128;
  uint64_t synthetic_seed = 0;
  double change_rate = 0.5;
  int tile = 256;            // prepare: grid tile size
  int random_crops = 0;      // prepare: seeded crops per image instead of the grid
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string run_name = "default";
  std::string run_dir;  // empty: runs/<run_name>

  std::filesystem::path effective_run_dir() const;
  void validate() const;
};

// Defaults <- file <- overrides. A file whose first non-blank character is '{'
// is read as JSON and flattened to dotted keys; otherwise it holds key=value
// lines with '#' comments. model.preset=tiny|default resets the model block
// before any other key is applied. Throws ConfigError naming any unknown key.
RunConfig parse_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);
RunConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides);

// Every key as key=value, one per line; parsing it back yields the same config.
std::string echo_config(const RunConfig& cfg);
std::vector<std::string> config_keys();

}  // namespace dfpf
