#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dfpf/config.hpp"
#include "dfpf/network.hpp"
#include "dfpf/tensor.hpp"

namespace dfpf {

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  int format_version = kCheckpointFormatVersion;
  ModelConfig model_config;
  TrainConfig train_config;
  std::vector<std::pair<std::string, Tensor>> parameters;
  // AdamW moments, aligned with `parameters`.
  int64_t optimizer_step = 0;
  std::vector<Tensor> adam_m;
  std::vector<Tensor> adam_v;
  int epoch = 0;
  double best_val_f1 = 0.0;
  double best_metric_value = 0.0;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b);
};

// File layout: 8-byte magic "DFPFCKPT", uint32 version, uint64 header size,
// JSON header, then every tensor as raw little-endian doubles in header order.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
// Throws CheckpointError on a bad magic, an unknown version or a truncated file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Builds the model the checkpoint describes and copies its parameters in.
std::unique_ptr<ChangeDetector> instantiate(const Checkpoint& ckpt);
// Copies parameters by name; names and shapes must match exactly.
void restore_parameters(ChangeDetector& model, const Checkpoint& ckpt);
std::vector<std::pair<std::string, Tensor>> snapshot_parameters(const ChangeDetector& model);

}  // namespace dfpf
