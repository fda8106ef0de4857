#pragma once

#include <array>
#include <cstdint>
#include <string>

#include <nlohmann/json_fwd.hpp>

namespace dfpf {

inline constexpr int kLevels = 4;
inline constexpr std::array<int, kLevels> kLevelStrides{4, 8, 16, 32};
inline constexpr std::array<int, kLevels> kPatchStrides{4, 2, 2, 2};

struct EncoderConfig {
  std::array<int, kLevels> channels{32, 64, 160, 256};
  std::array<int, kLevels> depths{2, 2, 2, 2};
  std::array<int, kLevels> heads{1, 2, 5, 8};
  std::array<int, kLevels> sr_ratios{8, 4, 2, 1};
  double mlp_ratio = 4.0;

  // Widths (8, 16, 32, 64), one block per stage.
  static EncoderConfig tiny();
  void validate() const;
  int mlp_hidden(int level) const;
};

enum class PhiKernel { Softplus, ShiftedRelu };
enum class DcfmVariant { Full, Alpha, Beta };  // alpha: no attention, beta: no edge branch

struct AgentAttentionConfig {
  int heads = 1;
  int num_agents = 49;  // pooled on a sqrt(n) x sqrt(n) grid when tokens are spatial
  PhiKernel phi = PhiKernel::Softplus;
  bool include_bias = true;  // bias terms on the q/k/v/output projections

  void validate(int channels) const;
};

struct ModelConfig {
  EncoderConfig encoder;
  int num_agents = 49;
  PhiKernel phi = PhiKernel::Softplus;
  bool agent_bias = true;
  bool use_pefm = true;
  bool use_dcfm = true;
  DcfmVariant dcfm_variant = DcfmVariant::Full;
  int decoder_reduction = 4;
  double threshold = 0.5;

  static ModelConfig tiny();
  void validate() const;
  AgentAttentionConfig agent_config(int level) const;
};

enum class BestMetric { ValF1, ValIou };

struct TrainConfig {
  int epochs = 500;
  double lr0 = 5e-4;
  double lr_min = -1.0;  // negative: lr0 / 100
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 8;
  uint64_t seed = 0;
  BestMetric best_metric = BestMetric::ValF1;
  double eps_bce = 1e-7;
  bool flips = false;
  double divergence_factor = 100.0;
  int divergence_patience = 5;

  double effective_lr_min() const { return lr_min < 0 ? lr0 / 100.0 : lr_min; }
  void validate() const;
};

std::string to_string(PhiKernel k);
std::string to_string(DcfmVariant v);
std::string to_string(BestMetric m);
PhiKernel parse_phi(const std::string& s);
DcfmVariant parse_variant(const std::string& s);
BestMetric parse_best_metric(const std::string& s);

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace dfpf
