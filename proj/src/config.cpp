#include "dfpf/config.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "dfpf/errors.hpp"

namespace dfpf {

namespace {

bool is_square(int n) {
  int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  return r * r == n;
}

}  // namespace

EncoderConfig EncoderConfig::tiny() {
  EncoderConfig c;
  c.channels = {8, 16, 32, 64};
  c.depths = {1, 1, 1, 1};
  c.heads = {1, 2, 4, 8};
  c.sr_ratios = {8, 4, 2, 1};
  c.mlp_ratio = 4.0;
  return c;
}

void EncoderConfig::validate() const {
  for (int j = 0; j < kLevels; ++j) {
    if (channels[j] <= 0 || depths[j] <= 0 || heads[j] <= 0 || sr_ratios[j] <= 0) {
      throw ConfigError("encoder: channels, depths, heads and sr_ratios must be positive (stage " +
                        std::to_string(j + 1) + ")");
    }
    if (channels[j] % heads[j] != 0) {
      throw ConfigError("encoder: stage " + std::to_string(j + 1) + " width " + std::to_string(channels[j]) +
                        " is not divisible by " + std::to_string(heads[j]) + " heads");
    }
    if (j > 0 && sr_ratios[j] > sr_ratios[j - 1]) {
      throw ConfigError("encoder: sr_ratios must be nonincreasing across stages");
    }
  }
  if (!(mlp_ratio > 0)) throw ConfigError("encoder: mlp_ratio must be positive");
}

int EncoderConfig::mlp_hidden(int level) const {
  return static_cast<int>(std::lround(channels[level] * mlp_ratio));
}

void AgentAttentionConfig::validate(int channels) const {
  if (heads < 1 || num_agents < 1) throw ConfigError("agent attention: heads and num_agents must be positive");
  if (channels % heads != 0) throw ConfigError("agent attention: channels not divisible by heads");
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.encoder = EncoderConfig::tiny();
  c.num_agents = 16;
  return c;
}

void ModelConfig::validate() const {
  encoder.validate();
  if (num_agents < 1 || !is_square(num_agents)) {
    throw ConfigError("num_agents must be a positive perfect square, got " + std::to_string(num_agents));
  }
  if (decoder_reduction < 1) throw ConfigError("decoder_reduction must be >= 1");
  if (!(threshold > 0 && threshold < 1)) throw ConfigError("threshold must lie in (0, 1)");
}

AgentAttentionConfig ModelConfig::agent_config(int level) const {
  return {encoder.heads[level], num_agents, phi, agent_bias};
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (!(lr0 > 0)) throw ConfigError("train.lr0 must be positive");
  if (lr_min >= 0 && lr_min > lr0) throw ConfigError("train.lr_min must not exceed lr0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (weight_decay < 0) throw ConfigError("train.weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("train.beta1/beta2 must lie in [0, 1)");
  if (!(adam_eps > 0) || !(eps_bce > 0 && eps_bce < 0.5)) throw ConfigError("train eps values out of range");
  if (divergence_patience < 1 || !(divergence_factor > 1)) throw ConfigError("train divergence settings invalid");
}

std::string to_string(PhiKernel k) { return k == PhiKernel::Softplus ? "softplus" : "shifted-relu"; }

std::string to_string(DcfmVariant v) {
  switch (v) {
    case DcfmVariant::Full: return "full";
    case DcfmVariant::Alpha: return "alpha";
    case DcfmVariant::Beta: return "beta";
  }
  return "full";
}

std::string to_string(BestMetric m) { return m == BestMetric::ValF1 ? "val_f1" : "val_iou"; }

PhiKernel parse_phi(const std::string& s) {
  if (s == "softplus") return PhiKernel::Softplus;
  if (s == "shifted-relu") return PhiKernel::ShiftedRelu;
  throw ConfigError("unknown phi kernel '" + s + "' (softplus | shifted-relu)");
}

DcfmVariant parse_variant(const std::string& s) {
  if (s == "full") return DcfmVariant::Full;
  if (s == "alpha") return DcfmVariant::Alpha;
  if (s == "beta") return DcfmVariant::Beta;
  throw ConfigError("unknown DCFM variant '" + s + "' (full | alpha | beta)");
}

BestMetric parse_best_metric(const std::string& s) {
  if (s == "val_f1") return BestMetric::ValF1;
  if (s == "val_iou") return BestMetric::ValIou;
  throw ConfigError("unknown best metric '" + s + "' (val_f1 | val_iou)");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"channels", c.channels}, {"depths", c.depths},         {"heads", c.heads},
       {"sr_ratios", c.sr_ratios}, {"mlp_ratio", c.mlp_ratio}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  j.at("channels").get_to(c.channels);
  j.at("depths").get_to(c.depths);
  j.at("heads").get_to(c.heads);
  j.at("sr_ratios").get_to(c.sr_ratios);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"encoder", c.encoder},
       {"num_agents", c.num_agents},
       {"phi", to_string(c.phi)},
       {"agent_bias", c.agent_bias},
       {"use_pefm", c.use_pefm},
       {"use_dcfm", c.use_dcfm},
       {"dcfm_variant", to_string(c.dcfm_variant)},
       {"decoder_reduction", c.decoder_reduction},
       {"threshold", c.threshold}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("encoder").get_to(c.encoder);
  j.at("num_agents").get_to(c.num_agents);
  c.phi = parse_phi(j.at("phi").get<std::string>());
  j.at("agent_bias").get_to(c.agent_bias);
  j.at("use_pefm").get_to(c.use_pefm);
  j.at("use_dcfm").get_to(c.use_dcfm);
  c.dcfm_variant = parse_variant(j.at("dcfm_variant").get<std::string>());
  j.at("decoder_reduction").get_to(c.decoder_reduction);
  j.at("threshold").get_to(c.threshold);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"lr0", c.lr0},
       {"lr_min", c.lr_min},
       {"weight_decay", c.weight_decay},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"batch_size", c.batch_size},
       {"seed", c.seed},
       {"best_metric", to_string(c.best_metric)},
       {"eps_bce", c.eps_bce},
       {"flips", c.flips},
       {"divergence_factor", c.divergence_factor},
       {"divergence_patience", c.divergence_patience}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("epochs").get_to(c.epochs);
  j.at("lr0").get_to(c.lr0);
  j.at("lr_min").get_to(c.lr_min);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("adam_eps").get_to(c.adam_eps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("seed").get_to(c.seed);
  c.best_metric = parse_best_metric(j.at("best_metric").get<std::string>());
  j.at("eps_bce").get_to(c.eps_bce);
  j.at("flips").get_to(c.flips);
  j.at("divergence_factor").get_to(c.divergence_factor);
  j.at("divergence_patience").get_to(c.divergence_patience);
}

}  // namespace dfpf
