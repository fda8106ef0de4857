#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dfpf/checkpoint.hpp"
#include "dfpf/config.hpp"
#include "dfpf/data.hpp"
#include "dfpf/errors.hpp"
#include "dfpf/metrics.hpp"
#include "dfpf/network.hpp"

namespace dfpf {

// lr_min + (lr0 - lr_min) (1 + cos(pi t / T)) / 2 for 0 <= t <= T.
double cosine_lr(int t, int T, double lr0, double lr_min);

// Adam with decoupled weight decay. Decay applies to ParamKind::Weight only.
class AdamW {
 public:
  AdamW(const ParamStore& params, const TrainConfig& cfg);

  // Parameters that received no gradient are treated as having a zero gradient.
  void step(double lr);

  int64_t step_count() const { return step_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void load_state(int64_t step, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  const ParamStore* params_;
  TrainConfig cfg_;
  int64_t step_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

struct EpochLog {
  int epoch = 0;  // 1-based
  double loss = 0;
  double val_f1 = 0;
  double val_iou = 0;
  double val_precision = 0;
  double val_recall = 0;
  double lr = 0;
};

inline constexpr const char* kEpochLogHeader = "epoch,loss,val_f1,val_iou,val_precision,val_recall,lr";
std::string epoch_log_row(const EpochLog& e);

struct TrainData {
  std::vector<BitemporalPair> train;
  // Model selection set; the training pairs are used when empty.
  std::vector<BitemporalPair> val;
};

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  // When set, the CSV log is rewritten after every epoch.
  std::filesystem::path log_csv;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> log;
  double initial_loss = 0;  // first mini-batch, before any update
  double final_loss = 0;    // mean loss of the last completed epoch
};

// Throws DivergenceError on a non-finite loss, or when the epoch loss exceeds
// divergence_factor * initial_loss for divergence_patience consecutive epochs.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const TrainData& data,
                  const TrainHooks& hooks = {});

struct TrainOutcome {
  TrainResult result;  // progress up to the failure when diverged
  std::optional<DivergenceError> divergence;
  bool has_checkpoint = false;
};
TrainOutcome train_capturing(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const TrainData& data,
                             const TrainHooks& hooks = {});

// Returns a binary [1, H, W] change mask for one pair.
using Predictor = std::function<Tensor(const BitemporalPair&)>;

Tensor predict_probabilities(const ChangeDetector& model, const BitemporalPair& pair);
Tensor predict_mask(const ChangeDetector& model, const BitemporalPair& pair);

// Micro-averaged over every labeled pixel of the set.
MetricsReport evaluate_predictor(const Predictor& predictor, const std::vector<BitemporalPair>& pairs);
MetricsReport evaluate(const ChangeDetector& model, const std::vector<BitemporalPair>& pairs);
MetricsReport evaluate(const Checkpoint& ckpt, const std::vector<BitemporalPair>& pairs);

struct SweepRow {
  double lr = 0;
  bool divergent = false;
  bool failed = false;  // any other error; the sweep carries on
  std::string diagnostic;
  MetricsReport report;  // best checkpoint on the evaluation set; zero counts if none was saved
  double final_loss = 0;
  int epochs_completed = 0;
};

// Every run starts from the same seed. Evaluates on `eval_set`, or data.val when it is empty.
std::vector<SweepRow> lr_sweep(const std::vector<double>& lrs, const ModelConfig& model_cfg,
                               const TrainConfig& base_cfg, const TrainData& data,
                               const std::vector<BitemporalPair>& eval_set = {},
                               const std::function<void(const SweepRow&)>& on_row = {});
std::string format_sweep_table(const std::vector<SweepRow>& rows);

}  // namespace dfpf
