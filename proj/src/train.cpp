#include "dfpf/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "dfpf/ops.hpp"

namespace dfpf {

double cosine_lr(int t, int T, double lr0, double lr_min) {
  if (T < 1 || t < 0 || t > T) {
    throw PreconditionError("cosine_lr: need 0 <= t <= T, got t=" + std::to_string(t) + " T=" + std::to_string(T));
  }
  return lr_min + (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * t / T)) / 2.0;
}

AdamW::AdamW(const ParamStore& params, const TrainConfig& cfg) : params_(&params), cfg_(cfg) {
  for (const NamedParam& p : params.entries()) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

void AdamW::step(double lr) {
  const auto& entries = params_->entries();
  if (entries.size() != m_.size()) throw PreconditionError("AdamW: parameter set changed since construction");
  ++step_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (size_t i = 0; i < entries.size(); ++i) {
    Tensor& value = entries[i].var.mutable_value();
    const bool decay = entries[i].kind == ParamKind::Weight && cfg_.weight_decay != 0.0;
    const double* g = entries[i].var.has_grad() ? entries[i].var.grad().ptr() : nullptr;
    double* p = value.ptr();
    double* m = m_[i].ptr();
    double* v = v_[i].ptr();
    for (size_t j = 0; j < value.numel(); ++j) {
      const double gj = g ? g[j] : 0.0;
      if (decay) p[j] *= 1.0 - lr * cfg_.weight_decay;
      m[j] = b1 * m[j] + (1.0 - b1) * gj;
      v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.adam_eps);
    }
  }
}

void AdamW::load_state(int64_t step, std::vector<Tensor> m, std::vector<Tensor> v) {
  if (m.size() != m_.size() || v.size() != v_.size()) throw CheckpointError("optimizer state size mismatch");
  for (size_t i = 0; i < m.size(); ++i) {
    if (m[i].shape() != m_[i].shape() || v[i].shape() != v_[i].shape()) {
      throw CheckpointError("optimizer state shape mismatch for " + params_->entries()[i].name);
    }
  }
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

std::string epoch_log_row(const EpochLog& e) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", e.epoch, e.loss, e.val_f1, e.val_iou,
                e.val_precision, e.val_recall, e.lr);
  return buf;
}

Tensor predict_probabilities(const ChangeDetector& model, const BitemporalPair& pair) {
  validate_pair(pair);
  const Shape s = pair.image_a.shape();
  const Tensor a = pair.image_a.reshaped({1, s[0], s[1], s[2]});
  const Tensor b = pair.image_b.reshaped({1, s[0], s[1], s[2]});
  return full_forward(model, a, b).reshaped({1, s[1], s[2]});
}

Tensor predict_mask(const ChangeDetector& model, const BitemporalPair& pair) {
  return binarize(predict_probabilities(model, pair), model.config().threshold);
}

MetricsReport evaluate_predictor(const Predictor& predictor, const std::vector<BitemporalPair>& pairs) {
  ConfusionCounts total;
  for (const BitemporalPair& p : pairs) {
    if (!p.label) throw InputError(p.id + ": evaluation needs a label");
    total += confusion_counts(predictor(p), *p.label);
  }
  return make_report(total);
}

MetricsReport evaluate(const ChangeDetector& model, const std::vector<BitemporalPair>& pairs) {
  return evaluate_predictor([&model](const BitemporalPair& p) { return predict_mask(model, p); }, pairs);
}

MetricsReport evaluate(const Checkpoint& ckpt, const std::vector<BitemporalPair>& pairs) {
  return evaluate(*instantiate(ckpt), pairs);
}

namespace {

void write_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << kEpochLogHeader << "\n";
  for (const EpochLog& e : log) out << epoch_log_row(e) << "\n";
}

Checkpoint capture(const ChangeDetector& model, const AdamW& opt, const ModelConfig& mc, const TrainConfig& tc,
                   int epoch, double f1, double metric) {
  Checkpoint c;
  c.model_config = mc;
  c.train_config = tc;
  c.parameters = snapshot_parameters(model);
  c.optimizer_step = opt.step_count();
  c.adam_m = opt.first_moments();
  c.adam_v = opt.second_moments();
  c.epoch = epoch;
  c.best_val_f1 = f1;
  c.best_metric_value = metric;
  return c;
}

}  // namespace

TrainOutcome train_capturing(const ModelConfig& model_cfg, const TrainConfig& cfg, const TrainData& data,
                             const TrainHooks& hooks) {
  model_cfg.validate();
  cfg.validate();
  if (data.train.empty()) throw PreconditionError("train: empty training set");
  for (const auto* set : {&data.train, &data.val}) {
    for (const BitemporalPair& p : *set) {
      validate_pair(p);
      if (!p.label) throw InputError(p.id + ": training pairs need labels");
    }
  }
  if (cfg.batch_size > 1) {
    for (const BitemporalPair& p : data.train) {
      if (p.image_a.shape() != data.train.front().image_a.shape()) {
        throw PreconditionError("train: mini-batches need equally sized pairs; " + p.id + " differs");
      }
    }
  }
  const std::vector<BitemporalPair>& val = data.val.empty() ? data.train : data.val;

  TrainOutcome outcome;
  TrainResult& result = outcome.result;
  ChangeDetector model(model_cfg, cfg.seed);
  AdamW opt(model.params(), cfg);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::bernoulli_distribution coin(0.5);
  std::vector<size_t> order(data.train.size());
  const size_t bs = static_cast<size_t>(cfg.batch_size);
  bool have_initial = false;
  int streak = 0;
  double best = -1.0;

  try {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.effective_lr_min());
      std::iota(order.begin(), order.end(), size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      double loss_sum = 0;
      for (size_t start = 0; start < order.size(); start += bs) {
        std::vector<BitemporalPair> flipped;
        std::vector<const BitemporalPair*> items;
        const size_t end = std::min(order.size(), start + bs);
        if (cfg.flips) {
          flipped.reserve(end - start);
          for (size_t i = start; i < end; ++i) {
            const bool h = coin(rng), v = coin(rng);
            flipped.push_back(flip_pair(data.train[order[i]], h, v));
          }
          for (const BitemporalPair& p : flipped) items.push_back(&p);
        } else {
          for (size_t i = start; i < end; ++i) items.push_back(&data.train[order[i]]);
        }

        model.params().zero_grad();
        Var logits;
        try {
          logits = model.logits(Var(batch_images_a(items)), Var(batch_images_b(items)));
        } catch (const InputError&) {
          // Inputs were validated above, so this is an overflowed activation.
          throw DivergenceError(epoch + 1, lr, "non-finite activations at epoch " + std::to_string(epoch + 1));
        }
        const Var loss = ops::bce_with_logits(logits, batch_labels(items), cfg.eps_bce);
        const double value = loss.value()[0];
        if (!std::isfinite(value)) {
          throw DivergenceError(epoch + 1, lr, "non-finite loss at epoch " + std::to_string(epoch + 1));
        }
        if (!have_initial) {
          result.initial_loss = value;
          have_initial = true;
        }
        backward(loss);
        opt.step(lr);
        loss_sum += value * static_cast<double>(items.size());
      }

      EpochLog row;
      row.epoch = epoch + 1;
      row.loss = loss_sum / static_cast<double>(order.size());
      row.lr = lr;
      MetricsReport report;
      try {
        report = evaluate(model, val);
      } catch (const InputError&) {
        throw DivergenceError(row.epoch, lr, "non-finite activations during validation at epoch " +
                                                 std::to_string(row.epoch));
      }
      row.val_f1 = report.metrics.f1;
      row.val_iou = report.metrics.iou;
      row.val_precision = report.metrics.precision;
      row.val_recall = report.metrics.recall;
      result.log.push_back(row);
      result.final_loss = row.loss;
      if (!hooks.log_csv.empty()) write_log(hooks.log_csv, result.log);
      if (hooks.on_epoch) hooks.on_epoch(row);

      const double metric = cfg.best_metric == BestMetric::ValF1 ? row.val_f1 : row.val_iou;
      if (metric > best) {
        best = metric;
        result.best = capture(model, opt, model_cfg, cfg, row.epoch, row.val_f1, metric);
        outcome.has_checkpoint = true;
      }

      streak = row.loss > cfg.divergence_factor * result.initial_loss ? streak + 1 : 0;
      if (streak >= cfg.divergence_patience) {
        throw DivergenceError(row.epoch, lr,
                              "loss above " + std::to_string(cfg.divergence_factor) + "x the initial loss for " +
                                  std::to_string(streak) + " epochs");
      }
    }
  } catch (const DivergenceError& e) {
    outcome.divergence = e;
  }
  return outcome;
}

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const TrainData& data,
                  const TrainHooks& hooks) {
  TrainOutcome outcome = train_capturing(model_cfg, train_cfg, data, hooks);
  if (outcome.divergence) throw *outcome.divergence;
  return std::move(outcome.result);
}

std::vector<SweepRow> lr_sweep(const std::vector<double>& lrs, const ModelConfig& model_cfg,
                               const TrainConfig& base_cfg, const TrainData& data,
                               const std::vector<BitemporalPair>& eval_set,
                               const std::function<void(const SweepRow&)>& on_row) {
  for (double lr : lrs) {
    if (!(lr > 0)) throw PreconditionError("lr_sweep: learning rates must be positive");
  }
  const std::vector<BitemporalPair>& eval = !eval_set.empty() ? eval_set : (data.val.empty() ? data.train : data.val);
  std::vector<SweepRow> rows;
  for (double lr : lrs) {
    TrainConfig cfg = base_cfg;
    cfg.lr0 = lr;
    SweepRow row;
    row.lr = lr;
    try {
      TrainOutcome out = train_capturing(model_cfg, cfg, data);
      row.epochs_completed = static_cast<int>(out.result.log.size());
      row.final_loss = out.result.final_loss;
      if (out.divergence) {
        row.divergent = true;
        row.diagnostic = out.divergence->what();
      }
      row.report = out.has_checkpoint ? evaluate(out.result.best, eval) : make_report(ConfusionCounts{});
    } catch (const Error& e) {
      row.failed = true;
      row.diagnostic = e.what();
      row.report = make_report(ConfusionCounts{});
    }
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_sweep_table(const std::vector<SweepRow>& rows) {
  std::string out = "lr        F1(%)   IoU(%)  P(%)    R(%)    status\n";
  char buf[256];
  for (const SweepRow& r : rows) {
    const Metrics& m = r.report.metrics;
    const std::string status = r.divergent ? "divergent: " + r.diagnostic : r.failed ? "failed: " + r.diagnostic : "ok";
    std::snprintf(buf, sizeof(buf), "%-9.3g %-7.2f %-7.2f %-7.2f %-7.2f %s\n", r.lr, 100 * m.f1, 100 * m.iou,
                  100 * m.precision, 100 * m.recall, status.c_str());
    out += buf;
  }
  return out;
}

}  // namespace dfpf
