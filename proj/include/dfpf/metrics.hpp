#pragma once

#include <cstdint>

#include <nlohmann/json_fwd.hpp>

#include "dfpf/tensor.hpp"

namespace dfpf {

// Pixel tallies with "changed" as the positive class.
struct ConfusionCounts {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  int64_t tn = 0;

  int64_t total() const { return tp + fp + fn + tn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct Metrics {
  double f1 = 0;
  double iou = 0;
  double precision = 0;
  double recall = 0;
  // Set when any formula had a zero denominator; that metric is reported as 0.
  bool degenerate = false;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

// Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps].
double bce_loss(const Tensor& pred, const Tensor& target, double eps = 1e-7);

// Both masks must be binary (0/1) and equally shaped.
ConfusionCounts confusion_counts(const Tensor& pred_mask, const Tensor& gt_mask);

// F1 = 2TP/(2TP+FP+FN), IoU = TP/(TP+FP+FN), P = TP/(TP+FP), R = TP/(TP+FN).
Metrics metrics_from_counts(const ConfusionCounts& c);

struct MetricsReport {
  ConfusionCounts counts;
  Metrics metrics;
};

MetricsReport make_report(const ConfusionCounts& c);

// Keys: f1, iou, precision, recall, tp, fp, fn, tn, degenerate.
nlohmann::json report_to_json(const MetricsReport& r);
MetricsReport report_from_json(const nlohmann::json& j);
// Throws InputError naming the first missing, extra or mistyped key.
void validate_report_json(const nlohmann::json& j);

}  // namespace dfpf
