#include "dfpf/metrics.hpp"

#include <array>
#include <nlohmann/json.hpp>

#include "dfpf/errors.hpp"
#include "dfpf/ops.hpp"

namespace dfpf {

double bce_loss(const Tensor& pred, const Tensor& target, double eps) {
  for (double p : pred.data()) {
    if (!(p >= 0.0 && p <= 1.0)) throw InputError("bce_loss: predictions must lie in [0, 1]");
  }
  NoGradGuard guard;
  return ops::bce_loss(Var(pred), target, eps).value()[0];
}

ConfusionCounts confusion_counts(const Tensor& pred_mask, const Tensor& gt_mask) {
  if (pred_mask.shape() != gt_mask.shape()) {
    throw PreconditionError("confusion_counts: shape mismatch " + shape_str(pred_mask.shape()) + " vs " +
                            shape_str(gt_mask.shape()));
  }
  ConfusionCounts c;
  for (size_t i = 0; i < pred_mask.numel(); ++i) {
    const double p = pred_mask[i], g = gt_mask[i];
    if ((p != 0.0 && p != 1.0) || (g != 0.0 && g != 1.0)) throw InputError("confusion_counts: masks must be binary");
    if (p == 1.0) {
      (g == 1.0 ? c.tp : c.fp) += 1;
    } else {
      (g == 1.0 ? c.fn : c.tn) += 1;
    }
  }
  return c;
}

Metrics metrics_from_counts(const ConfusionCounts& c) {
  if (c.tp < 0 || c.fp < 0 || c.fn < 0 || c.tn < 0) throw PreconditionError("confusion counts must be nonnegative");
  Metrics m;
  auto ratio = [&m](double num, double den) {
    if (den == 0) {
      m.degenerate = true;
      return 0.0;
    }
    return num / den;
  };
  const double tp = static_cast<double>(c.tp), fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  m.f1 = ratio(2 * tp, 2 * tp + fp + fn);
  m.iou = ratio(tp, tp + fp + fn);
  m.precision = ratio(tp, tp + fp);
  m.recall = ratio(tp, tp + fn);
  return m;
}

MetricsReport make_report(const ConfusionCounts& c) { return {c, metrics_from_counts(c)}; }

nlohmann::json report_to_json(const MetricsReport& r) {
  return {{"f1", r.metrics.f1},         {"iou", r.metrics.iou}, {"precision", r.metrics.precision},
          {"recall", r.metrics.recall}, {"tp", r.counts.tp},    {"fp", r.counts.fp},
          {"fn", r.counts.fn},          {"tn", r.counts.tn},    {"degenerate", r.metrics.degenerate}};
}

void validate_report_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InputError("metrics report must be a JSON object");
  static const std::array<const char*, 4> reals{"f1", "iou", "precision", "recall"};
  static const std::array<const char*, 4> counts{"tp", "fp", "fn", "tn"};
  for (const char* k : reals) {
    if (!j.contains(k) || !j[k].is_number()) throw InputError(std::string("metrics report: missing real '") + k + "'");
  }
  for (const char* k : counts) {
    if (!j.contains(k) || !j[k].is_number_integer() || j[k].get<int64_t>() < 0) {
      throw InputError(std::string("metrics report: missing count '") + k + "'");
    }
  }
  if (!j.contains("degenerate") || !j["degenerate"].is_boolean()) {
    throw InputError("metrics report: missing boolean 'degenerate'");
  }
  if (j.size() != reals.size() + counts.size() + 1) throw InputError("metrics report: unexpected extra keys");
}

MetricsReport report_from_json(const nlohmann::json& j) {
  validate_report_json(j);
  MetricsReport r;
  r.counts = {j["tp"].get<int64_t>(), j["fp"].get<int64_t>(), j["fn"].get<int64_t>(), j["tn"].get<int64_t>()};
  r.metrics = {j["f1"].get<double>(), j["iou"].get<double>(), j["precision"].get<double>(), j["recall"].get<double>(),
               j["degenerate"].get<bool>()};
  return r;
}

}  // namespace dfpf
