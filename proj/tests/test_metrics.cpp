#include <doctest.h>

#include <cmath>
#include <nlohmann/json.hpp>

#include "dfpf/errors.hpp"
#include "dfpf/metrics.hpp"
#include "support.hpp"

using namespace dfpf;
using dfpf::testing::random_binary;
using dfpf::testing::random_tensor;

TEST_CASE("cross-entropy examples") {
  CHECK(bce_loss(Tensor({1}, {0.5}), Tensor({1}, {1.0})) == doctest::Approx(0.6931471805599453).epsilon(1e-14));
  CHECK(bce_loss(Tensor({2}, {0.9, 0.1}), Tensor({2}, {1.0, 0.0})) ==
        doctest::Approx(0.10536051565782628).epsilon(1e-13));
  const double exact = bce_loss(Tensor({4}, {1.0, 0.0, 0.0, 1.0}), Tensor({4}, {1.0, 0.0, 0.0, 1.0}), 1e-7);
  CHECK(exact <= 1.2e-7);
  CHECK(exact > 0.0);
  CHECK_THROWS_AS(bce_loss(Tensor({2}, {0.5, 0.5}), Tensor({2}, {1.0, 2.0})), InputError);
  CHECK_THROWS_AS(bce_loss(Tensor({2}, {0.5, 1.5}), Tensor({2}, {1.0, 0.0})), InputError);
  CHECK_THROWS_AS(bce_loss(Tensor({2}, {0.5, 0.5}), Tensor({3}, {1.0, 0.0, 1.0})), ShapeError);
}

TEST_CASE("cross-entropy matches a per-pixel loop") {
  Rng rng(61);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor p = random_tensor({2, 1, 8, 9}, rng, 0.0, 1.0);
    const Tensor y = random_binary({2, 1, 8, 9}, rng);
    const double eps = trial % 2 ? 1e-7 : 1e-3;
    double acc = 0;
    for (size_t i = 0; i < p.numel(); ++i) {
      const double a = std::clamp(p[i], eps, 1 - eps), b = std::clamp(1 - p[i], eps, 1 - eps);
      acc += y[i] * std::log(a) + (1 - y[i]) * std::log(b);
    }
    CHECK(std::abs(bce_loss(p, y, eps) - (-acc / static_cast<double>(p.numel()))) <= 1e-12);
  }
}

TEST_CASE("confusion count examples") {
  const Tensor ones({100}, 1.0);
  CHECK(confusion_counts(ones, ones) == ConfusionCounts{100, 0, 0, 0});
  const Tensor gt({10}, {1, 1, 1, 1, 0, 0, 0, 0, 0, 0});
  Tensor pred({10});
  for (size_t i = 0; i < 10; ++i) pred[i] = 1.0 - gt[i];
  CHECK(confusion_counts(pred, gt) == ConfusionCounts{0, 6, 4, 0});
  CHECK_THROWS_AS(confusion_counts(Tensor({3}), Tensor({4})), PreconditionError);
  CHECK_THROWS_AS(confusion_counts(Tensor({2}, {0.0, 0.5}), Tensor({2})), InputError);
}

TEST_CASE("metric formula examples") {
  const Metrics m = metrics_from_counts({2, 1, 1, 0});
  CHECK(m.precision == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.recall == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(m.iou == 0.5);
  CHECK_FALSE(m.degenerate);

  const Metrics zero = metrics_from_counts({0, 0, 0, 50});
  CHECK(zero == Metrics{0, 0, 0, 0, true});
  const Metrics no_pred = metrics_from_counts({0, 0, 5, 5});
  CHECK(no_pred.recall == 0.0);
  CHECK(no_pred.precision == 0.0);
  CHECK(no_pred.degenerate);
}

TEST_CASE("published F1 and IoU pair satisfy the IoU identity") {
  // 2*9177 / (2*9177 + 1646) = 0.9177.
  const Metrics m = metrics_from_counts({9177, 823, 823, 0});
  CHECK(m.f1 == doctest::Approx(0.9177).epsilon(1e-15));
  CHECK(m.iou == doctest::Approx(0.8479164741753672).epsilon(1e-14));
  CHECK(std::abs(m.iou - 0.8480) <= 1e-4);
  CHECK(std::abs(0.9177 / (2 - 0.9177) - 0.8480) <= 1e-4);
}

TEST_CASE("metric identities on random counts") {
  Rng rng(62);
  std::uniform_int_distribution<int64_t> dist(0, 100000);
  int checked = 0;
  for (int i = 0; i < 1000; ++i) {
    const ConfusionCounts c{dist(rng) + 1, dist(rng), dist(rng), dist(rng)};
    const Metrics m = metrics_from_counts(c);
    REQUIRE_FALSE(m.degenerate);
    const double p = m.precision, r = m.recall;
    CHECK(std::abs(m.f1 - 2 * p * r / (p + r)) <= 1e-12);
    CHECK(std::abs(m.iou - m.f1 / (2 - m.f1)) <= 1e-12);
    ++checked;
  }
  CHECK(checked == 1000);
}

TEST_CASE("metrics agree with a per-pixel oracle on random masks") {
  Rng rng(63);
  std::uniform_int_distribution<int> side(1, 24);
  std::uniform_real_distribution<double> density(0.0, 1.0);
  ConfusionCounts total;
  for (int trial = 0; trial < 1000; ++trial) {
    const Shape s{1, 1, side(rng), side(rng)};
    const Tensor pred = random_binary(s, rng, density(rng)), gt = random_binary(s, rng, density(rng));
    int64_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (size_t i = 0; i < pred.numel(); ++i) {
      const bool p = pred[i] == 1.0, g = gt[i] == 1.0;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
      tn += !p && !g;
    }
    const ConfusionCounts c = confusion_counts(pred, gt);
    CHECK(c == ConfusionCounts{tp, fp, fn, tn});
    CHECK(c.total() == static_cast<int64_t>(pred.numel()));
    total += c;

    Metrics ref;
    const double dtp = static_cast<double>(tp);
    ref.precision = tp + fp ? dtp / static_cast<double>(tp + fp) : 0.0;
    ref.recall = tp + fn ? dtp / static_cast<double>(tp + fn) : 0.0;
    ref.f1 = 2 * tp + fp + fn ? 2 * dtp / static_cast<double>(2 * tp + fp + fn) : 0.0;
    ref.iou = tp + fp + fn ? dtp / static_cast<double>(tp + fp + fn) : 0.0;
    ref.degenerate = tp + fp == 0 || tp + fn == 0 || tp + fp + fn == 0;
    CHECK(metrics_from_counts(c) == ref);
  }
  CHECK(total.total() > 0);
}

TEST_CASE("metrics report schema") {
  const MetricsReport r = make_report({3, 1, 2, 10});
  const nlohmann::json j = report_to_json(r);
  CHECK(j.size() == 9);
  for (const char* key : {"f1", "iou", "precision", "recall", "tp", "fp", "fn", "tn", "degenerate"}) {
    CHECK(j.contains(key));
  }
  CHECK_NOTHROW(validate_report_json(j));
  const MetricsReport back = report_from_json(j);
  CHECK(back.counts == r.counts);
  CHECK(back.metrics == r.metrics);

  nlohmann::json extra = j;
  extra["accuracy"] = 0.5;
  CHECK_THROWS_AS(validate_report_json(extra), InputError);
  nlohmann::json missing = j;
  missing.erase("iou");
  CHECK_THROWS_WITH_AS(validate_report_json(missing), doctest::Contains("iou"), InputError);
  nlohmann::json typed = j;
  typed["tp"] = "three";
  CHECK_THROWS_WITH_AS(validate_report_json(typed), doctest::Contains("tp"), InputError);
}
