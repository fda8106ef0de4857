#include <doctest.h>

#include <cmath>

#include "dfpf/decoder.hpp"
#include "dfpf/errors.hpp"
#include "dfpf/metrics.hpp"
#include "dfpf/network.hpp"
#include "support.hpp"

using namespace dfpf;
using dfpf::testing::grad_check;
using dfpf::testing::max_abs_diff;
using dfpf::testing::random_tensor;

namespace {

void randomize(ParamStore& store, Rng& rng) {
  for (const auto& e : store.entries()) e.var.mutable_value() = random_tensor(e.var.shape(), rng, -0.5, 0.5);
}

std::vector<Var> random_levels(const ModelConfig& cfg, int64_t size, Rng& rng, bool grad) {
  std::vector<Var> levels;
  for (int j = 0; j < kLevels; ++j) {
    const int64_t s = size / kLevelStrides[j];
    levels.emplace_back(random_tensor({1, cfg.encoder.channels[j], s, s}, rng), grad);
  }
  return levels;
}

}  // namespace

TEST_CASE("upsample-align lifts the coarse map onto the fine grid") {
  Rng rng(51);
  ParamStore store;
  const UpsampleAlign up = UpsampleAlign::create(store, "up", 6, 4, rng);
  const Var low(random_tensor({2, 6, 3, 5}, rng)), high(random_tensor({2, 4, 6, 10}, rng));
  const Var out = up(low, high);
  CHECK(out.shape() == high.shape());
  const Tensor ref = up.proj(ops::upsample_bilinear(low, 6, 10)).value();
  CHECK(max_abs_diff(out.value(), ref) < 1e-12);

  const Tensor flat = up(Var(Tensor({1, 6, 2, 2}, 0.5)), Var(Tensor({1, 4, 4, 4}))).value();
  for (int64_t c = 0; c < 4; ++c) {
    double expected = up.proj.bias.value()[c];
    for (int64_t k = 0; k < 6; ++k) expected += 0.5 * up.proj.weight.value()[c * 6 + k];
    for (int64_t i = 0; i < 16; ++i) CHECK(std::abs(flat[c * 16 + i] - expected) < 1e-12);
  }
  CHECK_THROWS_AS(up(low, Var(Tensor({2, 4, 7, 10}))), PreconditionError);
  CHECK_THROWS_AS(up(low, Var(Tensor({2, 5, 6, 10}))), ShapeError);

  randomize(store, rng);
  Var l(random_tensor({1, 6, 2, 3}, rng), true), hi(Tensor({1, 4, 4, 6}), false);
  CHECK(grad_check([&] { return up(l, hi); }, {l, up.proj.weight, up.proj.bias}, rng).rel_error <= 1e-4);
}

TEST_CASE("attention-guided fusion blends with weights in the open unit interval") {
  Rng rng(52);
  ParamStore store;
  const AttentionGuidedFuse fuse = AttentionGuidedFuse::create(store, "fuse", 8, 4, rng);
  randomize(store, rng);
  const Var a(random_tensor({2, 8, 4, 4}, rng, -3, 3)), b(random_tensor({2, 8, 4, 4}, rng, -3, 3));
  const Tensor w = fuse.weights(a, b).value();
  CHECK(w.shape() == Shape{2, 8, 1, 1});
  for (double v : w.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
  const Tensor blended = fuse.blend(a, b).value();
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t c = 0; c < 8; ++c)
      for (int64_t i = 0; i < 16; ++i) {
        const size_t idx = static_cast<size_t>((n * 8 + c) * 16 + i);
        const double wt = w[n * 8 + c];
        CHECK(std::abs(blended[idx] - (wt * a.value()[idx] + (1 - wt) * b.value()[idx])) < 1e-12);
      }
  CHECK(fuse.blend(a, a).value() == a.value());
  CHECK(fuse(a, b).shape() == a.shape());
  CHECK_THROWS_AS(fuse(a, Var(Tensor({2, 8, 4, 5}))), PreconditionError);
}

TEST_CASE("attention-guided fusion gradient check") {
  Rng rng(53);
  ParamStore store;
  const AttentionGuidedFuse fuse = AttentionGuidedFuse::create(store, "fuse", 4, 2, rng);
  randomize(store, rng);
  Var a(random_tensor({1, 4, 4, 4}, rng), true), b(random_tensor({1, 4, 4, 4}, rng), true);
  std::vector<Var> wrt{a, b};
  for (const auto& e : store.entries()) wrt.push_back(e.var);
  const auto r = grad_check([&] { return fuse(a, b); }, wrt, rng);
  CHECK(r.grad_norm > 0);
  CHECK(r.rel_error <= 1e-4);
}

TEST_CASE("decoder produces full-resolution logits") {
  const ModelConfig cfg = ModelConfig::tiny();
  Rng rng(54);
  ParamStore store;
  const Decoder dec(cfg, store, rng);
  NoGradGuard guard;
  for (int64_t size : {32, 64, 256}) {
    const auto levels = random_levels(cfg, size, rng, false);
    const Tensor out = decode(levels, dec).value();
    CHECK(out.shape() == Shape{1, 1, size, size});
    CHECK(decode(levels, dec).value() == out);
  }
  const auto levels = random_levels(cfg, 64, rng, false);
  CHECK_THROWS_AS(dec(std::span<const Var>(levels.data(), 3)), PreconditionError);
  auto shuffled = levels;
  std::swap(shuffled[1], shuffled[2]);
  CHECK_THROWS_AS(dec(shuffled), PreconditionError);
}

TEST_CASE("every decoder input receives gradient") {
  const ModelConfig cfg = ModelConfig::tiny();
  Rng rng(55);
  ParamStore store;
  const Decoder dec(cfg, store, rng);
  const auto levels = random_levels(cfg, 64, rng, true);
  backward(ops::dot(dec(levels), random_tensor({1, 1, 64, 64}, rng)));
  for (const Var& l : levels) {
    REQUIRE(l.has_grad());
    double norm = 0;
    for (double g : l.grad().data()) norm += g * g;
    CHECK(norm > 0);
  }
  for (const auto& e : store.entries()) CHECK(e.var.has_grad());
}

TEST_CASE("decoder gradient check") {
  ModelConfig cfg = ModelConfig::tiny();
  cfg.encoder.channels = {4, 4, 4, 8};
  cfg.decoder_reduction = 2;
  Rng rng(56);
  ParamStore store;
  const Decoder dec(cfg, store, rng);
  randomize(store, rng);
  const auto levels = random_levels(cfg, 32, rng, true);
  std::vector<Var> wrt(levels.begin(), levels.end());
  for (const auto& e : store.entries()) wrt.push_back(e.var);
  const auto r = grad_check([&] { return dec(levels); }, wrt, rng, 10);
  CHECK(r.rel_error <= 1e-4);
}

TEST_CASE("whole tiny network gradient check") {
  const ModelConfig cfg = ModelConfig::tiny();
  ChangeDetector model(cfg, 5);
  Rng rng(57);
  Var a(random_tensor({1, 3, 64, 64}, rng, 0, 1), true), b(random_tensor({1, 3, 64, 64}, rng, 0, 1), true);
  std::vector<Var> wrt{a, b};
  for (const auto& e : model.params().entries()) wrt.push_back(e.var);
  const auto r = grad_check([&] { return model.logits(a, b); }, wrt, rng, 2);
  MESSAGE("whole-network relative error " << r.rel_error << " over " << r.coords << " coordinates");
  CHECK(r.grad_norm > 0);
  CHECK(r.rel_error <= 1e-3);
}

TEST_CASE("full forward returns probabilities at input size for every variant") {
  Rng rng(58);
  const Tensor a = random_tensor({1, 3, 256, 256}, rng, 0, 1), b = random_tensor({1, 3, 256, 256}, rng, 0, 1);
  std::vector<ModelConfig> configs(5, ModelConfig::tiny());
  configs[1].dcfm_variant = DcfmVariant::Alpha;
  configs[2].dcfm_variant = DcfmVariant::Beta;
  configs[3].use_pefm = false;
  configs[4].use_dcfm = false;
  for (const ModelConfig& cfg : configs) {
    const ChangeDetector model(cfg, 9);
    const Tensor probs = full_forward(model, a, b);
    CHECK(probs.shape() == Shape{1, 1, 256, 256});
    for (double p : probs.data()) {
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
    }
    const Tensor mask = binarize(probs, cfg.threshold);
    const ConfusionCounts counts = confusion_counts(mask, Tensor(mask.shape()));
    CHECK(counts.total() == 256 * 256);
  }
}

TEST_CASE("binarize thresholds inclusively") {
  const Tensor p({4}, {0.2, 0.5, 0.7, 0.4999});
  CHECK(binarize(p, 0.5) == Tensor({4}, {0.0, 1.0, 1.0, 0.0}));
}
