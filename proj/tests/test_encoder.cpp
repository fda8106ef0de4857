#include <doctest.h>

#include <cmath>

#include "dfpf/encoder.hpp"
#include "dfpf/errors.hpp"
#include "support.hpp"

using namespace dfpf;
using dfpf::testing::grad_check;
using dfpf::testing::max_abs_diff;
using dfpf::testing::random_tensor;

namespace {

// Applies a 1x1 conv to channel-major tokens [C, N] held in a matrix.
Matrix project(const Conv2d& conv, const Matrix& tokens) {
  const int64_t cout = conv.weight.dim(0), cin = conv.weight.dim(1);
  Matrix out(cout, tokens.cols());
  for (int64_t o = 0; o < cout; ++o)
    for (int64_t n = 0; n < tokens.cols(); ++n) {
      double acc = conv.bias.defined() ? conv.bias.value()[o] : 0.0;
      for (int64_t c = 0; c < cin; ++c) acc += conv.weight.value()[o * cin + c] * tokens(c, n);
      out(o, n) = acc;
    }
  return out;
}

void randomize(ParamStore& store, Rng& rng) {
  for (const auto& e : store.entries()) e.var.mutable_value() = random_tensor(e.var.shape(), rng, -0.5, 0.5);
}

std::vector<Var> all_params(const ParamStore& store) {
  std::vector<Var> out;
  for (const auto& e : store.entries()) out.push_back(e.var);
  return out;
}

void check_pyramid_shape(const FeaturePyramid& p, int64_t batch, int64_t size, const EncoderConfig& cfg) {
  for (int j = 0; j < kLevels; ++j) {
    CHECK(p.levels[j].shape() == Shape{batch, cfg.channels[j], size / kLevelStrides[j], size / kLevelStrides[j]});
  }
}

}  // namespace

TEST_CASE("spatial reduction attention without reduction matches a double-loop oracle") {
  Rng rng(11);
  ParamStore store;
  const int C = 4, heads = 2, h = 2, w = 4, N = h * w;
  auto attn = SpatialReductionAttention::create(store, "sra", C, heads, 1, rng);
  randomize(store, rng);
  const Tensor tokens = random_tensor({1, C, N}, rng);
  const Tensor out = spatial_reduction_attention(Var(tokens), h, w, attn).value();
  CHECK(out.shape() == Shape{1, C, N});

  Matrix x(C, N);
  for (int c = 0; c < C; ++c)
    for (int n = 0; n < N; ++n) x(c, n) = tokens[c * N + n];
  const Matrix Q = project(attn.q, x), K = project(attn.k, x), V = project(attn.v, x);
  Matrix mixed(C, N);
  const int dh = C / heads;
  for (int hd = 0; hd < heads; ++hd)
    for (int i = 0; i < N; ++i) {
      std::vector<double> wts(N);
      double z = 0;
      for (int j = 0; j < N; ++j) {
        double s = 0;
        for (int c = 0; c < dh; ++c) s += Q(hd * dh + c, i) * K(hd * dh + c, j);
        wts[j] = std::exp(s / std::sqrt(static_cast<double>(dh)));
        z += wts[j];
      }
      for (int c = 0; c < dh; ++c) {
        double acc = 0;
        for (int j = 0; j < N; ++j) acc += wts[j] / z * V(hd * dh + c, j);
        mixed(hd * dh + c, i) = acc;
      }
    }
  const Matrix expected = project(attn.proj, mixed);
  double worst = 0;
  for (int c = 0; c < C; ++c)
    for (int n = 0; n < N; ++n) worst = std::max(worst, std::abs(out[c * N + n] - expected(c, n)));
  CHECK(worst < 1e-6);
}

TEST_CASE("spatial reduction shrinks the key set and keeps rows stochastic") {
  Rng rng(12);
  for (int sr : {2, 4}) {
    ParamStore store;
    auto attn = SpatialReductionAttention::create(store, "sra", 8, 2, sr, rng);
    std::vector<int64_t> cols;
    double worst = 0;
    {
      ops::ScopedAttentionObserver obs([&](const double* p, int64_t rows, int64_t c) {
        cols.push_back(c);
        CHECK(rows == 64);
        for (int64_t r = 0; r < rows; ++r) {
          double s = 0;
          for (int64_t j = 0; j < c; ++j) {
            CHECK(p[r * c + j] >= 0.0);
            s += p[r * c + j];
          }
          worst = std::max(worst, std::abs(s - 1.0));
        }
      });
      const Var out = spatial_reduction_attention(Var(random_tensor({2, 8, 64}, rng)), 8, 8, attn);
      CHECK(out.shape() == Shape{2, 8, 64});
    }
    REQUIRE(!cols.empty());
    for (int64_t c : cols) CHECK(c == 64 / (sr * sr));
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("spatial reduction attention errors") {
  Rng rng(13);
  ParamStore store;
  auto attn = SpatialReductionAttention::create(store, "sra", 4, 1, 3, rng);
  CHECK_THROWS_AS(spatial_reduction_attention(Var(Tensor({1, 4, 16})), 4, 4, attn), ConfigError);
  CHECK_THROWS_AS(spatial_reduction_attention(Var(Tensor({1, 4, 15})), 4, 4, attn), ShapeError);
  CHECK_THROWS_AS(spatial_reduction_attention(Var(Tensor({1, 5, 16})), 4, 4, attn), ShapeError);
}

TEST_CASE("jointly permuting keys and values leaves attention unchanged") {
  Rng rng(14);
  const Tensor q = random_tensor({1, 4, 6}, rng), k = random_tensor({1, 4, 5}, rng),
               v = random_tensor({1, 4, 5}, rng);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  Tensor kp(k.shape()), vp(v.shape());
  for (int c = 0; c < 4; ++c)
    for (int j = 0; j < 5; ++j) {
      kp[c * 5 + j] = k[c * 5 + perm[j]];
      vp[c * 5 + j] = v[c * 5 + perm[j]];
    }
  const Tensor a = ops::attention(Var(q), Var(k), Var(v), 2).value();
  const Tensor b = ops::attention(Var(q), Var(kp), Var(vp), 2).value();
  CHECK(max_abs_diff(a, b) < 1e-14);
}

TEST_CASE("pyramid shapes follow the level strides") {
  const EncoderConfig cfg = EncoderConfig::tiny();
  Rng rng(15);
  ParamStore store;
  PyramidEncoder enc(cfg, store, rng);
  NoGradGuard guard;
  check_pyramid_shape(enc(Var(random_tensor({2, 3, 256, 256}, rng, 0, 1))), 2, 256, cfg);
  const Tensor img = random_tensor({1, 3, 128, 128}, rng, 0, 1);
  const FeaturePyramid p = encode_pyramid(Var(img), enc);
  check_pyramid_shape(p, 1, 128, cfg);
  const FeaturePyramid again = encode_pyramid(Var(img), enc);
  for (int j = 0; j < kLevels; ++j) CHECK(p.levels[j].value() == again.levels[j].value());
  const FeaturePyramid wide = enc(Var(random_tensor({1, 3, 64, 96}, rng, 0, 1)));
  CHECK(wide.levels[3].shape() == Shape{1, cfg.channels[3], 2, 3});
}

TEST_CASE("encoder rejects invalid image batches") {
  Rng rng(16);
  ParamStore store;
  PyramidEncoder enc(EncoderConfig::tiny(), store, rng);
  CHECK_THROWS_AS(enc(Var(Tensor({1, 3, 48, 64}))), PreconditionError);
  CHECK_THROWS_AS(enc(Var(Tensor({1, 3, 0, 0}))), PreconditionError);
  CHECK_THROWS_AS(enc(Var(Tensor({1, 1, 32, 32}))), PreconditionError);
  Tensor bad({1, 3, 32, 32});
  bad[5] = std::nan("");
  CHECK_THROWS_AS(enc(Var(bad)), PreconditionError);
  CHECK_THROWS_AS(siamese_encode(Var(Tensor({1, 3, 32, 32})), Var(Tensor({1, 3, 64, 32})), enc), PreconditionError);
}

TEST_CASE("encoder configuration is validated") {
  EncoderConfig cfg = EncoderConfig::tiny();
  cfg.heads[1] = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = EncoderConfig::tiny();
  cfg.sr_ratios = {2, 4, 2, 1};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("siamese encoding shares weights") {
  const EncoderConfig cfg = EncoderConfig::tiny();
  Rng rng(17);
  ParamStore single_store, siamese_store;
  PyramidEncoder single(cfg, single_store, rng);
  PyramidEncoder enc(cfg, siamese_store, rng);
  CHECK(single_store.total_size() == siamese_store.total_size());
  NoGradGuard guard;
  const Tensor a = random_tensor({1, 3, 64, 64}, rng, 0, 1), b = random_tensor({1, 3, 64, 64}, rng, 0, 1);
  auto [pa, pb] = siamese_encode(Var(a), Var(a), enc);
  for (int j = 0; j < kLevels; ++j) CHECK(pa.levels[j].value() == pb.levels[j].value());
  auto [xa, xb] = siamese_encode(Var(a), Var(b), enc);
  auto [ya, yb] = siamese_encode(Var(b), Var(a), enc);
  for (int j = 0; j < kLevels; ++j) {
    CHECK(xa.levels[j].value() == yb.levels[j].value());
    CHECK(xb.levels[j].value() == ya.levels[j].value());
  }
  const FeaturePyramid direct = enc(Var(b));
  for (int j = 0; j < kLevels; ++j) CHECK(direct.levels[j].value() == xb.levels[j].value());
}

TEST_CASE("transformer block gradient check at width 8 over 16 tokens") {
  Rng rng(18);
  ParamStore store;
  TransformerBlock blk;
  blk.norm1 = LayerNorm2d::create(store, "n1", 8);
  blk.attn = SpatialReductionAttention::create(store, "attn", 8, 2, 2, rng);
  blk.norm2 = LayerNorm2d::create(store, "n2", 8);
  blk.fc1 = Conv2d::create(store, "fc1", 8, 16, 1, 1, 0, true, Init::Projection, rng);
  blk.fc2 = Conv2d::create(store, "fc2", 16, 8, 1, 1, 0, true, Init::Projection, rng);
  randomize(store, rng);
  Var x(random_tensor({1, 8, 4, 4}, rng), true);
  std::vector<Var> wrt = all_params(store);
  wrt.push_back(x);
  const auto r = grad_check([&] { return blk(x); }, wrt, rng);
  CHECK(r.grad_norm > 0);
  CHECK(r.rel_error <= 1e-4);
}

TEST_CASE("whole encoder gradient check on a depth-one width-8 config") {
  EncoderConfig cfg;
  cfg.channels = {8, 8, 8, 8};
  cfg.depths = {1, 1, 1, 1};
  cfg.heads = {1, 2, 2, 2};
  cfg.sr_ratios = {2, 1, 1, 1};
  cfg.mlp_ratio = 2.0;
  Rng rng(19);
  ParamStore store;
  PyramidEncoder enc(cfg, store, rng);
  Var img(random_tensor({1, 3, 32, 32}, rng, 0, 1), true);
  std::vector<Var> wrt = all_params(store);
  wrt.push_back(img);
  // Sum of all four levels, so every stage contributes.
  auto f = [&] {
    FeaturePyramid p = enc(img);
    Var total = ops::sum(p.levels[0]);
    for (int j = 1; j < kLevels; ++j) total = ops::add(total, ops::sum(p.levels[j]));
    return total;
  };
  const auto r = grad_check(f, wrt, rng, 6);
  CHECK(r.grad_norm > 0);
  CHECK(r.rel_error <= 1e-4);
}
