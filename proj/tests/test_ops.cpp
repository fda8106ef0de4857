#include <doctest.h>

#include <cmath>

#include "dfpf/errors.hpp"
#include "support.hpp"

using namespace dfpf;
using dfpf::testing::grad_check;
using dfpf::testing::max_abs_diff;
using dfpf::testing::random_tensor;

namespace {

Tensor conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t O = w.dim(0), K = w.dim(2);
  const int64_t oh = (H + 2 * pad - K) / stride + 1, ow = (W + 2 * pad - K) / stride + 1;
  Tensor out({B, O, oh, ow});
  for (int64_t n = 0; n < B; ++n)
    for (int64_t o = 0; o < O; ++o)
      for (int64_t i = 0; i < oh; ++i)
        for (int64_t j = 0; j < ow; ++j) {
          double acc = b.empty() ? 0.0 : b[o];
          for (int64_t c = 0; c < C; ++c)
            for (int64_t ki = 0; ki < K; ++ki)
              for (int64_t kj = 0; kj < K; ++kj) {
                const int64_t y = i * stride - pad + ki, xx = j * stride - pad + kj;
                if (y < 0 || y >= H || xx < 0 || xx >= W) continue;
                acc += x.at(n, c, y, xx) * w.at(o, c, ki, kj);
              }
          out.at(n, o, i, j) = acc;
        }
  return out;
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3, 4, 5}, 1.5);
  CHECK(t.numel() == 120);
  CHECK(t.dim(-1) == 5);
  CHECK(t.dim(-4) == 2);
  CHECK_THROWS_AS(t.reshaped({7, 7}), ShapeError);
  Tensor a({2, 2}, {1, 2, 3, 4}), b({2, 2}, {5, 6, 7, 8});
  std::vector<Tensor> items{a, b};
  Tensor s = stack(items);
  CHECK(s.shape() == Shape{2, 2, 2});
  CHECK(slice_batch(s, 1) == b);
}

TEST_CASE("autograd accumulates over shared uses and respects no-grad") {
  Var x(Tensor({3}, {1.0, -2.0, 3.0}), true);
  backward(ops::sum(ops::mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(-4.0));
  {
    NoGradGuard guard;
    Var y = ops::mul(x, x);
    CHECK(y.node()->inputs.empty());
  }
  CHECK(grad_enabled());
}

TEST_CASE("conv2d matches a nested-loop oracle and its gradient") {
  Rng rng(1);
  Var x(random_tensor({2, 3, 7, 6}, rng), true);
  Var w(random_tensor({4, 3, 3, 3}, rng), true);
  Var b(random_tensor({4}, rng), true);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      const Tensor got = ops::conv2d(x, w, b, stride, pad).value();
      CHECK(max_abs_diff(got, conv_oracle(x.value(), w.value(), b.value(), stride, pad)) < 1e-12);
    }
  }
  Var w1(random_tensor({5, 3, 1, 1}, rng), true);
  CHECK(max_abs_diff(ops::conv2d(x, w1, Var(), 1, 0).value(), conv_oracle(x.value(), w1.value(), Tensor(), 1, 0)) <
        1e-12);
  auto r = grad_check([&] { return ops::conv2d(x, w, b, 2, 1); }, {x, w, b}, rng);
  CHECK(r.rel_error < 1e-7);
  r = grad_check([&] { return ops::conv2d(x, w1, Var(), 1, 0); }, {x, w1}, rng);
  CHECK(r.rel_error < 1e-7);
}

TEST_CASE("conv2d rejects mismatched channels") {
  Var x(Tensor({1, 3, 4, 4}));
  Var w(Tensor({2, 2, 3, 3}));
  CHECK_THROWS_AS(ops::conv2d(x, w, Var(), 1, 1), ShapeError);
}

TEST_CASE("layer norm over channels") {
  Rng rng(2);
  Var x(random_tensor({2, 5, 3, 4}, rng, -3, 3), true);
  Var g(Tensor({5}, 1.0), true), b(Tensor({5}, 0.0), true);
  const Tensor y = ops::layer_norm_channels(x, g, b).value();
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 4; ++j) {
        double m = 0, v = 0;
        for (int64_t c = 0; c < 5; ++c) m += y.at(n, c, i, j) / 5;
        for (int64_t c = 0; c < 5; ++c) v += (y.at(n, c, i, j) - m) * (y.at(n, c, i, j) - m) / 5;
        CHECK(std::abs(m) < 1e-12);
        CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
      }
  g.mutable_value() = random_tensor({5}, rng);
  b.mutable_value() = random_tensor({5}, rng);
  CHECK(grad_check([&] { return ops::layer_norm_channels(x, g, b); }, {x, g, b}, rng).rel_error < 1e-7);
}

TEST_CASE("elementwise ops and their gradients") {
  Rng rng(3);
  Var a(random_tensor({2, 3, 4, 4}, rng), true), b(random_tensor({2, 3, 4, 4}, rng), true);
  Var w(random_tensor({2, 3, 1, 1}, rng), true);
  CHECK(grad_check([&] { return ops::mul(ops::add(a, b), ops::sub(a, b)); }, {a, b}, rng).rel_error < 1e-8);
  CHECK(grad_check([&] { return ops::sigmoid(ops::scale(a, 3.0)); }, {a}, rng).rel_error < 1e-8);
  CHECK(grad_check([&] { return ops::gelu(a); }, {a}, rng).rel_error < 1e-8);
  CHECK(grad_check([&] { return ops::abs(a); }, {a}, rng).rel_error < 1e-7);
  CHECK(grad_check([&] { return ops::relu(a); }, {a}, rng).rel_error < 1e-7);
  CHECK(grad_check([&] { return ops::mul_channel(a, w); }, {a, w}, rng).rel_error < 1e-8);
  CHECK(grad_check([&] { return ops::concat_channels({a, b, a}); }, {a, b}, rng).rel_error < 1e-8);

  // Reference values from the erf form of GELU.
  const Tensor g = ops::gelu(Var(Tensor({3}, {-1.0, 0.5, 2.0}))).value();
  CHECK(g[0] == doctest::Approx(-0.15865525393145702).epsilon(1e-12));
  CHECK(g[1] == doctest::Approx(0.34573123063700656).epsilon(1e-12));
  CHECK(g[2] == doctest::Approx(1.9544997361036416).epsilon(1e-12));
}

TEST_CASE("bilinear resampling follows half-pixel centres") {
  Var x(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}));
  const Tensor up = ops::upsample_bilinear(x, 4, 4).value();
  const std::vector<double> expected = {1.0, 1.25, 1.75, 2.0, 1.5,  1.75, 2.25, 2.5,
                                        2.5, 2.75, 3.25, 3.5, 3.0, 3.25, 3.75, 4.0};
  for (size_t i = 0; i < expected.size(); ++i) CHECK(up[i] == doctest::Approx(expected[i]).epsilon(1e-14));

  Tensor grid({1, 1, 3, 5});
  for (size_t i = 0; i < 15; ++i) grid[i] = static_cast<double>(i);
  const Tensor odd = ops::upsample_bilinear(Var(grid), 5, 7).value();
  CHECK(odd.at(0, 0, 0, 1) == doctest::Approx(0.5714285714285714).epsilon(1e-12));
  CHECK(odd.at(0, 0, 1, 2) == doctest::Approx(3.2857142857142856).epsilon(1e-12));
  CHECK(odd.at(0, 0, 4, 6) == doctest::Approx(14.0).epsilon(1e-12));

  const Tensor flat = ops::upsample_bilinear(Var(Tensor({1, 2, 3, 3}, 0.7)), 6, 6).value();
  for (double v : flat.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-14));

  Rng rng(4);
  Var y(random_tensor({1, 2, 3, 5}, rng), true);
  CHECK(grad_check([&] { return ops::upsample_bilinear(y, 6, 10); }, {y}, rng).rel_error < 1e-8);
  CHECK(grad_check([&] { return ops::upsample_bilinear(y, 5, 7); }, {y}, rng).rel_error < 1e-8);
}

TEST_CASE("adaptive average pooling") {
  Tensor grid({1, 1, 3, 5});
  for (size_t i = 0; i < 15; ++i) grid[i] = static_cast<double>(i);
  const Tensor p = ops::adaptive_avg_pool2d(Var(grid), 2, 3).value();
  const std::vector<double> expected = {3.0, 4.5, 6.0, 8.0, 9.5, 11.0};
  for (size_t i = 0; i < expected.size(); ++i) CHECK(p[i] == doctest::Approx(expected[i]).epsilon(1e-14));
  Rng rng(5);
  Var y(random_tensor({2, 3, 5, 7}, rng), true);
  CHECK(grad_check([&] { return ops::adaptive_avg_pool2d(y, 3, 2); }, {y}, rng).rel_error < 1e-8);
}

TEST_CASE("multi-head attention op matches the matrix oracle per head") {
  Rng rng(6);
  const int heads = 2, C = 6, nq = 10, nk = 7;
  Var q(random_tensor({1, C, nq}, rng), true), k(random_tensor({1, C, nk}, rng), true),
      v(random_tensor({1, C, nk}, rng), true);
  int matrices = 0;
  double worst_row = 0;
  Tensor out;
  {
    ops::ScopedAttentionObserver obs([&](const double* p, int64_t rows, int64_t cols) {
      ++matrices;
      for (int64_t r = 0; r < rows; ++r) {
        double s = 0;
        for (int64_t c = 0; c < cols; ++c) s += p[r * cols + c];
        worst_row = std::max(worst_row, std::abs(s - 1.0));
      }
    });
    out = ops::attention(q, k, v, heads).value();
  }
  CHECK(matrices == heads);
  CHECK(worst_row < 1e-12);
  const int dh = C / heads;
  for (int h = 0; h < heads; ++h) {
    Matrix Q(nq, dh), K(nk, dh), V(nk, dh);
    for (int c = 0; c < dh; ++c) {
      for (int i = 0; i < nq; ++i) Q(i, c) = q.value()[(h * dh + c) * nq + i];
      for (int j = 0; j < nk; ++j) {
        K(j, c) = k.value()[(h * dh + c) * nk + j];
        V(j, c) = v.value()[(h * dh + c) * nk + j];
      }
    }
    // Brute-force softmax(QK^T / sqrt(dh)) V.
    for (int i = 0; i < nq; ++i) {
      std::vector<double> logits(nk);
      double mx = -1e300, z = 0;
      for (int j = 0; j < nk; ++j) {
        double s = 0;
        for (int c = 0; c < dh; ++c) s += Q(i, c) * K(j, c);
        logits[j] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, logits[j]);
      }
      for (double& l : logits) z += (l = std::exp(l - mx));
      for (int c = 0; c < dh; ++c) {
        double o = 0;
        for (int j = 0; j < nk; ++j) o += logits[j] / z * V(j, c);
        CHECK(std::abs(out[(h * dh + c) * nq + i] - o) < 1e-12);
      }
    }
  }
  CHECK(grad_check([&] { return ops::attention(q, k, v, heads); }, {q, k, v}, rng).rel_error < 1e-7);
}

TEST_CASE("sobel op gradient") {
  Rng rng(7);
  Var x(random_tensor({1, 2, 6, 5}, rng), true);
  CHECK(grad_check([&] { return ops::sobel_magnitude(x); }, {x}, rng).rel_error < 1e-6);
}

TEST_CASE("binary cross-entropy") {
  // Hand values: -ln 0.5 and -ln 0.9.
  CHECK(ops::bce_loss(Var(Tensor({1}, {0.5})), Tensor({1}, {1.0}), 1e-7).value()[0] ==
        doctest::Approx(0.6931471805599453).epsilon(1e-14));
  CHECK(ops::bce_loss(Var(Tensor({2}, {0.9, 0.1})), Tensor({2}, {1.0, 0.0}), 1e-7).value()[0] ==
        doctest::Approx(0.10536051565782628).epsilon(1e-13));
  const double perfect = ops::bce_loss(Var(Tensor({2}, {1.0, 0.0})), Tensor({2}, {1.0, 0.0}), 1e-7).value()[0];
  CHECK(perfect <= 1.2e-7);
  CHECK_THROWS_AS(ops::bce_loss(Var(Tensor({1}, {0.5})), Tensor({1}, {0.3}), 1e-7), InputError);

  Rng rng(8);
  const Tensor y = dfpf::testing::random_binary({2, 1, 4, 4}, rng);
  Var z(random_tensor({2, 1, 4, 4}, rng, -4, 4), true);
  const double with_logits = ops::bce_with_logits(z, y, 1e-7).value()[0];
  const double via_probs = ops::bce_loss(ops::sigmoid(z), y, 1e-7).value()[0];
  CHECK(with_logits == doctest::Approx(via_probs).epsilon(1e-12));
  backward(ops::bce_with_logits(z, y, 1e-7));
  for (size_t i = 0; i < y.numel(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-z.value()[i]));
    CHECK(z.grad()[i] == doctest::Approx((p - y[i]) / 32.0).epsilon(1e-12));
  }
  Var probs(random_tensor({1, 1, 3, 3}, rng, 0.05, 0.95), true);
  const Tensor t = dfpf::testing::random_binary({1, 1, 3, 3}, rng);
  CHECK(grad_check([&] { return ops::bce_loss(probs, t, 1e-7); }, {probs}, rng).rel_error < 1e-7);
}

TEST_CASE("mac counter tallies convolutions exactly") {
  Var x(Tensor({2, 3, 8, 8}, 0.1));
  Var w(Tensor({4, 3, 3, 3}, 0.1));
  ops::MacCounter counter;
  ops::conv2d(x, w, Var(), 2, 1);
  CHECK(counter.count() == static_cast<uint64_t>(2 * 4 * 27 * 16));
}
