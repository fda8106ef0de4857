#include "dfpf/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "dfpf/errors.hpp"

namespace dfpf::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local uint64_t g_macs = 0;
thread_local AttentionObserver g_observer;

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Var& x, int rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

// Elementwise unary op from value and derivative functors.
template <class F, class D>
Var unary(const Var& a, F f, D df) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (size_t i = 0; i < av.numel(); ++i) out[i] = f(av[i]);
  return make_result(std::move(out), {a}, [a, df](const Tensor& g) {
    if (!a.requires_grad()) return;
    const Tensor& av = a.value();
    Tensor& ga = a.grad_buffer();
    for (size_t i = 0; i < av.numel(); ++i) ga[i] += g[i] * df(av[i]);
  });
}

double sigmoid_scalar(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

void im2col(const double* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int stride,
            int pad, int64_t oh, int64_t ow, double* cols) {
  for (int64_t ci = 0; ci < c; ++ci) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        double* row = cols + ((ci * kh + ki) * kw + kj) * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
          int64_t iy = oy * stride - pad + ki;
          double* dst = row + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0);
            continue;
          }
          const double* src = x + (ci * h + iy) * w;
          for (int64_t ox = 0; ox < ow; ++ox) {
            int64_t ix = ox * stride - pad + kj;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int stride,
            int pad, int64_t oh, int64_t ow, double* x) {
  for (int64_t ci = 0; ci < c; ++ci) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const double* row = cols + ((ci * kh + ki) * kw + kj) * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
          int64_t iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= h) continue;
          double* dst = x + (ci * h + iy) * w;
          const double* src = row + oy * ow;
          for (int64_t ox = 0; ox < ow; ++ox) {
            int64_t ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

struct ResampleAxis {
  std::vector<int64_t> i0, i1;
  std::vector<double> frac;
};

ResampleAxis bilinear_axis(int64_t in, int64_t out) {
  ResampleAxis ax;
  ax.i0.resize(out);
  ax.i1.resize(out);
  ax.frac.resize(out);
  double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double src = std::max(0.0, (static_cast<double>(o) + 0.5) * ratio - 0.5);
    int64_t lo = std::min<int64_t>(static_cast<int64_t>(std::floor(src)), in - 1);
    ax.i0[o] = lo;
    ax.i1[o] = std::min<int64_t>(lo + 1, in - 1);
    ax.frac[o] = src - static_cast<double>(lo);
  }
  return ax;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return make_result(std::move(out), {a, b}, [a, b](const Tensor& g) {
    for (const Var* v : {&a, &b}) {
      if (!v->requires_grad()) continue;
      Tensor& gv = v->grad_buffer();
      for (size_t i = 0; i < g.numel(); ++i) gv[i] += g[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return make_result(std::move(out), {a, b}, [a, b](const Tensor& g) {
    if (a.requires_grad()) {
      Tensor& ga = a.grad_buffer();
      for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      Tensor& gb = b.grad_buffer();
      for (size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return make_result(std::move(out), {a, b}, [a, b](const Tensor& g) {
    if (a.requires_grad()) {
      Tensor& ga = a.grad_buffer();
      const Tensor& bv = b.value();
      for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      Tensor& gb = b.grad_buffer();
      const Tensor& av = a.value();
      for (size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  return unary(a, [factor](double x) { return factor * x; }, [factor](double) { return factor; });
}

Var abs(const Var& a) {
  // Subgradient 0 at the kink.
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0 ? x : 0.0; }, [](double x) { return x > 0 ? 1.0 : 0.0; });
}

Var gelu(const Var& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

Var sigmoid(const Var& a) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (size_t i = 0; i < av.numel(); ++i) out[i] = sigmoid_scalar(av[i]);
  Tensor saved = out;
  return make_result(std::move(out), {a}, [a, saved = std::move(saved)](const Tensor& g) {
    if (!a.requires_grad()) return;
    Tensor& ga = a.grad_buffer();
    for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * saved[i] * (1.0 - saved[i]);
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_result(std::move(out), {a}, [a](const Tensor& g) {
    if (!a.requires_grad()) return;
    Tensor& ga = a.grad_buffer();
    for (size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

Var concat_channels(std::initializer_list<Var> parts) {
  return concat_channels(std::span<const Var>(parts.begin(), parts.size()));
}

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& first = parts[0].shape();
  if (first.size() < 2) throw ShapeError("concat_channels: rank < 2");
  int64_t batch = first[0];
  int64_t inner = 1;
  for (size_t i = 2; i < first.size(); ++i) inner *= first[i];
  int64_t total_c = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || s[0] != batch || !std::equal(s.begin() + 2, s.end(), first.begin() + 2)) {
      throw ShapeError("concat_channels: incompatible " + shape_str(s) + " vs " + shape_str(first));
    }
    total_c += s[1];
  }
  Shape out_shape = first;
  out_shape[1] = total_c;
  Tensor out(out_shape);
  std::vector<Var> inputs(parts.begin(), parts.end());
  int64_t offset = 0;
  for (const auto& p : parts) {
    int64_t c = p.shape()[1];
    for (int64_t b = 0; b < batch; ++b) {
      const double* src = p.value().ptr() + b * c * inner;
      std::copy(src, src + c * inner, out.ptr() + (b * total_c + offset) * inner);
    }
    offset += c;
  }
  return make_result(std::move(out), inputs, [inputs, batch, inner, total_c](const Tensor& g) {
    int64_t offset = 0;
    for (const auto& p : inputs) {
      int64_t c = p.shape()[1];
      if (p.requires_grad()) {
        Tensor& gp = p.grad_buffer();
        for (int64_t b = 0; b < batch; ++b) {
          const double* src = g.ptr() + (b * total_c + offset) * inner;
          double* dst = gp.ptr() + b * c * inner;
          for (int64_t i = 0; i < c * inner; ++i) dst[i] += src[i];
        }
      }
      offset += c;
    }
  });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  const int64_t batch = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const int64_t cout = ws[0], kh = ws[2], kw = ws[3];
  if (ws[1] != cin) {
    throw ShapeError("conv2d: input has " + std::to_string(cin) + " channels, weight expects " +
                     std::to_string(ws[1]));
  }
  if (bias.defined() && bias.shape() != Shape{cout}) throw ShapeError("conv2d: bias shape");
  if (stride < 1 || pad < 0) throw PreconditionError("conv2d: stride >= 1 and pad >= 0 required");
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (w + 2 * pad - kw) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: kernel larger than padded input " + shape_str(xs));
  const int64_t k = cin * kh * kw;
  const int64_t p = oh * ow;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

  Storage cols;
  if (!pointwise) {
    cols.resize(static_cast<size_t>(batch * k * p));
    for (int64_t b = 0; b < batch; ++b) {
      im2col(x.value().ptr() + b * cin * h * w, cin, h, w, kh, kw, stride, pad, oh, ow,
             cols.data() + b * k * p);
    }
  }
  Tensor out({batch, cout, oh, ow});
  CMapMat wm(weight.value().ptr(), cout, k);
  for (int64_t b = 0; b < batch; ++b) {
    const double* colp = pointwise ? x.value().ptr() + b * k * p : cols.data() + b * k * p;
    MapMat om(out.ptr() + b * cout * p, cout, p);
    om.noalias() = wm * CMapMat(colp, k, p);
    if (bias.defined()) {
      for (int64_t c = 0; c < cout; ++c) om.row(c).array() += bias.value()[c];
    }
  }
  g_macs += static_cast<uint64_t>(batch * cout * k * p);

  return make_result(
      std::move(out), {x, weight, bias},
      [x, weight, bias, cols = std::move(cols), batch, cin, h, w, cout, kh, kw, oh, ow, k, p, stride,
       pad, pointwise](const Tensor& g) {
        CMapMat wm(weight.value().ptr(), cout, k);
        Storage gcols;
        if (x.requires_grad() && !pointwise) gcols.resize(static_cast<size_t>(k * p));
        for (int64_t b = 0; b < batch; ++b) {
          CMapMat gm(g.ptr() + b * cout * p, cout, p);
          const double* colp = pointwise ? x.value().ptr() + b * k * p : cols.data() + b * k * p;
          if (weight.requires_grad()) {
            MapMat gw(weight.grad_buffer().ptr(), cout, k);
            gw.noalias() += gm * CMapMat(colp, k, p).transpose();
          }
          if (bias.defined() && bias.requires_grad()) {
            Tensor& gb = bias.grad_buffer();
            for (int64_t c = 0; c < cout; ++c) gb[c] += gm.row(c).sum();
          }
          if (x.requires_grad()) {
            double* gx = x.grad_buffer().ptr() + b * cin * h * w;
            if (pointwise) {
              MapMat(gx, k, p).noalias() += wm.transpose() * gm;
            } else {
              MapMat(gcols.data(), k, p).noalias() = wm.transpose() * gm;
              col2im(gcols.data(), cin, h, w, kh, kw, stride, pad, oh, ow, gx);
            }
          }
        }
      });
}

Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Shape& xs = x.shape();
  if (xs.size() < 2) throw ShapeError("layer_norm_channels: rank < 2");
  const int64_t batch = xs[0], c = xs[1];
  const int64_t p = static_cast<int64_t>(x.value().numel()) / std::max<int64_t>(1, batch * c);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layer_norm_channels: affine parameters must have shape [" + std::to_string(c) + "]");
  }
  Tensor out(xs);
  Tensor xhat(xs);
  std::vector<double> rstd(static_cast<size_t>(batch * p));
  std::vector<double> mu(static_cast<size_t>(p)), var(static_cast<size_t>(p));
  const double inv_c = 1.0 / static_cast<double>(c);
  for (int64_t b = 0; b < batch; ++b) {
    const double* xb = x.value().ptr() + b * c * p;
    std::fill(mu.begin(), mu.end(), 0.0);
    std::fill(var.begin(), var.end(), 0.0);
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t i = 0; i < p; ++i) mu[i] += xb[ci * p + i];
    for (int64_t i = 0; i < p; ++i) mu[i] *= inv_c;
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t i = 0; i < p; ++i) {
        double d = xb[ci * p + i] - mu[i];
        var[i] += d * d;
      }
    double* rs = rstd.data() + b * p;
    for (int64_t i = 0; i < p; ++i) rs[i] = 1.0 / std::sqrt(var[i] * inv_c + eps);
    double* xh = xhat.ptr() + b * c * p;
    double* ob = out.ptr() + b * c * p;
    for (int64_t ci = 0; ci < c; ++ci) {
      const double gm = gamma.value()[ci], bt = beta.value()[ci];
      for (int64_t i = 0; i < p; ++i) {
        double v = (xb[ci * p + i] - mu[i]) * rs[i];
        xh[ci * p + i] = v;
        ob[ci * p + i] = v * gm + bt;
      }
    }
  }
  return make_result(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), batch, c, p](const Tensor& g) {
        if (gamma.requires_grad() || beta.requires_grad()) {
          Tensor& gg = gamma.grad_buffer();
          Tensor& gb = beta.grad_buffer();
          for (int64_t b = 0; b < batch; ++b)
            for (int64_t ci = 0; ci < c; ++ci) {
              const double* gr = g.ptr() + (b * c + ci) * p;
              const double* xh = xhat.ptr() + (b * c + ci) * p;
              double sg = 0, sgx = 0;
              for (int64_t i = 0; i < p; ++i) {
                sg += gr[i];
                sgx += gr[i] * xh[i];
              }
              gg[ci] += sgx;
              gb[ci] += sg;
            }
        }
        if (!x.requires_grad()) return;
        Tensor& gx = x.grad_buffer();
        const double inv_c = 1.0 / static_cast<double>(c);
        std::vector<double> m1(static_cast<size_t>(p)), m2(static_cast<size_t>(p));
        for (int64_t b = 0; b < batch; ++b) {
          std::fill(m1.begin(), m1.end(), 0.0);
          std::fill(m2.begin(), m2.end(), 0.0);
          for (int64_t ci = 0; ci < c; ++ci) {
            const double gm = gamma.value()[ci];
            const double* gr = g.ptr() + (b * c + ci) * p;
            const double* xh = xhat.ptr() + (b * c + ci) * p;
            for (int64_t i = 0; i < p; ++i) {
              double d = gr[i] * gm;
              m1[i] += d;
              m2[i] += d * xh[i];
            }
          }
          const double* rs = rstd.data() + b * p;
          for (int64_t ci = 0; ci < c; ++ci) {
            const double gm = gamma.value()[ci];
            const double* gr = g.ptr() + (b * c + ci) * p;
            const double* xh = xhat.ptr() + (b * c + ci) * p;
            double* dst = gx.ptr() + (b * c + ci) * p;
            for (int64_t i = 0; i < p; ++i) {
              double d = gr[i] * gm;
              dst[i] += rs[i] * (d - m1[i] * inv_c - xh[i] * m2[i] * inv_c);
            }
          }
        }
      });
}

Var mul_channel(const Var& x, const Var& w) {
  require_rank(x, 4, "mul_channel");
  const Shape& xs = x.shape();
  if (w.shape() != Shape{xs[0], xs[1], 1, 1}) {
    throw ShapeError("mul_channel: weights " + shape_str(w.shape()) + " do not match " + shape_str(xs));
  }
  const int64_t bc = xs[0] * xs[1], p = xs[2] * xs[3];
  Tensor out = x.value();
  for (int64_t i = 0; i < bc; ++i)
    for (int64_t j = 0; j < p; ++j) out[i * p + j] *= w.value()[i];
  return make_result(std::move(out), {x, w}, [x, w, bc, p](const Tensor& g) {
    if (x.requires_grad()) {
      Tensor& gx = x.grad_buffer();
      for (int64_t i = 0; i < bc; ++i)
        for (int64_t j = 0; j < p; ++j) gx[i * p + j] += g[i * p + j] * w.value()[i];
    }
    if (w.requires_grad()) {
      Tensor& gw = w.grad_buffer();
      for (int64_t i = 0; i < bc; ++i) {
        double s = 0;
        for (int64_t j = 0; j < p; ++j) s += g[i * p + j] * x.value()[i * p + j];
        gw[i] += s;
      }
    }
  });
}

Var adaptive_avg_pool2d(const Var& x, int64_t out_h, int64_t out_w) {
  require_rank(x, 4, "adaptive_avg_pool2d");
  const Shape& xs = x.shape();
  const int64_t bc = xs[0] * xs[1], h = xs[2], w = xs[3];
  if (out_h < 1 || out_w < 1 || out_h > h || out_w > w) {
    throw PreconditionError("adaptive_avg_pool2d: output " + std::to_string(out_h) + "x" +
                            std::to_string(out_w) + " must be within input " + shape_str(xs));
  }
  auto edges = [](int64_t in, int64_t out) {
    std::vector<std::pair<int64_t, int64_t>> e(static_cast<size_t>(out));
    for (int64_t i = 0; i < out; ++i) e[i] = {(i * in) / out, ((i + 1) * in + out - 1) / out};
    return e;
  };
  auto ey = edges(h, out_h), ex = edges(w, out_w);
  Tensor out({xs[0], xs[1], out_h, out_w});
  for (int64_t i = 0; i < bc; ++i) {
    const double* src = x.value().ptr() + i * h * w;
    for (int64_t oy = 0; oy < out_h; ++oy)
      for (int64_t ox = 0; ox < out_w; ++ox) {
        double s = 0;
        for (int64_t y = ey[oy].first; y < ey[oy].second; ++y)
          for (int64_t xx = ex[ox].first; xx < ex[ox].second; ++xx) s += src[y * w + xx];
        double n = static_cast<double>((ey[oy].second - ey[oy].first) * (ex[ox].second - ex[ox].first));
        out[(i * out_h + oy) * out_w + ox] = s / n;
      }
  }
  return make_result(std::move(out), {x}, [x, ey, ex, bc, h, w, out_h, out_w](const Tensor& g) {
    if (!x.requires_grad()) return;
    Tensor& gx = x.grad_buffer();
    for (int64_t i = 0; i < bc; ++i)
      for (int64_t oy = 0; oy < out_h; ++oy)
        for (int64_t ox = 0; ox < out_w; ++ox) {
          double n = static_cast<double>((ey[oy].second - ey[oy].first) * (ex[ox].second - ex[ox].first));
          double v = g[(i * out_h + oy) * out_w + ox] / n;
          for (int64_t y = ey[oy].first; y < ey[oy].second; ++y)
            for (int64_t xx = ex[ox].first; xx < ex[ox].second; ++xx) gx[i * h * w + y * w + xx] += v;
        }
  });
}

Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w) {
  require_rank(x, 4, "upsample_bilinear");
  if (out_h < 1 || out_w < 1) throw PreconditionError("upsample_bilinear: empty output");
  const Shape& xs = x.shape();
  const int64_t bc = xs[0] * xs[1], h = xs[2], w = xs[3];
  ResampleAxis ay = bilinear_axis(h, out_h), ax = bilinear_axis(w, out_w);
  Tensor out({xs[0], xs[1], out_h, out_w});
  for (int64_t i = 0; i < bc; ++i) {
    const double* src = x.value().ptr() + i * h * w;
    double* dst = out.ptr() + i * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const double fy = ay.frac[oy];
      const double* r0 = src + ay.i0[oy] * w;
      const double* r1 = src + ay.i1[oy] * w;
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const double fx = ax.frac[ox];
        double top = r0[ax.i0[ox]] * (1 - fx) + r0[ax.i1[ox]] * fx;
        double bot = r1[ax.i0[ox]] * (1 - fx) + r1[ax.i1[ox]] * fx;
        dst[oy * out_w + ox] = top * (1 - fy) + bot * fy;
      }
    }
  }
  return make_result(std::move(out), {x}, [x, ay, ax, bc, h, w, out_h, out_w](const Tensor& g) {
    if (!x.requires_grad()) return;
    Tensor& gx = x.grad_buffer();
    for (int64_t i = 0; i < bc; ++i) {
      double* dst = gx.ptr() + i * h * w;
      const double* src = g.ptr() + i * out_h * out_w;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        const double fy = ay.frac[oy];
        double* r0 = dst + ay.i0[oy] * w;
        double* r1 = dst + ay.i1[oy] * w;
        for (int64_t ox = 0; ox < out_w; ++ox) {
          const double fx = ax.frac[ox];
          const double v = src[oy * out_w + ox];
          r0[ax.i0[ox]] += v * (1 - fy) * (1 - fx);
          r0[ax.i1[ox]] += v * (1 - fy) * fx;
          r1[ax.i0[ox]] += v * fy * (1 - fx);
          r1[ax.i1[ox]] += v * fy * fx;
        }
      }
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads) {
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  if (qs.size() < 3 || ks.size() < 3) throw ShapeError("attention: inputs must be [B, C, N, ...]");
  require_same_shape(k, v, "attention k/v");
  const int64_t batch = qs[0], c = qs[1];
  if (ks[0] != batch || ks[1] != c) {
    throw ShapeError("attention: q " + shape_str(qs) + " incompatible with k " + shape_str(ks));
  }
  if (heads < 1 || c % heads != 0) {
    throw ShapeError("attention: " + std::to_string(c) + " channels not divisible by " +
                     std::to_string(heads) + " heads");
  }
  if (!q.value().all_finite() || !k.value().all_finite() || !v.value().all_finite()) {
    throw InputError("attention: non-finite input");
  }
  const int64_t nq = static_cast<int64_t>(q.value().numel()) / (batch * c);
  const int64_t nk = static_cast<int64_t>(k.value().numel()) / (batch * c);
  const int64_t dh = c / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out(qs);
  Storage probs(static_cast<size_t>(batch * heads * nq * nk));
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t hd = 0; hd < heads; ++hd) {
      CMapMat qh(q.value().ptr() + (b * c + hd * dh) * nq, dh, nq);
      CMapMat kh(k.value().ptr() + (b * c + hd * dh) * nk, dh, nk);
      CMapMat vh(v.value().ptr() + (b * c + hd * dh) * nk, dh, nk);
      MapMat pm(probs.data() + (b * heads + hd) * nq * nk, nq, nk);
      pm.noalias() = qh.transpose() * kh;
      pm *= scale_factor;
      for (int64_t i = 0; i < nq; ++i) {
        auto row = pm.row(i);
        double mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      if (g_observer) g_observer(pm.data(), nq, nk);
      MapMat(out.ptr() + (b * c + hd * dh) * nq, dh, nq).noalias() = vh * pm.transpose();
    }
  }
  g_macs += static_cast<uint64_t>(2 * batch * heads * nq * nk * dh);

  return make_result(
      std::move(out), {q, k, v},
      [q, k, v, probs = std::move(probs), batch, heads, c, nq, nk, dh, scale_factor](const Tensor& g) {
        RowMat dp(nq, nk);
        for (int64_t b = 0; b < batch; ++b) {
          for (int64_t hd = 0; hd < heads; ++hd) {
            const int64_t qoff = (b * c + hd * dh) * nq;
            const int64_t koff = (b * c + hd * dh) * nk;
            CMapMat pm(probs.data() + (b * heads + hd) * nq * nk, nq, nk);
            CMapMat go(g.ptr() + qoff, dh, nq);
            CMapMat vh(v.value().ptr() + koff, dh, nk);
            if (v.requires_grad()) MapMat(v.grad_buffer().ptr() + koff, dh, nk).noalias() += go * pm;
            if (!q.requires_grad() && !k.requires_grad()) continue;
            dp.noalias() = go.transpose() * vh;
            for (int64_t i = 0; i < nq; ++i) {
              double s = pm.row(i).dot(dp.row(i));
              dp.row(i) = pm.row(i).array() * (dp.row(i).array() - s);
            }
            dp *= scale_factor;
            if (q.requires_grad()) {
              CMapMat kh(k.value().ptr() + koff, dh, nk);
              MapMat(q.grad_buffer().ptr() + qoff, dh, nq).noalias() += kh * dp.transpose();
            }
            if (k.requires_grad()) {
              CMapMat qh(q.value().ptr() + qoff, dh, nq);
              MapMat(k.grad_buffer().ptr() + koff, dh, nk).noalias() += qh * dp;
            }
          }
        }
      });
}

Var sobel_magnitude(const Var& x) {
  require_rank(x, 4, "sobel_magnitude");
  const Shape& xs = x.shape();
  const int64_t bc = xs[0] * xs[1], h = xs[2], w = xs[3];
  // Cross-correlation kernels: gx = right - left, gy = bottom - top.
  static constexpr double kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static constexpr double ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  Tensor out(xs);
  std::vector<double> gxs(out.numel()), gys(out.numel());
  auto clamp_idx = [](int64_t i, int64_t n) { return std::clamp<int64_t>(i, 0, n - 1); };
  for (int64_t i = 0; i < bc; ++i) {
    const double* src = x.value().ptr() + i * h * w;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t xx = 0; xx < w; ++xx) {
        // Differences first, so a flat neighbourhood gives exactly zero.
        auto at = [&](int dy, int dx) { return src[clamp_idx(y + dy, h) * w + clamp_idx(xx + dx, w)]; };
        const double gx = (at(-1, 1) - at(-1, -1)) + 2 * (at(0, 1) - at(0, -1)) + (at(1, 1) - at(1, -1));
        const double gy = (at(1, -1) - at(-1, -1)) + 2 * (at(1, 0) - at(-1, 0)) + (at(1, 1) - at(-1, 1));
        size_t idx = static_cast<size_t>(i * h * w + y * w + xx);
        gxs[idx] = gx;
        gys[idx] = gy;
        out[idx] = std::sqrt(gx * gx + gy * gy);
      }
  }
  g_macs += static_cast<uint64_t>(18 * bc * h * w);
  Tensor mag = out;
  return make_result(
      std::move(out), {x},
      [x, gxs = std::move(gxs), gys = std::move(gys), mag = std::move(mag), bc, h, w,
       clamp_idx](const Tensor& g) {
        if (!x.requires_grad()) return;
        Tensor& gin = x.grad_buffer();
        for (int64_t i = 0; i < bc; ++i) {
          double* dst = gin.ptr() + i * h * w;
          for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx) {
              size_t idx = static_cast<size_t>(i * h * w + y * w + xx);
              if (mag[idx] <= 0) continue;
              double dgx = g[idx] * gxs[idx] / mag[idx];
              double dgy = g[idx] * gys[idx] / mag[idx];
              for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                  dst[clamp_idx(y + dy, h) * w + clamp_idx(xx + dx, w)] +=
                      kx[dy + 1][dx + 1] * dgx + ky[dy + 1][dx + 1] * dgy;
                }
            }
        }
      });
}

Var sum(const Var& x) {
  double s = 0;
  for (double v : x.value().data()) s += v;
  return make_result(Tensor({1}, {s}), {x}, [x](const Tensor& g) {
    if (!x.requires_grad()) return;
    Tensor& gx = x.grad_buffer();
    for (size_t i = 0; i < gx.numel(); ++i) gx[i] += g[0];
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().numel());
  return scale(sum(x), 1.0 / n);
}

Var dot(const Var& x, const Tensor& w) {
  if (x.shape() != w.shape()) throw ShapeError("dot: shape mismatch");
  double s = 0;
  for (size_t i = 0; i < w.numel(); ++i) s += x.value()[i] * w[i];
  return make_result(Tensor({1}, {s}), {x}, [x, w](const Tensor& g) {
    if (!x.requires_grad()) return;
    Tensor& gx = x.grad_buffer();
    for (size_t i = 0; i < gx.numel(); ++i) gx[i] += g[0] * w[i];
  });
}

namespace {

void check_binary_target(const Tensor& target) {
  for (double y : target.data()) {
    if (y != 0.0 && y != 1.0) throw InputError("bce: target values must be 0 or 1");
  }
}

double bce_term(double p, double y, double eps) {
  double pc = std::clamp(p, eps, 1.0 - eps);
  double qc = std::clamp(1.0 - p, eps, 1.0 - eps);
  return -(y * std::log(pc) + (1.0 - y) * std::log(qc));
}

}  // namespace

Var bce_loss(const Var& probs, const Tensor& target, double eps) {
  if (probs.shape() != target.shape()) throw ShapeError("bce_loss: shape mismatch");
  if (!(eps > 0)) throw PreconditionError("bce_loss: eps must be positive");
  check_binary_target(target);
  const Tensor& p = probs.value();
  double s = 0;
  for (size_t i = 0; i < p.numel(); ++i) s += bce_term(p[i], target[i], eps);
  const double n = static_cast<double>(p.numel());
  return make_result(Tensor({1}, {s / n}), {probs}, [probs, target, eps, n](const Tensor& g) {
    if (!probs.requires_grad()) return;
    Tensor& gp = probs.grad_buffer();
    const Tensor& p = probs.value();
    for (size_t i = 0; i < p.numel(); ++i) {
      if (p[i] < eps || p[i] > 1.0 - eps) continue;
      double y = target[i];
      gp[i] += g[0] * (-y / p[i] + (1.0 - y) / (1.0 - p[i])) / n;
    }
  });
}

Var bce_with_logits(const Var& logits, const Tensor& target, double eps) {
  if (logits.shape() != target.shape()) throw ShapeError("bce_with_logits: shape mismatch");
  if (!(eps > 0)) throw PreconditionError("bce_with_logits: eps must be positive");
  check_binary_target(target);
  const Tensor& z = logits.value();
  std::vector<double> probs(z.numel());
  double s = 0;
  for (size_t i = 0; i < z.numel(); ++i) {
    probs[i] = sigmoid_scalar(z[i]);
    s += bce_term(probs[i], target[i], eps);
  }
  const double n = static_cast<double>(z.numel());
  return make_result(Tensor({1}, {s / n}), {logits},
                     [logits, target, probs = std::move(probs), n](const Tensor& g) {
                       if (!logits.requires_grad()) return;
                       Tensor& gz = logits.grad_buffer();
                       for (size_t i = 0; i < probs.size(); ++i) gz[i] += g[0] * (probs[i] - target[i]) / n;
                     });
}

MacCounter::MacCounter() : start_(g_macs) {}
MacCounter::~MacCounter() = default;
uint64_t MacCounter::count() const { return g_macs - start_; }

ScopedAttentionObserver::ScopedAttentionObserver(AttentionObserver observer)
    : previous_(std::move(g_observer)) {
  g_observer = std::move(observer);
}
ScopedAttentionObserver::~ScopedAttentionObserver() { g_observer = std::move(previous_); }

}  // namespace dfpf::ops
