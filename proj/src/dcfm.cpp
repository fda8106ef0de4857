#include "dfpf/dcfm.hpp"

#include <algorithm>
#include <cmath>

#include "dfpf/errors.hpp"

namespace dfpf {

namespace {

void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) throw InputError(std::string(what) + " contains NaN or Inf");
}

void check_qkv(const Matrix& q, const Matrix& k, const Matrix& v) {
  if (q.cols() < 1) throw ShapeError("attention: d must be >= 1");
  if (q.cols() != k.cols()) throw ShapeError("attention: Q and K widths differ");
  if (k.rows() != v.rows()) throw ShapeError("attention: K and V token counts differ");
  if (k.rows() < 1) throw ShapeError("attention: no keys");
  check_finite(q, "Q");
  check_finite(k, "K");
  check_finite(v, "V");
}

int grid_side(int n) {
  int s = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (s * s != n) throw ConfigError("spatial agent pooling needs a square agent count, got " + std::to_string(n));
  return s;
}

std::pair<int64_t, int64_t> bin(int64_t i, int64_t in, int64_t out) {
  return {(i * in) / out, ((i + 1) * in + out - 1) / out};
}

}  // namespace

Matrix softmax_weights(const Matrix& q, const Matrix& k) {
  Matrix s = (q * k.transpose()) / std::sqrt(static_cast<double>(q.cols()));
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    double mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp();
    s.row(i) /= s.row(i).sum();
  }
  return s;
}

Matrix softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
  check_qkv(q, k, v);
  return softmax_weights(q, k) * v;
}

double apply_phi(PhiKernel phi, double x) {
  if (phi == PhiKernel::Softplus) return x > 30 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
  return std::max(x, 0.0) + 1.0;
}

Matrix linear_attention(const Matrix& q, const Matrix& k, const Matrix& v, PhiKernel phi) {
  check_qkv(q, k, v);
  Matrix pq = q.unaryExpr([phi](double x) { return apply_phi(phi, x); });
  Matrix pk = k.unaryExpr([phi](double x) { return apply_phi(phi, x); });
  Matrix kv = pk.transpose() * v;                  // d x dv
  Eigen::VectorXd ksum = pk.colwise().sum().transpose();  // d
  Matrix out = pq * kv;
  Eigen::VectorXd denom = pq * ksum;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    if (!(denom(i) > 0)) throw Error("linear_attention: non-positive normaliser");
    out.row(i) /= denom(i);
  }
  return out;
}

Matrix pool_agents(const Matrix& q, int n) {
  const int64_t rows = q.rows();
  if (n < 1 || n > rows) {
    throw PreconditionError("pool_agents: need 1 <= n <= N, got n=" + std::to_string(n) + ", N=" +
                            std::to_string(rows));
  }
  Matrix a(n, q.cols());
  for (int i = 0; i < n; ++i) {
    auto [lo, hi] = bin(i, rows, n);
    a.row(i) = q.middleRows(lo, hi - lo).colwise().mean();
  }
  return a;
}

Matrix pool_agents(const Matrix& q, int h, int w, int n) {
  if (static_cast<int64_t>(h) * w != q.rows()) throw ShapeError("pool_agents: grid does not match token count");
  const int side = grid_side(n);
  if (side > h || side > w) {
    throw PreconditionError("pool_agents: " + std::to_string(side) + "x" + std::to_string(side) +
                            " agent grid exceeds token grid");
  }
  Matrix a = Matrix::Zero(n, q.cols());
  for (int ay = 0; ay < side; ++ay)
    for (int ax = 0; ax < side; ++ax) {
      auto [y0, y1] = bin(ay, h, side);
      auto [x0, x1] = bin(ax, w, side);
      for (int64_t y = y0; y < y1; ++y)
        for (int64_t x = x0; x < x1; ++x) a.row(ay * side + ax) += q.row(y * w + x);
      a.row(ay * side + ax) /= static_cast<double>((y1 - y0) * (x1 - x0));
    }
  return a;
}

Matrix agent_attention_with_agents(const Matrix& q, const Matrix& k, const Matrix& v, const Matrix& agents,
                                   int heads) {
  check_qkv(q, k, v);
  if (agents.cols() != q.cols()) throw ShapeError("agent_attention: agent width differs from Q");
  if (heads < 1 || q.cols() % heads != 0 || v.cols() % heads != 0) {
    throw ConfigError("agent_attention: channel width not divisible by heads");
  }
  const Eigen::Index dq = q.cols() / heads, dv = v.cols() / heads;
  Matrix out(q.rows(), v.cols());
  for (int h = 0; h < heads; ++h) {
    Matrix qh = q.middleCols(h * dq, dq), kh = k.middleCols(h * dq, dq);
    Matrix vh = v.middleCols(h * dv, dv), ah = agents.middleCols(h * dq, dq);
    Matrix agent_values = softmax_attention(ah, kh, vh);
    out.middleCols(h * dv, dv) = softmax_attention(qh, ah, agent_values);
  }
  return out;
}

Matrix agent_attention(const Matrix& q, const Matrix& k, const Matrix& v, const AgentAttentionConfig& cfg) {
  cfg.validate(static_cast<int>(q.cols()));
  return agent_attention_with_agents(q, k, v, pool_agents(q, cfg.num_agents), cfg.heads);
}

Matrix agent_attention(const Matrix& q, const Matrix& k, const Matrix& v, int h, int w,
                       const AgentAttentionConfig& cfg) {
  cfg.validate(static_cast<int>(q.cols()));
  return agent_attention_with_agents(q, k, v, pool_agents(q, h, w, cfg.num_agents), cfg.heads);
}

Var sobel_magnitude(const Var& x) {
  if (x.value().rank() != 4) throw ShapeError("sobel_magnitude expects [B, C, H, W]");
  if (x.dim(2) < 3 || x.dim(3) < 3) {
    throw PreconditionError("sobel_magnitude needs H, W >= 3, got " + shape_str(x.shape()));
  }
  return ops::sobel_magnitude(x);
}

Tensor sobel_magnitude(const Tensor& x) {
  NoGradGuard guard;
  return sobel_magnitude(Var(x)).value();
}

int effective_agent_grid(int num_agents, int64_t h, int64_t w, int64_t* grid_h, int64_t* grid_w) {
  const int side = grid_side(num_agents);
  *grid_h = std::min<int64_t>(side, h);
  *grid_w = std::min<int64_t>(side, w);
  return static_cast<int>(*grid_h * *grid_w);
}

DcfmBlock::DcfmBlock(ParamStore& store, const std::string& name, int channels, const AgentAttentionConfig& attn,
                     DcfmVariant variant, Rng& rng)
    : attn_cfg_(attn), variant_(variant) {
  attn_cfg_.validate(channels);
  grid_side(attn_cfg_.num_agents);
  const bool bias = attn_cfg_.include_bias;
  int branches = 0;
  if (variant_ != DcfmVariant::Alpha) {
    norm_ = LayerNorm2d::create(store, name + ".norm", channels);
    q_ = Conv2d::create(store, name + ".q", channels, channels, 1, 1, 0, bias, Init::Projection, rng);
    k_ = Conv2d::create(store, name + ".k", channels, channels, 1, 1, 0, bias, Init::Projection, rng);
    v_ = Conv2d::create(store, name + ".v", channels, channels, 1, 1, 0, bias, Init::Projection, rng);
    proj_ = Conv2d::create(store, name + ".proj", channels, channels, 1, 1, 0, bias, Init::Projection, rng);
    ++branches;
  }
  if (variant_ != DcfmVariant::Beta) {
    edge_ = Conv2d::create(store, name + ".edge", channels, channels, 1, 1, 0, true, Init::Conv, rng);
    ++branches;
  }
  combine_ = Conv2d::create(store, name + ".combine", branches * channels, channels, 1, 1, 0, true, Init::Conv, rng);
}

Var DcfmBlock::attention_branch(const Var& x) const {
  if (!q_.defined()) throw ConfigError("DCFM block was built without the attention branch");
  Var t = norm_(x);
  Var query = q_(t);
  int64_t gh = 0, gw = 0;
  effective_agent_grid(attn_cfg_.num_agents, x.dim(2), x.dim(3), &gh, &gw);
  Var agents = ops::adaptive_avg_pool2d(query, gh, gw);
  Var agent_values = ops::attention(agents, k_(t), v_(t), attn_cfg_.heads);
  return proj_(ops::attention(query, agents, agent_values, attn_cfg_.heads));
}

Var DcfmBlock::edge_branch(const Var& x) const {
  if (!edge_.defined()) throw ConfigError("DCFM block was built without the edge branch");
  // Replicate padding keeps the magnitude defined on maps smaller than 3x3.
  return edge_(ops::sobel_magnitude(x));
}

Var DcfmBlock::operator()(const Var& x) const {
  Var gate_input;
  switch (variant_) {
    case DcfmVariant::Full:
      gate_input = ops::concat_channels({attention_branch(x), edge_branch(x)});
      break;
    case DcfmVariant::Alpha:
      gate_input = edge_branch(x);
      break;
    case DcfmVariant::Beta:
      gate_input = attention_branch(x);
      break;
  }
  return ops::add(x, ops::mul(ops::sigmoid(combine_(gate_input)), x));
}

Var DcfmBlock::forward(const Var& x, DcfmVariant variant) const {
  if (variant != variant_) {
    throw ConfigError("DCFM block built as '" + to_string(variant_) + "' cannot run as '" + to_string(variant) + "'");
  }
  return (*this)(x);
}

}  // namespace dfpf
