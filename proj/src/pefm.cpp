#include "dfpf/pefm.hpp"

#include "dfpf/errors.hpp"

namespace dfpf {

namespace {

void require_equal(const Var& a, const Var& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw PreconditionError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
  }
}

void check_pyramids(const FeaturePyramid& p1, const FeaturePyramid& p2) {
  for (int j = 0; j < kLevels; ++j) {
    if (!p1.levels[j].defined() || !p2.levels[j].defined()) {
      throw PreconditionError("pyramid level " + std::to_string(j + 1) + " is missing");
    }
    const Shape& a = p1.levels[j].shape();
    const Shape& b = p2.levels[j].shape();
    if (a.size() != 4 || a != b) {
      throw PreconditionError("pyramid level " + std::to_string(j + 1) + " is not aligned: " + shape_str(a) +
                              " vs " + shape_str(b));
    }
  }
}

}  // namespace

Var preprocess_conv(const Var& x, const ConvNormAct& conv) {
  if (!x.value().all_finite()) throw InputError("preprocess_conv: non-finite input");
  return conv(x);
}

Var abs_difference(const Var& x1, const Var& x2) {
  require_equal(x1, x2, "abs_difference");
  return ops::abs(ops::sub(x2, x1));
}

Var shallow_fuse(const Var& x1, const Var& x2, const Var& diff, const ResidualBlock& r1) {
  require_equal(x1, x2, "shallow_fuse");
  require_equal(x1, diff, "shallow_fuse");
  return r1(ops::concat_channels({x1, x2, diff}));
}

std::pair<Var, Var> cross_interact(const Var& x1p, const Var& x2p, const Var& x1, const Var& x2) {
  require_equal(x1p, x2, "cross_interact");
  require_equal(x2p, x1, "cross_interact");
  require_equal(x1, x2, "cross_interact");
  return {ops::mul(x1p, x2), ops::mul(x2p, x1)};
}

Var deep_fuse(const Var& cross1, const Var& cross2, const Var& shallow, const ResidualBlock& r2) {
  require_equal(cross1, cross2, "deep_fuse");
  const Shape& a = cross1.shape();
  const Shape& s = shallow.shape();
  if (s.size() != 4 || s[0] != a[0] || s[2] != a[2] || s[3] != a[3]) {
    throw PreconditionError("deep_fuse: shallow map " + shape_str(s) + " incompatible with " + shape_str(a));
  }
  return r2(ops::concat_channels({cross1, cross2, shallow}));
}

PefmLevel PefmLevel::create(ParamStore& store, const std::string& name, int channels, Rng& rng) {
  PefmLevel l;
  l.pre1 = ConvNormAct::create(store, name + ".pre1", channels, channels, rng);
  l.pre2 = ConvNormAct::create(store, name + ".pre2", channels, channels, rng);
  l.r1 = ResidualBlock::create(store, name + ".r1", 3 * channels, channels, rng);
  l.r2 = ResidualBlock::create(store, name + ".r2", 3 * channels, channels, rng);
  return l;
}

FusedLevel PefmLevel::operator()(const Var& x1, const Var& x2, int level) const {
  Var x1p = preprocess_conv(x1, pre1);
  Var x2p = preprocess_conv(x2, pre2);
  Var shallow = shallow_fuse(x1, x2, abs_difference(x1, x2), r1);
  auto [cross1, cross2] = cross_interact(x1p, x2p, x1, x2);
  return {shallow, deep_fuse(cross1, cross2, shallow, r2), level};
}

Pefm::Pefm(const EncoderConfig& cfg, ParamStore& store, Rng& rng, const std::string& prefix) {
  for (int j = 0; j < kLevels; ++j) {
    levels_[j] = PefmLevel::create(store, prefix + ".level" + std::to_string(j + 1), cfg.channels[j], rng);
  }
}

std::array<FusedLevel, kLevels> Pefm::operator()(const FeaturePyramid& p1, const FeaturePyramid& p2) const {
  check_pyramids(p1, p2);
  std::array<FusedLevel, kLevels> out;
  for (int j = 0; j < kLevels; ++j) out[j] = levels_[j](p1.levels[j], p2.levels[j], j);
  return out;
}

ConcatFusion::ConcatFusion(const EncoderConfig& cfg, ParamStore& store, Rng& rng, const std::string& prefix) {
  for (int j = 0; j < kLevels; ++j) {
    const int c = cfg.channels[j];
    proj_[j] = Conv2d::create(store, prefix + ".level" + std::to_string(j + 1) + ".proj", 2 * c, c, 1, 1, 0, true,
                              Init::Conv, rng);
  }
}

std::array<FusedLevel, kLevels> ConcatFusion::operator()(const FeaturePyramid& p1, const FeaturePyramid& p2) const {
  check_pyramids(p1, p2);
  std::array<FusedLevel, kLevels> out;
  for (int j = 0; j < kLevels; ++j) {
    require_equal(p1.levels[j], p2.levels[j], "concat fusion");
    out[j] = {Var(), proj_[j](ops::concat_channels({p1.levels[j], p2.levels[j]})), j};
  }
  return out;
}

std::array<FusedLevel, kLevels> pefm_forward(const FeaturePyramid& p1, const FeaturePyramid& p2, const Pefm& pefm) {
  return pefm(p1, p2);
}

}  // namespace dfpf
