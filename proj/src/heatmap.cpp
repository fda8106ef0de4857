#include "dfpf/heatmap.hpp"

#include <algorithm>
#include <cmath>

#include "dfpf/errors.hpp"
#include "dfpf/ops.hpp"

namespace dfpf {

Tensor normalized_activation(const Tensor& features) {
  if (features.rank() != 4 || features.dim(0) != 1) {
    throw ShapeError("normalized_activation: expected [1,C,h,w], got " + shape_str(features.shape()));
  }
  const int64_t c = features.dim(1), h = features.dim(2), w = features.dim(3);
  Tensor map({1, 1, h, w});
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t i = 0; i < h * w; ++i) map[i] += features[ch * h * w + i] / static_cast<double>(c);
  }
  const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
  const double min = *lo, range = *hi - *lo;
  for (double& v : map.storage()) v = range > 0 ? (v - min) / range : 0.5;
  return map;
}

Image8 colorize_jet(const Tensor& map) {
  if (map.rank() < 2) throw ShapeError("colorize_jet: expected a 2-D map");
  Image8 img;
  img.channels = 3;
  img.height = static_cast<int>(map.dim(-2));
  img.width = static_cast<int>(map.dim(-1));
  img.pixels.resize(static_cast<size_t>(img.height) * img.width * 3);
  auto channel = [](double t, double center) { return std::clamp(1.5 - std::abs(4.0 * t - center), 0.0, 1.0); };
  for (size_t i = 0; i < map.numel(); ++i) {
    const double t = std::clamp(map[i], 0.0, 1.0);
    img.pixels[3 * i + 0] = static_cast<uint8_t>(std::lround(255 * channel(t, 3.0)));
    img.pixels[3 * i + 1] = static_cast<uint8_t>(std::lround(255 * channel(t, 2.0)));
    img.pixels[3 * i + 2] = static_cast<uint8_t>(std::lround(255 * channel(t, 1.0)));
  }
  return img;
}

namespace {

Tensor upscale(const Tensor& map, int64_t h, int64_t w) {
  NoGradGuard guard;
  return ops::upsample_bilinear(Var(map), h, w).value().reshaped({h, w});
}

}  // namespace

std::array<std::array<Tensor, kLevels>, kHeatmapStages> stage_activation_maps(const ChangeDetector& model,
                                                                                const BitemporalPair& pair) {
  validate_pair(pair);
  const Shape s = pair.image_a.shape();
  ForwardTrace t;
  {
    NoGradGuard guard;
    t = model.trace(Var(pair.image_a.reshaped({1, s[0], s[1], s[2]})), Var(pair.image_b.reshaped({1, s[0], s[1], s[2]})));
  }
  std::array<std::array<Tensor, kLevels>, kHeatmapStages> maps;
  for (int j = 0; j < kLevels; ++j) {
    Tensor enc = t.enc_a.levels[j].value();
    const Tensor& enc_b = t.enc_b.levels[j].value();
    for (size_t i = 0; i < enc.numel(); ++i) enc[i] = 0.5 * (enc[i] + enc_b[i]);
    const Var& shallow = t.fused[j].shallow.defined() ? t.fused[j].shallow : t.fused[j].deep;
    const Tensor* stage[kHeatmapStages] = {&enc, &shallow.value(), &t.fused[j].deep.value(), &t.focused[j].value()};
    for (int st = 0; st < kHeatmapStages; ++st) maps[st][j] = upscale(normalized_activation(*stage[st]), s[1], s[2]);
  }
  return maps;
}

std::vector<std::filesystem::path> emit_stage_heatmaps(const ChangeDetector& model, const BitemporalPair& pair,
                                                       const std::filesystem::path& out_dir) {
  const auto maps = stage_activation_maps(model, pair);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error("cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> paths;
  for (int st = 0; st < kHeatmapStages; ++st) {
    for (int j = 0; j < kLevels; ++j) {
      const auto path = out_dir / ("stage" + std::to_string(st) + "_level" + std::to_string(j + 1) + ".png");
      write_png(path, colorize_jet(maps[st][j]));
      paths.push_back(path);
    }
  }
  return paths;
}

std::vector<std::filesystem::path> emit_stage_heatmaps(const Checkpoint& ckpt, const BitemporalPair& pair,
                                                       const std::filesystem::path& out_dir) {
  return emit_stage_heatmaps(*instantiate(ckpt), pair, out_dir);
}

}  // namespace dfpf
