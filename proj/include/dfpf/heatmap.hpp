#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "dfpf/checkpoint.hpp"
#include "dfpf/data.hpp"
#include "dfpf/image_io.hpp"
#include "dfpf/network.hpp"

namespace dfpf {

// Stage 0: encoder (mean of both dates), 1: shallow fusion, 2: deep fusion, 3: change focus.
inline constexpr int kHeatmapStages = 4;

// Channel mean of a [1, C, h, w] map, min-max scaled to [0, 1]; a constant map becomes 0.5.
Tensor normalized_activation(const Tensor& features);
// Jet colormap of a [h, w] (or [1, h, w]) map in [0, 1].
Image8 colorize_jet(const Tensor& map);

// Normalized [H, W] maps indexed [stage][level], upscaled to the input size.
std::array<std::array<Tensor, kLevels>, kHeatmapStages> stage_activation_maps(const ChangeDetector& model,
                                                                                const BitemporalPair& pair);

// Writes stage{s}_level{l}.png (s = 0..3, l = 1..4) and returns the paths in that order.
std::vector<std::filesystem::path> emit_stage_heatmaps(const ChangeDetector& model, const BitemporalPair& pair,
                                                       const std::filesystem::path& out_dir);
std::vector<std::filesystem::path> emit_stage_heatmaps(const Checkpoint& ckpt, const BitemporalPair& pair,
                                                       const std::filesystem::path& out_dir);

}  // namespace dfpf
