#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "dfpf/tensor.hpp"

namespace dfpf {

struct BitemporalPair {
  std::string id;
  Tensor image_a;  // [3, H, W] in [0, 1]
  Tensor image_b;
  std::optional<Tensor> label;  // [1, H, W], binary
  // Synthetic pairs only: pixels darkened by a shadow strip in image_b.
  std::optional<Tensor> shadow;

  int64_t height() const { return image_a.dim(1); }
  int64_t width() const { return image_a.dim(2); }
};

// Throws InputError unless the pair is co-registered and the label binary.
void validate_pair(const BitemporalPair& pair);

struct Tile {
  Tensor data;  // [C, tile, tile]
  int row = 0;  // grid coordinates; for random crops, the crop index and 0
  int col = 0;
  int64_t y = 0;  // top-left pixel in the source image
  int64_t x = 0;
};

std::vector<Tile> tile_image(const Tensor& image, int tile);
Tensor stitch_tiles(const std::vector<Tile>& tiles, int64_t channels, int64_t height, int64_t width);

// Seeded crop origins; crops may overlap. Apply the same origins to every raster of a pair.
std::vector<std::array<int64_t, 2>> random_crop_origins(int64_t height, int64_t width, int tile, int count,
                                                        uint64_t seed);
Tensor crop(const Tensor& image, int64_t y, int64_t x, int tile);

// Grid tiles (or seeded random crops when crops_per_pair > 0) of every pair; ids gain a _rR_cC suffix.
std::vector<BitemporalPair> tile_pairs(const std::vector<BitemporalPair>& pairs, int tile, int crops_per_pair = 0,
                                       uint64_t seed = 0);

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
  std::array<int, 3> ratios{7, 2, 1};
};

DatasetSplit split_dataset(const std::vector<std::string>& ids, std::array<int, 3> ratios = {7, 2, 1},
                           uint64_t seed = 0);
nlohmann::json split_to_json(const DatasetSplit& split);
DatasetSplit split_from_json(const nlohmann::json& j);
void write_split_manifest(const std::filesystem::path& path, const DatasetSplit& split);
DatasetSplit read_split_manifest(const std::filesystem::path& path);

// Lazily reads <root>/A, <root>/B and <root>/label (label optional as a whole directory).
class PairDataset {
 public:
  explicit PairDataset(std::filesystem::path root);

  size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  BitemporalPair load(size_t index) const;
  std::vector<BitemporalPair> load_all() const;
  // Only the listed ids (file stems), in list order.
  std::vector<BitemporalPair> load_ids(const std::vector<std::string>& ids) const;

 private:
  std::filesystem::path root_;
  std::vector<std::string> names_;
  bool has_labels_ = false;
};

std::vector<BitemporalPair> load_pair_dataset(const std::filesystem::path& root);
// Writes A/, B/, label/ PNGs; pairs without labels are skipped in label/.
void write_pair_dataset(const std::filesystem::path& root, const std::vector<BitemporalPair>& pairs);

std::vector<BitemporalPair> synthesize_dataset(int n_pairs, int size, uint64_t seed, double change_rate);

// Same horizontal/vertical flip applied to every raster of the pair.
BitemporalPair flip_pair(const BitemporalPair& pair, bool horizontal, bool vertical);

// Stacks images into [B, 3, H, W] and labels into [B, 1, H, W].
Tensor batch_images_a(const std::vector<const BitemporalPair*>& items);
Tensor batch_images_b(const std::vector<const BitemporalPair*>& items);
Tensor batch_labels(const std::vector<const BitemporalPair*>& items);

}  // namespace dfpf
