#include "dfpf/data.hpp"

#include <algorithm>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "dfpf/errors.hpp"
#include "dfpf/image_io.hpp"

namespace fs = std::filesystem;

namespace dfpf {

void validate_pair(const BitemporalPair& pair) {
  const Shape& s = pair.image_a.shape();
  if (s.size() != 3 || s[0] != 3) throw InputError(pair.id + ": image_a must be [3,H,W], got " + shape_str(s));
  if (pair.image_b.shape() != s) throw InputError(pair.id + ": image_b shape differs from image_a");
  if (pair.label) {
    if (pair.label->shape() != Shape{1, s[1], s[2]}) throw InputError(pair.id + ": label must be [1,H,W]");
    for (double v : pair.label->data()) {
      if (v != 0.0 && v != 1.0) throw InputError(pair.id + ": label is not binary");
    }
  }
}

Tensor crop(const Tensor& image, int64_t y, int64_t x, int tile) {
  if (image.rank() != 3) throw ShapeError("crop: expected [C,H,W], got " + shape_str(image.shape()));
  const int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (tile <= 0 || y < 0 || x < 0 || y + tile > h || x + tile > w) throw PreconditionError("crop: window out of bounds");
  Tensor out({c, tile, tile});
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t r = 0; r < tile; ++r) {
      const double* src = image.ptr() + (ch * h + y + r) * w + x;
      std::copy(src, src + tile, out.ptr() + (ch * tile + r) * tile);
    }
  }
  return out;
}

std::vector<Tile> tile_image(const Tensor& image, int tile) {
  if (image.rank() != 3) throw ShapeError("tile_image: expected [C,H,W], got " + shape_str(image.shape()));
  const int64_t h = image.dim(1), w = image.dim(2);
  if (tile <= 0 || h % tile != 0 || w % tile != 0) {
    throw PreconditionError("tile_image: tile " + std::to_string(tile) + " does not divide " + std::to_string(h) + "x" +
                            std::to_string(w));
  }
  std::vector<Tile> tiles;
  for (int64_t r = 0; r < h / tile; ++r) {
    for (int64_t c = 0; c < w / tile; ++c) {
      tiles.push_back({crop(image, r * tile, c * tile, tile), static_cast<int>(r), static_cast<int>(c), r * tile,
                       c * tile});
    }
  }
  return tiles;
}

Tensor stitch_tiles(const std::vector<Tile>& tiles, int64_t channels, int64_t height, int64_t width) {
  Tensor out({channels, height, width});
  for (const Tile& t : tiles) {
    const int64_t tile = t.data.dim(1);
    if (t.data.rank() != 3 || t.data.dim(0) != channels || t.data.dim(2) != tile) {
      throw ShapeError("stitch_tiles: tile shape " + shape_str(t.data.shape()));
    }
    if (t.y < 0 || t.x < 0 || t.y + tile > height || t.x + tile > width) {
      throw PreconditionError("stitch_tiles: tile outside canvas");
    }
    for (int64_t ch = 0; ch < channels; ++ch) {
      for (int64_t r = 0; r < tile; ++r) {
        const double* src = t.data.ptr() + (ch * tile + r) * tile;
        std::copy(src, src + tile, out.ptr() + (ch * height + t.y + r) * width + t.x);
      }
    }
  }
  return out;
}

std::vector<std::array<int64_t, 2>> random_crop_origins(int64_t height, int64_t width, int tile, int count,
                                                        uint64_t seed) {
  if (tile <= 0 || tile > height || tile > width) throw PreconditionError("random_crop_origins: tile exceeds image");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int64_t> ys(0, height - tile), xs(0, width - tile);
  std::vector<std::array<int64_t, 2>> out;
  for (int i = 0; i < count; ++i) {
    const int64_t y = ys(rng);
    out.push_back({y, xs(rng)});
  }
  return out;
}

std::vector<BitemporalPair> tile_pairs(const std::vector<BitemporalPair>& pairs, int tile, int crops_per_pair,
                                       uint64_t seed) {
  std::vector<BitemporalPair> out;
  for (size_t p = 0; p < pairs.size(); ++p) {
    const BitemporalPair& src = pairs[p];
    validate_pair(src);
    std::vector<std::array<int64_t, 2>> origins;
    std::vector<std::array<int, 2>> coords;
    if (crops_per_pair > 0) {
      origins = random_crop_origins(src.height(), src.width(), tile, crops_per_pair, seed + p);
      for (int i = 0; i < crops_per_pair; ++i) coords.push_back({i, 0});
    } else {
      if (tile <= 0 || src.height() % tile != 0 || src.width() % tile != 0) {
        throw PreconditionError("tile_pairs: tile " + std::to_string(tile) + " does not divide " + src.id);
      }
      for (int r = 0; r < src.height() / tile; ++r) {
        for (int c = 0; c < src.width() / tile; ++c) {
          origins.push_back({int64_t{r} * tile, int64_t{c} * tile});
          coords.push_back({r, c});
        }
      }
    }
    for (size_t i = 0; i < origins.size(); ++i) {
      const auto [y, x] = origins[i];
      BitemporalPair t;
      t.id = src.id + "_r" + std::to_string(coords[i][0]) + "_c" + std::to_string(coords[i][1]);
      t.image_a = crop(src.image_a, y, x, tile);
      t.image_b = crop(src.image_b, y, x, tile);
      if (src.label) t.label = crop(*src.label, y, x, tile);
      if (src.shadow) t.shadow = crop(*src.shadow, y, x, tile);
      out.push_back(std::move(t));
    }
  }
  return out;
}

DatasetSplit split_dataset(const std::vector<std::string>& ids, std::array<int, 3> ratios, uint64_t seed) {
  if (ids.empty()) throw PreconditionError("split_dataset: empty id list");
  for (int r : ratios) {
    if (r <= 0) throw PreconditionError("split_dataset: ratios must be positive");
  }
  if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size()) {
    throw PreconditionError("split_dataset: duplicate ids");
  }
  std::vector<std::string> order = ids;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const int64_t n = static_cast<int64_t>(order.size());
  const int64_t total = ratios[0] + ratios[1] + ratios[2];
  const int64_t n_train = ratios[0] * n / total;
  const int64_t n_val = ratios[1] * n / total;
  DatasetSplit s;
  s.ratios = ratios;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  s.test.assign(order.begin() + n_train + n_val, order.end());
  return s;
}

nlohmann::json split_to_json(const DatasetSplit& split) {
  return {{"train", split.train}, {"val", split.val}, {"test", split.test}, {"ratios", split.ratios}};
}

DatasetSplit split_from_json(const nlohmann::json& j) {
  DatasetSplit s;
  try {
    s.train = j.at("train").get<std::vector<std::string>>();
    s.val = j.at("val").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    if (j.contains("ratios")) s.ratios = j.at("ratios").get<std::array<int, 3>>();
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(std::string("split manifest: ") + e.what());
  }
  return s;
}

void write_split_manifest(const fs::path& path, const DatasetSplit& split) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << split_to_json(split).dump(2) << "\n";
}

DatasetSplit read_split_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open split manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(path.string() + ": " + e.what());
  }
  return split_from_json(j);
}

PairDataset::PairDataset(fs::path root) : root_(std::move(root)) {
  const fs::path a = root_ / "A", b = root_ / "B", label = root_ / "label";
  if (!fs::is_directory(a)) throw IngestionError("missing directory " + a.string());
  if (!fs::is_directory(b)) throw IngestionError("missing directory " + b.string());
  has_labels_ = fs::is_directory(label);
  for (const auto& entry : fs::directory_iterator(a)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") names_.push_back(entry.path().filename());
  }
  std::sort(names_.begin(), names_.end());
  for (const std::string& name : names_) {
    if (!fs::exists(b / name)) throw IngestionError("B/ is missing " + name);
    if (has_labels_ && !fs::exists(label / name)) throw IngestionError("label/ is missing " + name);
  }
}

BitemporalPair PairDataset::load(size_t index) const {
  const std::string& name = names_.at(index);
  BitemporalPair p;
  p.id = fs::path(name).stem();
  p.image_a = image_to_tensor(read_png(root_ / "A" / name));
  p.image_b = image_to_tensor(read_png(root_ / "B" / name));
  if (p.image_b.shape() != p.image_a.shape()) throw IngestionError(name + ": A and B sizes differ");
  if (has_labels_) {
    p.label = label_to_mask(read_png(root_ / "label" / name), name);
    if (p.label->dim(1) != p.height() || p.label->dim(2) != p.width()) {
      throw IngestionError(name + ": label size differs from images");
    }
  }
  return p;
}

std::vector<BitemporalPair> PairDataset::load_all() const {
  std::vector<BitemporalPair> out;
  out.reserve(names_.size());
  for (size_t i = 0; i < names_.size(); ++i) out.push_back(load(i));
  return out;
}

std::vector<BitemporalPair> PairDataset::load_ids(const std::vector<std::string>& ids) const {
  std::vector<BitemporalPair> out;
  for (const std::string& id : ids) {
    auto it = std::find(names_.begin(), names_.end(), id + ".png");
    if (it == names_.end()) throw IngestionError("dataset has no pair " + id + ".png");
    out.push_back(load(static_cast<size_t>(it - names_.begin())));
  }
  return out;
}

std::vector<BitemporalPair> load_pair_dataset(const fs::path& root) { return PairDataset(root).load_all(); }

void write_pair_dataset(const fs::path& root, const std::vector<BitemporalPair>& pairs) {
  for (const char* sub : {"A", "B", "label"}) fs::create_directories(root / sub);
  for (const BitemporalPair& p : pairs) {
    const std::string name = p.id + ".png";
    write_png(root / "A" / name, tensor_to_image(p.image_a));
    write_png(root / "B" / name, tensor_to_image(p.image_b));
    if (p.label) write_png(root / "label" / name, mask_to_image(*p.label));
  }
}

namespace {

struct Rect {
  int y, x, h, w;
  bool overlaps(const Rect& o) const { return y < o.y + o.h && o.y < y + h && x < o.x + o.w && o.x < x + w; }
};

constexpr int kGrid = 4;
constexpr int kShadow = 4;
constexpr int kGap = 4;

Rect footprint(const Rect& r) { return {r.y - kGap, r.x - kGap, r.h + kShadow + 2 * kGap, r.w + kShadow + 2 * kGap}; }

void paint_rect(Tensor& img, const Rect& r, const std::array<double, 3>& color, bool ridge_horizontal) {
  const int64_t h = img.dim(1), w = img.dim(2);
  for (int c = 0; c < 3; ++c) {
    for (int y = r.y; y < r.y + r.h; ++y) {
      for (int x = r.x; x < r.x + r.w; ++x) {
        const bool ridge = ridge_horizontal ? std::abs(2 * (y - r.y) - r.h + 1) <= 1 : std::abs(2 * (x - r.x) - r.w + 1) <= 1;
        img[(c * h + y) * w + x] = color[c] - (ridge ? 0.12 : 0.0);
      }
    }
  }
}

BitemporalPair synthesize_pair(int index, int size, uint64_t seed, double change_rate) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(index)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  std::normal_distribution<double> noise(0.0, 0.015);

  const int64_t plane = static_cast<int64_t>(size) * size;
  Tensor a({3, size, size}), b({3, size, size});
  Tensor label({1, size, size}), shadow({1, size, size});

  const std::array<double, 3> base{uniform(0.25, 0.45), uniform(0.30, 0.50), uniform(0.20, 0.35)};
  struct Wave {
    double amp, fy, fx, phase;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) waves.push_back({uniform(0.02, 0.06), uniform(0.02, 0.15), uniform(0.02, 0.15), uniform(0, 6.3)});
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double t = 0;
      for (const Wave& wv : waves) t += wv.amp * std::sin(wv.fy * y + wv.fx * x + wv.phase);
      for (int c = 0; c < 3; ++c) {
        const double v = base[c] + t;
        a[c * plane + y * size + x] = v + noise(rng);
        b[c * plane + y * size + x] = v + noise(rng);
      }
    }
  }

  // Buildings on a 4-px lattice, kept apart so shadows never touch another roof.
  const int scale = std::max(1, (size / 128) * (size / 128));
  const int wanted = pick(3, 6) * scale;
  std::vector<Rect> rects;
  for (int attempt = 0; attempt < 400 * scale && static_cast<int>(rects.size()) < wanted; ++attempt) {
    Rect r{0, 0, kGrid * pick(3, 8), kGrid * pick(3, 8)};
    const int max_y = (size - r.h - kShadow - kGap) / kGrid, max_x = (size - r.w - kShadow - kGap) / kGrid;
    if (max_y < 1 || max_x < 1) continue;
    r.y = kGrid * pick(1, max_y);
    r.x = kGrid * pick(1, max_x);
    const Rect fp = footprint(r);
    if (std::none_of(rects.begin(), rects.end(), [&](const Rect& o) { return fp.overlaps(footprint(o)); })) {
      rects.push_back(r);
    }
  }

  static const std::array<std::array<double, 3>, 4> roofs{{{0.82, 0.82, 0.80}, {0.74, 0.32, 0.26}, {0.32, 0.46, 0.76},
                                                           {0.92, 0.90, 0.86}}};
  for (const Rect& r : rects) {
    std::array<double, 3> color = roofs[pick(0, 3)];
    for (double& c : color) c += uniform(-0.05, 0.05);
    const bool ridge_h = r.w >= r.h;
    const bool changed = u01(rng) < change_rate;
    const bool appears = u01(rng) < 0.5;
    const bool in_a = !changed || !appears;
    const bool in_b = !changed || appears;
    if (in_a) paint_rect(a, r, color, ridge_h);
    if (in_b) {
      paint_rect(b, r, color, ridge_h);
      // L-shaped strip below and right of the roof.
      for (int y = r.y + kShadow; y < r.y + r.h + kShadow; ++y) {
        for (int x = r.x + kShadow; x < r.x + r.w + kShadow; ++x) {
          if (y < r.y + r.h && x < r.x + r.w) continue;
          shadow[y * size + x] = 1.0;
        }
      }
    }
    if (changed) {
      for (int y = r.y; y < r.y + r.h; ++y) {
        for (int x = r.x; x < r.x + r.w; ++x) label[y * size + x] = 1.0;
      }
    }
  }
  for (int64_t i = 0; i < plane; ++i) {
    if (shadow[i] == 1.0) {
      for (int c = 0; c < 3; ++c) b[c * plane + i] *= 0.45;
    }
  }

  // Illumination change over the whole second image.
  const double gain = uniform(0.85, 1.15), offset = uniform(-0.06, 0.06);
  std::array<double, 3> tint{};
  for (double& t : tint) t = uniform(-0.03, 0.03);
  for (int c = 0; c < 3; ++c) {
    for (int64_t i = 0; i < plane; ++i) {
      double& v = b[c * plane + i];
      v = v * gain + offset + tint[c];
    }
  }
  for (double& v : a.storage()) v = std::clamp(v, 0.0, 1.0);
  for (double& v : b.storage()) v = std::clamp(v, 0.0, 1.0);

  BitemporalPair p;
  char id[32];
  std::snprintf(id, sizeof(id), "syn_%04d", index);
  p.id = id;
  p.image_a = std::move(a);
  p.image_b = std::move(b);
  p.label = std::move(label);
  p.shadow = std::move(shadow);
  return p;
}

}  // namespace

std::vector<BitemporalPair> synthesize_dataset(int n_pairs, int size, uint64_t seed, double change_rate) {
  if (size < 32 || size % 32 != 0) throw PreconditionError("synthesize_dataset: size must be a positive multiple of 32");
  if (!(change_rate >= 0.0 && change_rate <= 1.0)) throw PreconditionError("synthesize_dataset: change_rate outside [0, 1]");
  if (n_pairs < 0) throw PreconditionError("synthesize_dataset: negative pair count");
  std::vector<BitemporalPair> out;
  out.reserve(n_pairs);
  for (int i = 0; i < n_pairs; ++i) out.push_back(synthesize_pair(i, size, seed, change_rate));
  return out;
}

namespace {

Tensor flip_chw(const Tensor& t, bool horizontal, bool vertical) {
  const int64_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Tensor out(t.shape());
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t y = 0; y < h; ++y) {
      const int64_t sy = vertical ? h - 1 - y : y;
      for (int64_t x = 0; x < w; ++x) {
        const int64_t sx = horizontal ? w - 1 - x : x;
        out[(ch * h + y) * w + x] = t[(ch * h + sy) * w + sx];
      }
    }
  }
  return out;
}

Tensor stack_field(const std::vector<const BitemporalPair*>& items, const Tensor& (*get)(const BitemporalPair&)) {
  std::vector<Tensor> parts;
  parts.reserve(items.size());
  for (const BitemporalPair* p : items) parts.push_back(get(*p));
  return stack(parts);
}

}  // namespace

BitemporalPair flip_pair(const BitemporalPair& pair, bool horizontal, bool vertical) {
  BitemporalPair out;
  out.id = pair.id;
  out.image_a = flip_chw(pair.image_a, horizontal, vertical);
  out.image_b = flip_chw(pair.image_b, horizontal, vertical);
  if (pair.label) out.label = flip_chw(*pair.label, horizontal, vertical);
  if (pair.shadow) out.shadow = flip_chw(*pair.shadow, horizontal, vertical);
  return out;
}

Tensor batch_images_a(const std::vector<const BitemporalPair*>& items) {
  return stack_field(items, [](const BitemporalPair& p) -> const Tensor& { return p.image_a; });
}

Tensor batch_images_b(const std::vector<const BitemporalPair*>& items) {
  return stack_field(items, [](const BitemporalPair& p) -> const Tensor& { return p.image_b; });
}

Tensor batch_labels(const std::vector<const BitemporalPair*>& items) {
  for (const BitemporalPair* p : items) {
    if (!p->label) throw InputError(p->id + ": pair has no label");
  }
  return stack_field(items, [](const BitemporalPair& p) -> const Tensor& { return *p.label; });
}

}  // namespace dfpf
