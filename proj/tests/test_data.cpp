#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "dfpf/data.hpp"
#include "dfpf/errors.hpp"
#include "dfpf/image_io.hpp"
#include "support.hpp"

using namespace dfpf;
using dfpf::testing::random_binary;
using dfpf::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("dfpf_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

Image8 solid(int w, int h, int channels, uint8_t v) {
  Image8 img;
  img.width = w;
  img.height = h;
  img.channels = channels;
  img.pixels.assign(static_cast<size_t>(w) * h * channels, v);
  return img;
}

void write_triplet(const fs::path& root, const std::string& name, bool with_label = true) {
  fs::create_directories(root / "A");
  fs::create_directories(root / "B");
  write_png(root / "A" / (name + ".png"), solid(32, 32, 3, 40));
  write_png(root / "B" / (name + ".png"), solid(32, 32, 3, 200));
  if (with_label) {
    fs::create_directories(root / "label");
    Image8 lab = solid(32, 32, 1, 0);
    lab.at(3, 4, 0) = 255;
    write_png(root / "label" / (name + ".png"), lab);
  }
}

}  // namespace

TEST_CASE("grid tiling counts and round trips") {
  Rng rng(71);
  const Tensor big = random_tensor({3, 1024, 1024}, rng);
  const auto tiles = tile_image(big, 256);
  CHECK(tiles.size() == 16);
  CHECK(tiles[5].row == 1);
  CHECK(tiles[5].col == 1);
  CHECK(tiles[5].y == 256);
  CHECK(stitch_tiles(tiles, 3, 1024, 1024) == big);
  for (auto [h, w, t] : std::vector<std::array<int, 3>>{{64, 96, 32}, {256, 512, 128}, {32, 32, 32}}) {
    const Tensor img = random_tensor({2, h, w}, rng);
    const auto ts = tile_image(img, t);
    CHECK(ts.size() == static_cast<size_t>((h / t) * (w / t)));
    CHECK(stitch_tiles(ts, 2, h, w) == img);
  }
  CHECK_THROWS_AS(tile_image(Tensor({3, 100, 128}), 32), PreconditionError);
}

TEST_CASE("random crops are seeded and stay in bounds") {
  const auto a = random_crop_origins(300, 200, 64, 10, 5);
  const auto b = random_crop_origins(300, 200, 64, 10, 5);
  CHECK(a == b);
  CHECK(a.size() == 10);
  for (auto [y, x] : a) {
    CHECK(y >= 0);
    CHECK(y + 64 <= 300);
    CHECK(x >= 0);
    CHECK(x + 64 <= 200);
  }
  CHECK(random_crop_origins(300, 200, 64, 10, 6) != a);
  Rng rng(72);
  const Tensor img = random_tensor({1, 300, 200}, rng);
  const Tensor c = crop(img, a[0][0], a[0][1], 64);
  CHECK(c.shape() == Shape{1, 64, 64});
  CHECK(c[0] == img[static_cast<size_t>(a[0][0] * 200 + a[0][1])]);
}

TEST_CASE("pair tiling keeps rasters co-registered") {
  auto pairs = synthesize_dataset(2, 128, 3, 1.0);
  const auto tiles = tile_pairs(pairs, 64);
  REQUIRE(tiles.size() == 8);
  CHECK(tiles[0].id == "syn_0000_r0_c0");
  CHECK(tiles[3].id == "syn_0000_r1_c1");
  std::vector<Tile> label_tiles;
  for (int i = 0; i < 4; ++i) {
    CHECK(tiles[i].image_a.shape() == Shape{3, 64, 64});
    CHECK(tiles[i].label->shape() == Shape{1, 64, 64});
    label_tiles.push_back({*tiles[i].label, tiles[i].id.back() - '0', 0, (i / 2) * 64, (i % 2) * 64});
  }
  CHECK(stitch_tiles(label_tiles, 1, 128, 128) == *pairs[0].label);
  const auto crops = tile_pairs(pairs, 32, 3, 9);
  CHECK(crops.size() == 6);
  CHECK(crops[0].image_b.shape() == Shape{3, 32, 32});
  CHECK_THROWS_AS(tile_pairs(pairs, 48), PreconditionError);
}

TEST_CASE("split sizes follow the floor rule") {
  auto ids = [](int n) {
    std::vector<std::string> v;
    for (int i = 0; i < n; ++i) v.push_back("p" + std::to_string(i));
    return v;
  };
  const DatasetSplit ten = split_dataset(ids(10));
  CHECK(ten.train.size() == 7);
  CHECK(ten.val.size() == 2);
  CHECK(ten.test.size() == 1);
  const DatasetSplit big = split_dataset(ids(637), {7, 2, 1}, 4);
  CHECK(big.train.size() == 445);
  CHECK(big.val.size() == 127);
  CHECK(big.test.size() == 65);
  std::set<std::string> seen;
  for (const auto* part : {&big.train, &big.val, &big.test})
    for (const auto& id : *part) CHECK(seen.insert(id).second);
  CHECK(seen.size() == 637);

  const DatasetSplit again = split_dataset(ids(637), {7, 2, 1}, 4);
  CHECK(again.train == big.train);
  CHECK(split_dataset(ids(637), {7, 2, 1}, 5).train != big.train);
  const DatasetSplit even = split_dataset(ids(9), {1, 1, 1}, 0);
  CHECK(even.train.size() == 3);
  CHECK(even.test.size() == 3);

  CHECK_THROWS_AS(split_dataset({}), PreconditionError);
  CHECK_THROWS_AS(split_dataset(ids(5), {7, 0, 1}), PreconditionError);
  CHECK_THROWS_AS(split_dataset({"a", "b", "a"}), PreconditionError);
}

TEST_CASE("split manifest round trip") {
  TempDir dir("split");
  const DatasetSplit s = split_dataset({"a", "b", "c", "d", "e", "f"}, {4, 1, 1}, 2);
  write_split_manifest(dir.path / "split.json", s);
  const DatasetSplit back = read_split_manifest(dir.path / "split.json");
  CHECK(back.train == s.train);
  CHECK(back.val == s.val);
  CHECK(back.test == s.test);
  CHECK_THROWS_AS(read_split_manifest(dir.path / "absent.json"), IngestionError);
}

TEST_CASE("loader pairs files by name and normalises values") {
  TempDir dir("loader");
  write_triplet(dir.path, "x");
  write_triplet(dir.path, "a");
  PairDataset ds(dir.path);
  REQUIRE(ds.size() == 2);
  CHECK(ds.names() == std::vector<std::string>{"a.png", "x.png"});
  const BitemporalPair p = ds.load(1);
  CHECK(p.id == "x");
  CHECK(p.image_a.shape() == Shape{3, 32, 32});
  CHECK(p.image_a[0] == doctest::Approx(40.0 / 255.0).epsilon(1e-15));
  CHECK(p.image_b[100] == doctest::Approx(200.0 / 255.0).epsilon(1e-15));
  REQUIRE(p.label.has_value());
  CHECK(p.label->at(0, 0, 0, 0) == 0.0);
  CHECK((*p.label)[3 * 32 + 4] == 1.0);
  double sum = 0;
  for (double v : p.label->data()) sum += v;
  CHECK(sum == 1.0);
  CHECK(ds.load_ids({"x"}).at(0).id == "x");
  CHECK_THROWS_AS(ds.load_ids({"missing"}), IngestionError);
}

TEST_CASE("loader errors name the offending file") {
  TempDir dir("loader_err");
  write_triplet(dir.path, "x");
  fs::remove(dir.path / "B" / "x.png");
  CHECK_THROWS_WITH_AS(PairDataset(dir.path), doctest::Contains("x.png"), IngestionError);

  TempDir bad("loader_label");
  write_triplet(bad.path, "y");
  write_png(bad.path / "label" / "y.png", solid(32, 32, 1, 128));
  CHECK_THROWS_WITH_AS(PairDataset(bad.path).load(0), doctest::Contains("y.png"), IngestionError);

  TempDir shape("loader_shape");
  write_triplet(shape.path, "z");
  write_png(shape.path / "B" / "z.png", solid(64, 32, 3, 1));
  CHECK_THROWS_WITH_AS(PairDataset(shape.path).load(0), doctest::Contains("z.png"), IngestionError);

  TempDir unlabeled("loader_nolabel");
  write_triplet(unlabeled.path, "u", false);
  CHECK_FALSE(PairDataset(unlabeled.path).load(0).label.has_value());

  CHECK_THROWS_AS(PairDataset(dir.path / "nowhere"), IngestionError);
}

TEST_CASE("dataset write and load round trip") {
  TempDir dir("roundtrip");
  const auto pairs = synthesize_dataset(3, 64, 11, 0.5);
  write_pair_dataset(dir.path, pairs);
  const auto back = load_pair_dataset(dir.path);
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].id == pairs[i].id);
    CHECK(*back[i].label == *pairs[i].label);
    CHECK(dfpf::testing::max_abs_diff(back[i].image_a, pairs[i].image_a) <= 0.5 / 255.0 + 1e-12);
  }
}

TEST_CASE("png codec round trip") {
  TempDir dir("png");
  Image8 img = solid(5, 3, 3, 0);
  for (size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<uint8_t>(i * 7);
  write_png(dir.path / "img.png", img);
  const Image8 back = read_png(dir.path / "img.png");
  CHECK(back.width == 5);
  CHECK(back.height == 3);
  CHECK(back.pixels == img.pixels);
  CHECK(tensor_to_image(image_to_tensor(img)).pixels == img.pixels);
  std::ofstream(dir.path / "junk.png") << "not a png";
  CHECK_THROWS_WITH_AS(read_png(dir.path / "junk.png"), doctest::Contains("junk.png"), IngestionError);
}

TEST_CASE("synthetic generator is deterministic") {
  const auto a = synthesize_dataset(4, 64, 99, 0.5);
  const auto b = synthesize_dataset(4, 64, 99, 0.5);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].image_a == b[i].image_a);
    CHECK(a[i].image_b == b[i].image_b);
    CHECK(*a[i].label == *b[i].label);
    CHECK(*a[i].shadow == *b[i].shadow);
  }
  CHECK(synthesize_dataset(1, 64, 100, 0.5)[0].image_a != a[0].image_a);
  CHECK_THROWS_AS(synthesize_dataset(2, 100, 1, 0.5), PreconditionError);
  CHECK_THROWS_AS(synthesize_dataset(2, 64, 1, 1.5), PreconditionError);
}

TEST_CASE("synthetic labels cover whole rectangles and avoid shadows and jitter") {
  for (const auto& p : synthesize_dataset(6, 128, 21, 0.0)) {
    for (double v : p.label->data()) CHECK(v == 0.0);
  }
  int labeled_pairs = 0;
  for (const auto& p : synthesize_dataset(12, 128, 22, 1.0)) {
    validate_pair(p);
    const Tensor& lab = *p.label;
    const Tensor& sh = *p.shadow;
    const int64_t n = 128;
    bool any = false;
    for (int64_t i = 0; i < n * n; ++i) {
      if (lab[i] == 1.0) any = true;
      CHECK_FALSE((lab[i] == 1.0 && sh[i] == 1.0));
    }
    labeled_pairs += any;
    // Each 4-connected labeled component fills its bounding box.
    std::vector<int> seen(n * n, 0);
    for (int64_t s = 0; s < n * n; ++s) {
      if (lab[s] != 1.0 || seen[s]) continue;
      std::vector<int64_t> stack{s};
      seen[s] = 1;
      int64_t count = 0, y0 = n, y1 = -1, x0 = n, x1 = -1;
      while (!stack.empty()) {
        const int64_t c = stack.back();
        stack.pop_back();
        ++count;
        const int64_t y = c / n, x = c % n;
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        for (auto [dy, dx] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
          const int64_t yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= n || xx < 0 || xx >= n) continue;
          const int64_t nb = yy * n + xx;
          if (lab[nb] == 1.0 && !seen[nb]) {
            seen[nb] = 1;
            stack.push_back(nb);
          }
        }
      }
      CHECK(count == (y1 - y0 + 1) * (x1 - x0 + 1));
      CHECK(y1 - y0 + 1 >= 12);
      CHECK(x1 - x0 + 1 >= 12);
    }
  }
  CHECK(labeled_pairs == 12);
}

TEST_CASE("flips move every raster together") {
  const auto pairs = synthesize_dataset(1, 64, 5, 1.0);
  const BitemporalPair f = flip_pair(pairs[0], true, false);
  CHECK(f.image_a[3 * 64] == pairs[0].image_a[3 * 64 + 63]);
  CHECK((*f.label)[10 * 64 + 5] == (*pairs[0].label)[10 * 64 + 58]);
  const BitemporalPair back = flip_pair(flip_pair(pairs[0], true, true), true, true);
  CHECK(back.image_b == pairs[0].image_b);
  CHECK(*back.shadow == *pairs[0].shadow);
}

TEST_CASE("batching stacks pairs") {
  const auto pairs = synthesize_dataset(3, 32, 6, 0.5);
  const std::vector<const BitemporalPair*> items{&pairs[0], &pairs[2]};
  CHECK(batch_images_a(items).shape() == Shape{2, 3, 32, 32});
  CHECK(batch_images_b(items).shape() == Shape{2, 3, 32, 32});
  CHECK(batch_labels(items).shape() == Shape{2, 1, 32, 32});
  CHECK(slice_batch(batch_images_b(items), 1) == pairs[2].image_b);
}

TEST_CASE("pair validation") {
  auto p = synthesize_dataset(1, 32, 7, 0.5)[0];
  CHECK_NOTHROW(validate_pair(p));
  BitemporalPair bad = p;
  bad.label->storage()[0] = 0.5;
  CHECK_THROWS_AS(validate_pair(bad), InputError);
  bad = p;
  bad.image_b = Tensor({3, 32, 64});
  CHECK_THROWS_AS(validate_pair(bad), InputError);
}
