#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "bifit/synthetic.hpp"

using namespace bifit;
namespace fs = std::filesystem;

namespace {
DataConfig small_config() {
  DataConfig c;
  c.train_clips = 8;
  c.val_clips = 4;
  return c;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("bifit_test_synthetic_" + name);
  fs::remove_all(p);
  return p;
}

SceneSpec one_object(MotionKind motion) {
  SceneSpec s;
  s.seed = 5;
  ObjectSpec o;
  o.shape = ShapeKind::Circle;
  o.color = ColorKind::Blue;
  o.size = SizeKind::Large;
  o.motion = motion;
  o.extent = 20;
  o.x = 30;
  o.y = 28;
  s.objects = {o};
  return s;
}
}  // namespace

TEST(GenerateClip, SameSceneTwiceIsBitIdentical) {
  const auto cfg = small_config();
  const auto a = generate_split(cfg, "train", 3), b = generate_split(cfg, "train", 3);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].pixels, b[i].pixels);
    EXPECT_EQ(a[i].masks, b[i].masks);
    EXPECT_EQ(a[i].boxes, b[i].boxes);
    EXPECT_EQ(a[i].expression, b[i].expression);
  }
  EXPECT_NE(generate_split(cfg, "val", 1)[0].pixels, a[0].pixels);
}

TEST(GenerateClip, StillTargetHasIdenticalMasks) {
  const auto cfg = small_config();
  const auto c = generate_clip(one_object(MotionKind::Still), cfg);
  for (int t = 1; t < c.frames; ++t) EXPECT_TRUE(std::ranges::equal(c.mask(t), c.mask(0))) << t;
  const auto m = generate_clip(one_object(MotionKind::Right), cfg);
  EXPECT_FALSE(std::ranges::equal(m.mask(1), m.mask(0)));
}

TEST(GenerateClip, BoxIsTightBoundOfMask) {
  const auto cfg = small_config();
  for (const auto& c : generate_split(cfg, "train", 20)) {
    for (int t = 0; t < c.frames; ++t) {
      auto m = c.mask(t);
      int x0 = c.width, x1 = -1, y0 = c.height, y1 = -1;
      for (int y = 0; y < c.height; ++y)
        for (int x = 0; x < c.width; ++x)
          if (m[y * c.width + x]) {
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
          }
      ASSERT_EQ(c.visible[t], x1 >= 0 ? 1 : 0) << c.id << " frame " << t;
      if (x1 < 0) continue;
      const auto& b = c.boxes[t];
      EXPECT_DOUBLE_EQ(b[0] - b[2] / 2, double(x0) / c.width) << c.id;
      EXPECT_DOUBLE_EQ(b[0] + b[2] / 2, double(x1 + 1) / c.width) << c.id;
      EXPECT_DOUBLE_EQ(b[1] - b[3] / 2, double(y0) / c.height) << c.id;
      EXPECT_DOUBLE_EQ(b[1] + b[3] / 2, double(y1 + 1) / c.height) << c.id;
    }
  }
}

TEST(GenerateClip, ExpressionIsUniqueAndTokenized) {
  const auto cfg = small_config();
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto s = sample_scene(seed, cfg);
    ASSERT_TRUE(s.unique()) << seed;
    ASSERT_GE(s.objects.size(), 2u);
    ASSERT_LE(s.objects.size(), 4u);
    EXPECT_EQ(tokenize(s.expression()).size(), 6u);
  }
  auto dup = one_object(MotionKind::Up);
  dup.objects.push_back(dup.objects[0]);
  EXPECT_THROW(generate_clip(dup, cfg), InputError);
}

TEST(GenerateClip, HardDistractorsDifferInOneAttribute) {
  auto cfg = small_config();
  cfg.hard_distractor_prob = 1.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = sample_scene(seed, cfg);
    for (std::size_t i = 0; i + 1 < s.objects.size(); ++i) {
      const auto &o = s.objects[i], &t = s.target();
      const int diff = (o.shape != t.shape) + (o.color != t.color) + (o.size != t.size) + (o.motion != t.motion);
      EXPECT_EQ(diff, 1) << seed;
    }
  }
}

TEST(GroundTruth, MajorityDownsampling) {
  ClipRecord c;
  c.frames = 1;
  c.height = c.width = 8;
  c.masks.assign(64, 0);
  c.visible = {1};
  c.boxes = {{0.5, 0.5, 0.5, 0.5}};
  // Cell (0,0): 8 of 16 pixels set; cell (0,1): 7 of 16.
  for (int i = 0; i < 8; ++i) c.masks[(i / 4) * 8 + i % 4] = 1;
  for (int i = 0; i < 7; ++i) c.masks[(i / 4) * 8 + 4 + i % 4] = 1;
  const auto g = c.ground_truth<double>(4);
  EXPECT_EQ(g.height, 2);
  EXPECT_EQ(g.masks, (std::vector<std::uint8_t>{1, 0, 0, 0}));
}

TEST(Tokenize, KnownWordsCaseAndErrors) {
  const auto& v = vocabulary();
  EXPECT_EQ(v.size(), 16u);
  EXPECT_EQ(std::set<std::string>(v.begin(), v.end()).size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(tokenize(v[i]), std::vector<int>{static_cast<int>(i)});
  EXPECT_EQ(tokenize("The  LARGE red"), tokenize("the large red"));
  EXPECT_THROW(tokenize("the purple square"), InputError);
  EXPECT_THROW(tokenize("   "), InputError);
}

TEST(Tokenize, DistinctExpressionsGiveDistinctSequences) {
  std::set<std::vector<int>> seen;
  std::set<std::string> texts;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const auto e = sample_scene(seed, small_config()).expression();
    if (texts.insert(e).second) EXPECT_TRUE(seen.insert(tokenize(e)).second) << e;
  }
}

TEST(Vocabulary, ShippedFileMatchesTokenTable) {
  EXPECT_EQ(read_vocabulary(fs::path(BIFIT_SOURCE_DIR) / "data" / "vocab.txt"), vocabulary());
}

TEST(Dataset, WriteReadRoundTrip) {
  const auto dir = scratch("roundtrip");
  const auto clips = generate_split(small_config(), "train", 3);
  write_dataset(clips, dir);
  EXPECT_TRUE(fs::exists(dir / "manifest.jsonl"));
  EXPECT_EQ(read_vocabulary(dir / "vocab.txt"), vocabulary());
  const auto back = read_dataset(dir);
  ASSERT_EQ(back.size(), clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    EXPECT_EQ(back[i].id, clips[i].id);
    EXPECT_EQ(back[i].masks, clips[i].masks);
    EXPECT_EQ(back[i].visible, clips[i].visible);
    EXPECT_EQ(back[i].boxes, clips[i].boxes);
    EXPECT_EQ(back[i].tokens, clips[i].tokens);
    EXPECT_EQ(back[i].expression, clips[i].expression);
    ASSERT_EQ(back[i].pixels.size(), clips[i].pixels.size());
    for (std::size_t k = 0; k < clips[i].pixels.size(); ++k) ASSERT_NEAR(back[i].pixels[k], clips[i].pixels[k], 0.5f / 255 + 1e-6f);
  }
  // Frames are stored at 8 bits, so a second round trip is exact.
  const auto dir2 = scratch("roundtrip2");
  write_dataset(back, dir2);
  const auto again = read_dataset(dir2);
  for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(again[i].pixels, back[i].pixels);
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(Dataset, CorruptMaskNamesThePath) {
  const auto dir = scratch("corrupt");
  write_dataset(generate_split(small_config(), "val", 2), dir);
  const auto bad = dir / "clips" / "val_00001" / "mask_002.pbm";
  ASSERT_TRUE(fs::exists(bad));
  detail::write_file(bad, "P4\n64 64\n\x01");
  try {
    read_dataset(dir);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(bad.string()), std::string::npos) << e.what();
  }
  fs::remove(bad);
  try {
    read_dataset(dir);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("mask_002.pbm"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(Dataset, MalformedManifestNamesTheLine) {
  const auto dir = scratch("manifest");
  write_dataset(generate_split(small_config(), "val", 1), dir);
  detail::write_file(dir / "manifest.jsonl", detail::read_file(dir / "manifest.jsonl") + "{\"clip_id\": 3}\n");
  try {
    read_dataset(dir);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("manifest.jsonl:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_dataset(dir / "missing"), IoError);
  fs::remove_all(dir);
}

TEST(DataConfig, Validation) {
  DataConfig c;
  c.height = 48;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DataConfig{};
  c.min_objects = 3;
  c.max_objects = 2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = DataConfig{};
  c.hard_distractor_prob = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
}
