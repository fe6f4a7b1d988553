#pragma once

// Moving-shapes clips with exact binary masks and templated referring
// expressions, and their on-disk form (PPM frames, PBM masks, JSON-lines
// manifest).

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bifit/encoders.hpp"
#include "bifit/losses.hpp"

namespace bifit {

enum class ShapeKind { Square, Circle, Triangle };
enum class ColorKind { Red, Green, Blue, Yellow };
enum class SizeKind { Small, Large };
enum class MotionKind { Left, Right, Up, Down, Still };

inline const char* word(ShapeKind s) {
  static const char* n[] = {"square", "circle", "triangle"};
  return n[static_cast<int>(s)];
}
inline const char* word(ColorKind c) {
  static const char* n[] = {"red", "green", "blue", "yellow"};
  return n[static_cast<int>(c)];
}
inline const char* word(SizeKind s) { return s == SizeKind::Small ? "small" : "large"; }
inline const char* word(MotionKind m) {
  static const char* n[] = {"left", "right", "up", "down", "still"};
  return n[static_cast<int>(m)];
}

/// Token table; a word's id is its index. Mirrors data/vocab.txt.
inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> v = {"the",    "small",  "large", "red",    "green", "blue", "yellow", "square",
                                             "circle", "triangle", "moving", "left", "right", "up",   "down",   "still"};
  return v;
}

/// Lowercased whitespace split, looked up in the vocabulary.
inline std::vector<int> tokenize(const std::string& text) {
  std::istringstream is(text);
  std::string w;
  std::vector<int> ids;
  const auto& v = vocabulary();
  while (is >> w) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    auto it = std::find(v.begin(), v.end(), w);
    if (it == v.end()) throw InputError("unknown word '" + w + "'");
    ids.push_back(static_cast<int>(it - v.begin()));
  }
  if (ids.empty()) throw InputError("expression is empty");
  return ids;
}

struct ObjectSpec {
  ShapeKind shape = ShapeKind::Square;
  ColorKind color = ColorKind::Red;
  SizeKind size = SizeKind::Small;
  MotionKind motion = MotionKind::Still;
  double extent = 12;      // side / diameter in pixels
  double x = 32, y = 32;   // centre at frame 0, pixels

  bool same_attributes(const ObjectSpec& o) const {
    return shape == o.shape && color == o.color && size == o.size && motion == o.motion;
  }
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::vector<ObjectSpec> objects;
  int target_index = 0;

  const ObjectSpec& target() const { return objects.at(static_cast<std::size_t>(target_index)); }
  std::string expression() const {
    const auto& t = target();
    return std::string("the ") + word(t.size) + " " + word(t.color) + " " + word(t.shape) + " moving " + word(t.motion);
  }
  /// True when no other object shares all four attributes with the target.
  bool unique() const {
    for (std::size_t i = 0; i < objects.size(); ++i)
      if (static_cast<int>(i) != target_index && objects[i].same_attributes(target())) return false;
    return true;
  }
};

struct DataConfig {
  int frames = 6, height = 64, width = 64;
  int train_clips = 500, val_clips = 100;
  std::uint64_t seed = 7;
  int min_objects = 2, max_objects = 4;
  double hard_distractor_prob = 0.5;
  double speed = 3.0;  // pixels per frame

  void validate() const {
    if (frames < 1) throw ConfigError("data.frames must be >= 1");
    if (height <= 0 || width <= 0 || height % 64 || width % 64) throw ConfigError("data.height and data.width must be multiples of 64");
    if (train_clips < 0 || val_clips < 0) throw ConfigError("clip counts must be non-negative");
    if (min_objects < 1 || max_objects < min_objects) throw ConfigError("need 1 <= data.min_objects <= data.max_objects");
    if (hard_distractor_prob < 0 || hard_distractor_prob > 1) throw ConfigError("data.hard_distractor_prob must lie in [0,1]");
  }
};

/// A fully annotated clip at input resolution.
struct ClipRecord {
  std::string id;
  int frames = 0, height = 0, width = 0;
  std::vector<float> pixels;          // [T, H, W, 3] in [0, 1]
  std::vector<std::uint8_t> masks;    // [T, H, W] target masks
  std::vector<std::uint8_t> visible;  // [T]
  std::vector<std::array<double, 4>> boxes;  // normalized (cx, cy, w, h); zero when invisible
  std::string expression;
  std::vector<int> tokens;

  std::size_t frame_pixels() const { return static_cast<std::size_t>(height) * width; }
  std::span<const std::uint8_t> mask(int t) const { return {masks.data() + frame_pixels() * t, frame_pixels()}; }

  template <class T>
  VideoClip<T> clip() const {
    Tensor<T> f({frames, height, width, 3});
    std::transform(pixels.begin(), pixels.end(), f.data(), [](float v) { return static_cast<T>(v); });
    return {std::move(f)};
  }

  /// Annotation with masks reduced by `stride`: a cell is set when at least
  /// half of its pixels are.
  template <class T>
  GroundTruthSequence<T> ground_truth(int stride) const {
    GroundTruthSequence<T> g;
    g.height = height / stride;
    g.width = width / stride;
    g.visible = visible;
    for (const auto& b : boxes) g.boxes.push_back({static_cast<T>(b[0]), static_cast<T>(b[1]), static_cast<T>(b[2]), static_cast<T>(b[3])});
    g.masks.assign(static_cast<std::size_t>(frames) * g.pixels(), 0);
    const int half = (stride * stride + 1) / 2;
    for (int t = 0; t < frames; ++t)
      for (int i = 0; i < g.height; ++i)
        for (int j = 0; j < g.width; ++j) {
          int n = 0;
          for (int dy = 0; dy < stride; ++dy)
            for (int dx = 0; dx < stride; ++dx) n += mask(t)[static_cast<std::size_t>(i * stride + dy) * width + j * stride + dx];
          g.masks[static_cast<std::size_t>(t) * g.pixels() + i * g.width + j] = n >= half ? 1 : 0;
        }
    return g;
  }
};

namespace detail {
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::array<float, 3> rgb(ColorKind c) {
  switch (c) {
    case ColorKind::Red: return {0.90f, 0.15f, 0.10f};
    case ColorKind::Green: return {0.15f, 0.80f, 0.20f};
    case ColorKind::Blue: return {0.15f, 0.25f, 0.95f};
    case ColorKind::Yellow: return {0.95f, 0.90f, 0.15f};
  }
  return {0, 0, 0};
}

inline std::array<double, 2> velocity(MotionKind m, double speed) {
  switch (m) {
    case MotionKind::Left: return {-speed, 0};
    case MotionKind::Right: return {speed, 0};
    case MotionKind::Up: return {0, -speed};
    case MotionKind::Down: return {0, speed};
    case MotionKind::Still: return {0, 0};
  }
  return {0, 0};
}

/// Coverage test at pixel centre (px, py) for an object centred at (cx, cy).
inline bool covers(const ObjectSpec& o, double cx, double cy, double px, double py) {
  const double r = o.extent / 2;
  switch (o.shape) {
    case ShapeKind::Square: return px >= cx - r && px < cx + r && py >= cy - r && py < cy + r;
    case ShapeKind::Circle: return (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
    case ShapeKind::Triangle: {
      // Apex up, base at the bottom edge of the bounding square.
      if (py < cy - r || py >= cy + r) return false;
      const double half_width = (py - (cy - r)) / 2;
      return px >= cx - half_width && px < cx + half_width;
    }
  }
  return false;
}

inline ObjectSpec random_object(Rng& rng) {
  ObjectSpec o;
  o.shape = static_cast<ShapeKind>(rng.uniform_int(0, 2));
  o.color = static_cast<ColorKind>(rng.uniform_int(0, 3));
  o.size = static_cast<SizeKind>(rng.uniform_int(0, 1));
  o.motion = static_cast<MotionKind>(rng.uniform_int(0, 4));
  return o;
}

/// Copy of `o` with exactly one attribute changed.
inline ObjectSpec one_attribute_off(const ObjectSpec& o, Rng& rng) {
  ObjectSpec d = o;
  switch (rng.uniform_int(0, 3)) {
    case 0: d.shape = static_cast<ShapeKind>((static_cast<int>(o.shape) + rng.uniform_int(1, 2)) % 3); break;
    case 1: d.color = static_cast<ColorKind>((static_cast<int>(o.color) + rng.uniform_int(1, 3)) % 4); break;
    case 2: d.size = o.size == SizeKind::Small ? SizeKind::Large : SizeKind::Small; break;
    default: d.motion = static_cast<MotionKind>((static_cast<int>(o.motion) + rng.uniform_int(1, 4)) % 5); break;
  }
  return d;
}

inline void place(ObjectSpec& o, Rng& rng, const DataConfig& cfg) {
  o.extent = o.size == SizeKind::Small ? rng.uniform(12, 14) : rng.uniform(20, 24);
  const auto v = velocity(o.motion, cfg.speed);
  const double travel_x = v[0] * (cfg.frames - 1), travel_y = v[1] * (cfg.frames - 1);
  // Start so that the centre stays inside the frame for the whole clip.
  auto range = [&](double travel, double extent_px) {
    const double lo = std::max(o.extent / 2, o.extent / 2 - travel), hi = std::min(extent_px - o.extent / 2, extent_px - o.extent / 2 - travel);
    return std::array<double, 2>{lo, std::max(lo, hi)};
  };
  const auto rx = range(travel_x, cfg.width), ry = range(travel_y, cfg.height);
  o.x = rng.uniform(rx[0], rx[1]);
  o.y = rng.uniform(ry[0], ry[1]);
}
}  // namespace detail

/// Random scene whose expression identifies its target uniquely.
inline SceneSpec sample_scene(std::uint64_t seed, const DataConfig& cfg) {
  cfg.validate();
  Rng rng(seed);
  for (int attempt = 0; attempt < 100; ++attempt) {
    SceneSpec s;
    s.seed = seed;
    const int n = rng.uniform_int(cfg.min_objects, cfg.max_objects);
    ObjectSpec target = detail::random_object(rng);
    s.objects.push_back(target);
    for (int i = 1; i < n; ++i)
      s.objects.push_back(rng.uniform() < cfg.hard_distractor_prob ? detail::one_attribute_off(target, rng)
                                                                   : detail::random_object(rng));
    for (auto& o : s.objects) detail::place(o, rng, cfg);
    // Target is drawn last so it is never occluded.
    std::swap(s.objects.front(), s.objects.back());
    s.target_index = n - 1;
    if (s.unique()) return s;
  }
  throw InputError("could not sample a scene with a unique target after 100 attempts (seed " + std::to_string(seed) + ")");
}

/// Renders a scene; objects are painted in order, background has fixed
/// per-clip noise.
inline ClipRecord generate_clip(const SceneSpec& spec, const DataConfig& cfg, const std::string& id = "clip") {
  cfg.validate();
  if (spec.objects.empty() || spec.target_index < 0 || spec.target_index >= static_cast<int>(spec.objects.size()))
    throw InputError("scene has no valid target");
  if (!spec.unique()) throw InputError("expression '" + spec.expression() + "' does not identify a unique object");
  const int Tn = cfg.frames, H = cfg.height, W = cfg.width;
  ClipRecord r;
  r.id = id;
  r.frames = Tn;
  r.height = H;
  r.width = W;
  r.pixels.assign(static_cast<std::size_t>(Tn) * H * W * 3, 0.f);
  r.masks.assign(static_cast<std::size_t>(Tn) * H * W, 0);
  Rng noise(detail::mix_seed(spec.seed, 0xBAC6));
  std::vector<float> background(static_cast<std::size_t>(H) * W);
  for (auto& b : background) b = static_cast<float>(0.12 + 0.08 * noise.uniform());

  for (int t = 0; t < Tn; ++t) {
    float* img = r.pixels.data() + static_cast<std::size_t>(t) * H * W * 3;
    for (std::size_t p = 0; p < background.size(); ++p) img[3 * p] = img[3 * p + 1] = img[3 * p + 2] = background[p];
    for (std::size_t k = 0; k < spec.objects.size(); ++k) {
      const auto& o = spec.objects[k];
      const auto v = detail::velocity(o.motion, cfg.speed);
      const double cx = o.x + v[0] * t, cy = o.y + v[1] * t;
      const auto col = detail::rgb(o.color);
      const bool is_target = static_cast<int>(k) == spec.target_index;
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          if (!detail::covers(o, cx, cy, x + 0.5, y + 0.5)) continue;
          const std::size_t p = static_cast<std::size_t>(y) * W + x;
          img[3 * p] = col[0];
          img[3 * p + 1] = col[1];
          img[3 * p + 2] = col[2];
          r.masks[static_cast<std::size_t>(t) * H * W + p] = is_target ? 1 : 0;
        }
    }
  }
  for (int t = 0; t < Tn; ++t) {
    int x0 = W, x1 = -1, y0 = H, y1 = -1;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        if (r.masks[static_cast<std::size_t>(t) * H * W + y * W + x]) {
          x0 = std::min(x0, x);
          x1 = std::max(x1, x);
          y0 = std::min(y0, y);
          y1 = std::max(y1, y);
        }
    const bool vis = x1 >= 0;
    r.visible.push_back(vis ? 1 : 0);
    if (vis)
      r.boxes.push_back({(x0 + x1 + 1) / (2.0 * W), (y0 + y1 + 1) / (2.0 * H), (x1 + 1 - x0) / double(W), (y1 + 1 - y0) / double(H)});
    else
      r.boxes.push_back({0, 0, 0, 0});
  }
  r.expression = spec.expression();
  r.tokens = tokenize(r.expression);
  return r;
}

/// `count` clips with seeds derived from (cfg.seed, split, index).
inline std::vector<ClipRecord> generate_split(const DataConfig& cfg, const std::string& split, int count) {
  std::vector<ClipRecord> out;
  std::uint64_t salt = 0xcbf29ce484222325ull;  // FNV-1a; std::hash is not stable across libraries
  for (unsigned char ch : split) salt = (salt ^ ch) * 0x100000001b3ull;
  for (int i = 0; i < count; ++i) {
    char id[64];
    std::snprintf(id, sizeof id, "%s_%05d", split.c_str(), i);
    const std::uint64_t seed = detail::mix_seed(cfg.seed, salt * 1000003ull + static_cast<std::uint64_t>(i));
    out.push_back(generate_clip(sample_scene(seed, cfg), cfg, id));
  }
  return out;
}

// --------------------------------------------------------------- disk format

namespace detail {
inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& data) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw IoError("write failed for " + p.string());
}

/// Parses "<magic> <w> <h> [maxval]" and returns the offset of the raster.
inline std::size_t parse_netpbm_header(const std::string& s, const std::string& magic, int fields, std::vector<int>& values,
                                       const std::filesystem::path& p) {
  if (s.compare(0, magic.size(), magic) != 0) throw IoError(p.string() + ": expected " + magic + " image");
  std::size_t i = magic.size();
  while (static_cast<int>(values.size()) < fields) {
    while (i < s.size() && (std::isspace(static_cast<unsigned char>(s[i])) || s[i] == '#')) {
      if (s[i] == '#')
        while (i < s.size() && s[i] != '\n') ++i;
      else
        ++i;
    }
    std::size_t j = i;
    while (j < s.size() && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
    if (j == i) throw IoError(p.string() + ": malformed header");
    values.push_back(std::stoi(s.substr(i, j - i)));
    i = j;
  }
  if (i >= s.size() || !std::isspace(static_cast<unsigned char>(s[i]))) throw IoError(p.string() + ": malformed header");
  return i + 1;
}
}  // namespace detail

/// Binary PPM, one frame [H, W, 3] in [0, 1].
inline void write_ppm(const std::filesystem::path& p, const float* rgb, int H, int W) {
  std::string s = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  s.reserve(s.size() + static_cast<std::size_t>(H) * W * 3);
  for (std::size_t i = 0; i < static_cast<std::size_t>(H) * W * 3; ++i)
    s.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(rgb[i], 0.f, 1.f) * 255.f))));
  detail::write_file(p, s);
}

inline std::vector<float> read_ppm(const std::filesystem::path& p, int& H, int& W) {
  const std::string s = detail::read_file(p);
  std::vector<int> v;
  const std::size_t off = detail::parse_netpbm_header(s, "P6", 3, v, p);
  W = v[0];
  H = v[1];
  if (v[2] != 255) throw IoError(p.string() + ": only 8-bit PPM is supported");
  const std::size_t n = static_cast<std::size_t>(H) * W * 3;
  if (s.size() < off + n) throw IoError(p.string() + ": truncated raster");
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<unsigned char>(s[off + i]) / 255.f;
  return out;
}

/// Binary PBM; a set bit is a foreground pixel.
inline void write_pbm(const std::filesystem::path& p, std::span<const std::uint8_t> m, int H, int W) {
  std::string s = "P4\n" + std::to_string(W) + " " + std::to_string(H) + "\n";
  const int row_bytes = (W + 7) / 8;
  for (int y = 0; y < H; ++y)
    for (int b = 0; b < row_bytes; ++b) {
      unsigned char byte = 0;
      for (int k = 0; k < 8; ++k) {
        const int x = b * 8 + k;
        if (x < W && m[static_cast<std::size_t>(y) * W + x]) byte |= static_cast<unsigned char>(0x80 >> k);
      }
      s.push_back(static_cast<char>(byte));
    }
  detail::write_file(p, s);
}

inline std::vector<std::uint8_t> read_pbm(const std::filesystem::path& p, int& H, int& W) {
  const std::string s = detail::read_file(p);
  std::vector<int> v;
  const std::size_t off = detail::parse_netpbm_header(s, "P4", 2, v, p);
  W = v[0];
  H = v[1];
  const int row_bytes = (W + 7) / 8;
  if (s.size() < off + static_cast<std::size_t>(row_bytes) * H) throw IoError(p.string() + ": truncated raster");
  std::vector<std::uint8_t> m(static_cast<std::size_t>(H) * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const auto byte = static_cast<unsigned char>(s[off + static_cast<std::size_t>(y) * row_bytes + x / 8]);
      m[static_cast<std::size_t>(y) * W + x] = (byte >> (7 - x % 8)) & 1;
    }
  return m;
}

inline std::string frame_name(const char* stem, int t, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%03d.%s", stem, t, ext);
  return buf;
}

inline void write_vocabulary(const std::filesystem::path& p) {
  std::string s;
  for (const auto& w : vocabulary()) s += w + "\n";
  detail::write_file(p, s);
}

inline std::vector<std::string> read_vocabulary(const std::filesystem::path& p) {
  std::istringstream is(detail::read_file(p));
  std::vector<std::string> v;
  std::string w;
  while (std::getline(is, w))
    if (!w.empty()) v.push_back(w);
  return v;
}

/// Writes clips/<id>/frame_%03d.ppm, clips/<id>/mask_%03d.pbm,
/// manifest.jsonl and vocab.txt under `dir`.
inline void write_dataset(const std::vector<ClipRecord>& clips, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "clips", ec);
  if (ec) throw IoError("cannot create " + (dir / "clips").string() + ": " + ec.message());
  std::string manifest;
  for (const auto& c : clips) {
    const fs::path rel = fs::path("clips") / c.id;
    fs::create_directories(dir / rel, ec);
    if (ec) throw IoError("cannot create " + (dir / rel).string() + ": " + ec.message());
    nlohmann::json rec;
    rec["clip_id"] = c.id;
    rec["height"] = c.height;
    rec["width"] = c.width;
    rec["expression"] = c.expression;
    rec["tokens"] = c.tokens;
    rec["visible"] = c.visible;
    rec["boxes"] = c.boxes;
    for (int t = 0; t < c.frames; ++t) {
      const fs::path f = rel / frame_name("frame", t, "ppm"), m = rel / frame_name("mask", t, "pbm");
      write_ppm(dir / f, c.pixels.data() + c.frame_pixels() * 3 * t, c.height, c.width);
      write_pbm(dir / m, c.mask(t), c.height, c.width);
      rec["frames"].push_back(f.generic_string());
      rec["masks"].push_back(m.generic_string());
    }
    manifest += rec.dump() + "\n";
  }
  detail::write_file(dir / "manifest.jsonl", manifest);
  write_vocabulary(dir / "vocab.txt");
}

inline std::vector<ClipRecord> read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.jsonl";
  std::istringstream is(detail::read_file(manifest_path));
  std::vector<ClipRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = manifest_path.string() + ":" + std::to_string(line_no);
    ClipRecord c;
    try {
      const auto rec = nlohmann::json::parse(line);
      c.id = rec.at("clip_id").get<std::string>();
      c.height = rec.at("height").get<int>();
      c.width = rec.at("width").get<int>();
      c.expression = rec.at("expression").get<std::string>();
      c.tokens = rec.at("tokens").get<std::vector<int>>();
      c.visible = rec.at("visible").get<std::vector<std::uint8_t>>();
      c.boxes = rec.at("boxes").get<std::vector<std::array<double, 4>>>();
      const auto frames = rec.at("frames").get<std::vector<std::string>>();
      const auto masks = rec.at("masks").get<std::vector<std::string>>();
      if (frames.size() != masks.size() || frames.size() != c.visible.size() || frames.size() != c.boxes.size())
        throw IoError(where + ": frame, mask, box and visibility counts differ");
      c.frames = static_cast<int>(frames.size());
      for (int t = 0; t < c.frames; ++t) {
        int h = 0, w = 0;
        auto px = read_ppm(dir / frames[t], h, w);
        if (h != c.height || w != c.width) throw IoError((dir / frames[t]).string() + ": size differs from manifest");
        c.pixels.insert(c.pixels.end(), px.begin(), px.end());
        auto m = read_pbm(dir / masks[t], h, w);
        if (h != c.height || w != c.width) throw IoError((dir / masks[t]).string() + ": size differs from manifest");
        c.masks.insert(c.masks.end(), m.begin(), m.end());
      }
    } catch (const nlohmann::json::exception& e) {
      throw IoError(where + ": malformed record (" + e.what() + ")");
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace bifit
