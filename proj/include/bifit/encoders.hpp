#pragma once

// Visual and linguistic feature extraction, plus the fixed sinusoidal
// positional encodings shared by the fusion and transformer stages.

#include <cmath>
#include <vector>

#include "bifit/model_config.hpp"
#include "bifit/nn.hpp"

namespace bifit {

/// Frames [T, H, W, 3] with values in [0, 1].
template <class T>
struct VideoClip {
  Tensor<T> frames;

  int num_frames() const { return frames.dim(0); }
  int height() const { return frames.dim(1); }
  int width() const { return frames.dim(2); }

  void validate() const {
    if (frames.rank() != 4 || frames.dim(3) != 3) throw DimensionError("clip frames must be [T,H,W,3]");
    if (num_frames() < 1) throw DimensionError("clip must contain at least one frame");
    if (height() % 64 != 0 || width() % 64 != 0 || height() == 0 || width() == 0)
      throw DimensionError("frame size " + std::to_string(height()) + "x" + std::to_string(width()) +
                           " is not divisible by 64");
  }
};

struct LevelSize {
  int height = 0, width = 0, stride = 0;
  int pixels() const { return height * width; }
};

/// Multi-level feature sequence. Level i is stored as [T*H_i*W_i, C] in
/// frame-major NHWC order.
template <class T>
struct FeaturePyramid {
  std::vector<Var<T>> levels;
  std::vector<LevelSize> sizes;
  int frames = 0;
  int channels = 0;

  Shape level_shape(std::size_t i) const { return {frames, sizes[i].height, sizes[i].width, channels}; }
  int frame_tokens() const {
    int n = 0;
    for (const auto& s : sizes) n += s.pixels();
    return n;
  }
};

/// Backbone output: the four pyramid levels plus the stride-4 map for the FPN.
template <class T>
struct VisualFeatures {
  FeaturePyramid<T> pyramid;
  Var<T> stride4;
  LevelSize stride4_size;
};

// ----------------------------------------------------- positional encodings

/// 2-D sine/cosine encoding [H, W, C]: channels [0, C/2) encode the row
/// index, [C/2, C) the column index, each as interleaved (sin, cos) pairs.
template <class T>
Tensor<T> sinusoidal_pe_2d(int H, int W, int C) {
  if (C <= 0 || C % 4 != 0) throw DimensionError("2-D positional encoding needs channels divisible by 4, got " + std::to_string(C));
  const int half = C / 2;
  Tensor<T> pe({H, W, C});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      T* row = pe.data() + static_cast<std::size_t>(y * W + x) * C;
      for (int i = 0; i < half / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / half);
        row[2 * i] = static_cast<T>(std::sin(y * freq));
        row[2 * i + 1] = static_cast<T>(std::cos(y * freq));
        row[half + 2 * i] = static_cast<T>(std::sin(x * freq));
        row[half + 2 * i + 1] = static_cast<T>(std::cos(x * freq));
      }
    }
  return pe;
}

/// Transformer sine/cosine encoding over positions [L, C].
template <class T>
Tensor<T> sinusoidal_pe_1d(int L, int C) {
  if (C <= 0 || C % 2 != 0) throw DimensionError("1-D positional encoding needs an even channel count, got " + std::to_string(C));
  Tensor<T> pe({L, C});
  for (int p = 0; p < L; ++p)
    for (int i = 0; i < C / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / C);
      pe.at(p, 2 * i) = static_cast<T>(std::sin(p * freq));
      pe.at(p, 2 * i + 1) = static_cast<T>(std::cos(p * freq));
    }
  return pe;
}

/// Repeats a per-frame encoding [P, C] for `frames` frames -> [frames*P, C].
template <class T>
Tensor<T> tile_frames(const Tensor<T>& pe, int frames) {
  const int C = pe.cols(), P = pe.rows();
  Tensor<T> out({frames * P, C});
  for (int t = 0; t < frames; ++t) std::copy(pe.data(), pe.data() + pe.size(), out.data() + static_cast<std::size_t>(t) * pe.size());
  return out;
}

// ------------------------------------------------------------ image encoder

/// Five strided 3×3 stages (GroupNorm + GELU) emitting strides 4..32, and a
/// stride-2 convolution on the stride-32 map for the stride-64 level.
template <class T>
struct ImageEncoder {
  std::vector<Conv2d<T>> stages;
  std::vector<GroupNorm<T>> norms;
  Conv2d<T> extra;
  GroupNorm<T> extra_norm;

  static ImageEncoder create(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) {
    ImageEncoder e;
    const int widths[5] = {cfg.stem1, cfg.stem2, cfg.channels, cfg.channels, cfg.channels};
    int cin = 3;
    for (int i = 0; i < 5; ++i) {
      const std::string name = "image.stage" + std::to_string(i + 1);
      e.stages.push_back(Conv2d<T>::create(ps, name + ".conv", cin, widths[i], 3, 2, rng));
      e.norms.push_back(GroupNorm<T>::create(ps, name + ".norm", widths[i], cfg.norm_groups));
      cin = widths[i];
    }
    e.extra = Conv2d<T>::create(ps, "image.extra.conv", cfg.channels, cfg.channels, 3, 2, rng);
    e.extra_norm = GroupNorm<T>::create(ps, "image.extra.norm", cfg.channels, cfg.norm_groups);
    return e;
  }
};

template <class T>
VisualFeatures<T> encode_frames(const VideoClip<T>& clip, const ImageEncoder<T>& enc) {
  clip.validate();
  const int Tn = clip.num_frames();
  int H = clip.height(), W = clip.width();
  Var<T> x = constant(clip.frames.reshaped({Tn * H * W, 3}));
  VisualFeatures<T> out;
  out.pyramid.frames = Tn;
  for (std::size_t i = 0; i < enc.stages.size(); ++i) {
    const auto& conv = enc.stages[i];
    x = conv(x, Tn, H, W);
    H = conv.out_size(H);
    W = conv.out_size(W);
    x = gelu(enc.norms[i](x, Tn));
    const int stride = 2 << i;
    if (stride == 4) {
      out.stride4 = x;
      out.stride4_size = {H, W, 4};
    } else if (stride >= 8) {
      out.pyramid.levels.push_back(x);
      out.pyramid.sizes.push_back({H, W, stride});
    }
  }
  Var<T> top = enc.extra_norm(enc.extra(x, Tn, H, W), Tn);
  out.pyramid.levels.push_back(top);
  out.pyramid.sizes.push_back({enc.extra.out_size(H), enc.extra.out_size(W), 64});
  out.pyramid.channels = top.cols();
  return out;
}

// ------------------------------------------------------------- text encoder

/// Post-norm transformer block: self-attention then FFN, residual + LN each.
template <class T>
struct EncoderBlock {
  MultiHeadAttention<T> attn;
  LayerNorm<T> norm1, norm2;
  FeedForward<T> ffn;

  static EncoderBlock create(ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg, Rng& rng) {
    return {MultiHeadAttention<T>::create(ps, name + ".attn", cfg.channels, cfg.heads, rng),
            LayerNorm<T>::create(ps, name + ".norm1", cfg.channels), LayerNorm<T>::create(ps, name + ".norm2", cfg.channels),
            FeedForward<T>::create(ps, name + ".ffn", cfg.channels, cfg.ffn_dim, rng)};
  }

  /// `pos` (may be empty) is added to queries and keys only.
  Var<T> operator()(const Var<T>& x, const Tensor<T>& pos, int groups = 1) const {
    Var<T> qk = pos.empty() ? x : add(x, constant(pos));
    Var<T> h = norm1(add(x, attn(qk, qk, x, groups)));
    return norm2(add(h, ffn(h)));
  }
};

template <class T>
struct TextEncoder {
  Var<T> embed;  // [vocab, C]
  std::vector<EncoderBlock<T>> blocks;
  int max_words = 12;

  static TextEncoder create(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) {
    TextEncoder t;
    t.embed = ps.normal("text.embed", {cfg.vocab_size, cfg.channels}, 1.0, rng);
    for (int i = 0; i < cfg.text_layers; ++i)
      t.blocks.push_back(EncoderBlock<T>::create(ps, "text.block" + std::to_string(i), cfg, rng));
    t.max_words = cfg.max_words;
    return t;
  }
};

/// Word features [L, C] for token ids.
template <class T>
Var<T> encode_text(const std::vector<int>& ids, const TextEncoder<T>& enc) {
  if (ids.empty()) throw InputError("expression has no tokens");
  if (static_cast<int>(ids.size()) > enc.max_words)
    throw InputError("expression has " + std::to_string(ids.size()) + " tokens, limit is " + std::to_string(enc.max_words));
  const int L = static_cast<int>(ids.size()), C = enc.embed.cols();
  Var<T> x = add(embedding(enc.embed, ids), constant(sinusoidal_pe_1d<T>(L, C)));
  for (const auto& b : enc.blocks) x = b(x, Tensor<T>());
  return x;
}

/// Sentence pooling: tanh(linear(mean of word rows)) -> [1, C].
template <class T>
struct SentencePooler {
  Linear<T> proj;
  static SentencePooler create(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) {
    return {Linear<T>::create(ps, "text.pool", cfg.channels, cfg.channels, rng)};
  }
};

template <class T>
Var<T> pool_sentence(const Var<T>& words, const SentencePooler<T>& pooler) {
  if (!words.defined() || words.rows() == 0) throw InputError("pool_sentence: no word rows");
  return tanh(pooler.proj(mean_rows(words)));
}

}  // namespace bifit
