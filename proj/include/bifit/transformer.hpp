#pragma once

// Frame-independent multimodal encoder/decoder with inter-frame interaction
// (IFI) layers interleaved in the decoder.

#include <cstdint>
#include <vector>

#include "bifit/encoders.hpp"

namespace bifit {

enum class QueryLayout { FrameIndependent, SpatioTemporal };

/// Decoder query state. Frame-independent layout is [B*T, N, C]; the
/// spatio-temporal layout is [B, T*N, C]. Both share the same row order, so
/// switching layouts only relabels the shape.
template <class T>
struct InstanceEmbeddings {
  Var<T> q;
  int batch = 1, frames = 1, queries = 1;
  QueryLayout layout = QueryLayout::FrameIndependent;

  int channels() const { return q.cols(); }

  InstanceEmbeddings unfold() const {
    if (layout != QueryLayout::FrameIndependent) throw ContractError("unfold expects frame-independent layout");
    return {reshape(q, {batch, frames * queries, channels()}), batch, frames, queries, QueryLayout::SpatioTemporal};
  }
  InstanceEmbeddings fold() const {
    if (layout != QueryLayout::SpatioTemporal) throw ContractError("fold expects spatio-temporal layout");
    return {reshape(q, {batch * frames, queries, channels()}), batch, frames, queries, QueryLayout::FrameIndependent};
  }
};

/// Encoder output: frame-major tokens (all levels of frame 0, then frame 1, …)
/// and the same content split back into pyramid levels.
template <class T>
struct MemoryFeatures {
  Var<T> tokens;        // [T * S, C], S = tokens per frame
  Tensor<T> pos;        // [T * S, C] positional encoding for keys
  FeaturePyramid<T> levels;

  int frames() const { return levels.frames; }
  int frame_tokens() const { return levels.frame_tokens(); }
};

namespace detail {
/// Row permutation from level-major concatenation to frame-major order.
inline std::vector<int> frame_major_order(const std::vector<LevelSize>& sizes, int frames) {
  std::vector<int> offsets;
  int off = 0;
  for (const auto& s : sizes) {
    offsets.push_back(off);
    off += frames * s.pixels();
  }
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(off));
  for (int t = 0; t < frames; ++t)
    for (std::size_t l = 0; l < sizes.size(); ++l)
      for (int p = 0; p < sizes[l].pixels(); ++p) idx.push_back(offsets[l] + t * sizes[l].pixels() + p);
  return idx;
}

inline std::vector<int> inverse_permutation(const std::vector<int>& p) {
  std::vector<int> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[static_cast<std::size_t>(p[i])] = static_cast<int>(i);
  return inv;
}

template <class T>
Tensor<T> frame_major_pos(const std::vector<LevelSize>& sizes, int frames, int C) {
  const int S = [&] {
    int n = 0;
    for (const auto& s : sizes) n += s.pixels();
    return n;
  }();
  Tensor<T> pos({frames * S, C});
  for (int t = 0; t < frames; ++t) {
    std::size_t row = static_cast<std::size_t>(t) * S;
    for (const auto& s : sizes) {
      Tensor<T> pe = sinusoidal_pe_2d<T>(s.height, s.width, C);
      std::copy(pe.data(), pe.data() + pe.size(), pos.data() + row * C);
      row += static_cast<std::size_t>(s.pixels());
    }
  }
  return pos;
}
}  // namespace detail

template <class T>
struct TransformerEncoder {
  Var<T> level_embed;  // [N_l, C]
  std::vector<EncoderBlock<T>> blocks;

  static TransformerEncoder create(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) {
    TransformerEncoder e;
    e.level_embed = ps.normal("encoder.level_embed", {cfg.levels, cfg.channels}, 1.0, rng);
    for (int i = 0; i < cfg.encoder_layers; ++i)
      e.blocks.push_back(EncoderBlock<T>::create(ps, "encoder.block" + std::to_string(i), cfg, rng));
    return e;
  }
};

/// Dense multi-scale self-attention, restricted to tokens of the same frame.
template <class T>
MemoryFeatures<T> encode_multiscale(const FeaturePyramid<T>& pyramid, const TransformerEncoder<T>& enc) {
  const int C = pyramid.channels, Tn = pyramid.frames;
  if (enc.level_embed.rows() != static_cast<int>(pyramid.levels.size()) || enc.level_embed.cols() != C)
    throw DimensionError("encoder level embedding does not match the pyramid");
  std::vector<Var<T>> parts;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    if (pyramid.levels[l].cols() != C) throw DimensionError("pyramid channel mismatch at level " + std::to_string(l));
    parts.push_back(add_rowvec(pyramid.levels[l], slice_rows(enc.level_embed, static_cast<int>(l), 1)));
  }
  const auto order = detail::frame_major_order(pyramid.sizes, Tn);
  MemoryFeatures<T> mem;
  mem.pos = detail::frame_major_pos<T>(pyramid.sizes, Tn, C);
  Var<T> x = gather_rows(concat_rows(parts), order);
  for (const auto& b : enc.blocks) x = b(x, mem.pos, Tn);
  mem.tokens = x;

  Var<T> level_major = gather_rows(x, detail::inverse_permutation(order));
  mem.levels = pyramid;
  int off = 0;
  for (std::size_t l = 0; l < pyramid.levels.size(); ++l) {
    const int rows = Tn * pyramid.sizes[l].pixels();
    mem.levels.levels[l] = slice_rows(level_major, off, rows);
    off += rows;
  }
  return mem;
}

/// Language queries: the sentence feature repeated N times per frame, plus
/// per-slot positional embeddings shared across frames.
template <class T>
struct QueryInit {
  InstanceEmbeddings<T> content;
  Var<T> pos;  // [T*N, C]
};

template <class T>
QueryInit<T> init_queries(const Var<T>& sentence, int queries, int frames, const Var<T>& query_embed) {
  if (queries < 1 || frames < 1) throw DimensionError("init_queries: N and T must be >= 1");
  if (sentence.rows() != 1) throw DimensionError("init_queries: sentence feature must be [1, C]");
  if (query_embed.rows() != queries || query_embed.cols() != sentence.cols())
    throw DimensionError("init_queries: query embedding must be [N, C]");
  const int C = sentence.cols();
  QueryInit<T> qi;
  qi.content = {reshape(repeat_rows(sentence, frames * queries), {frames, queries, C}), 1, frames, queries,
                QueryLayout::FrameIndependent};
  qi.pos = repeat_rows(query_embed, frames);
  return qi;
}

template <class T>
struct DecoderLayer {
  MultiHeadAttention<T> self_attn, cross_attn;
  LayerNorm<T> norm1, norm2, norm3;
  FeedForward<T> ffn;

  static DecoderLayer create(ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg, Rng& rng) {
    return {MultiHeadAttention<T>::create(ps, name + ".self_attn", cfg.channels, cfg.heads, rng),
            MultiHeadAttention<T>::create(ps, name + ".cross_attn", cfg.channels, cfg.heads, rng),
            LayerNorm<T>::create(ps, name + ".norm1", cfg.channels),
            LayerNorm<T>::create(ps, name + ".norm2", cfg.channels),
            LayerNorm<T>::create(ps, name + ".norm3", cfg.channels),
            FeedForward<T>::create(ps, name + ".ffn", cfg.channels, cfg.ffn_dim, rng)};
  }
};

/// One frame-independent decoder layer: queries of frame t only see each
/// other and the memory tokens of frame t.
template <class T>
InstanceEmbeddings<T> decoder_layer(const InstanceEmbeddings<T>& in, const Var<T>& query_pos, const MemoryFeatures<T>& mem,
                                    const DecoderLayer<T>& layer) {
  if (in.layout != QueryLayout::FrameIndependent) throw ContractError("decoder_layer expects frame-independent layout");
  const int groups = in.batch * in.frames;
  if (mem.tokens.rows() % groups != 0 || mem.tokens.rows() / groups != mem.frame_tokens())
    throw ContractError("decoder_layer: memory frames do not match query frames");
  const Shape shape = in.q.shape();
  Var<T> q = in.q;
  Var<T> qk = add(q, query_pos);
  q = layer.norm1(add(q, layer.self_attn(qk, qk, q, groups)));
  Var<T> key = add(mem.tokens, constant(mem.pos));
  q = layer.norm2(add(q, layer.cross_attn(add(q, query_pos), key, mem.tokens, groups)));
  q = layer.norm3(add(q, layer.ffn(q)));
  return {reshape(q, shape), in.batch, in.frames, in.queries, in.layout};
}

template <class T>
struct IfiLayer {
  MultiHeadAttention<T> attn;
  LayerNorm<T> norm1, norm2;
  FeedForward<T> ffn;

  static IfiLayer create(ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg, Rng& rng) {
    return {MultiHeadAttention<T>::create(ps, name + ".attn", cfg.channels, cfg.heads, rng),
            LayerNorm<T>::create(ps, name + ".norm1", cfg.channels), LayerNorm<T>::create(ps, name + ".norm2", cfg.channels),
            FeedForward<T>::create(ps, name + ".ffn", cfg.channels, cfg.ffn_dim, rng)};
  }
};

/// Q1 = LN(Attn(Re(Q)) + Re(Q)); Q2 = Re(LN(FFN(Q1) + Q1)). Attention spans
/// all T*N embeddings of a clip; no positional information is injected.
template <class T>
InstanceEmbeddings<T> ifi_layer(const InstanceEmbeddings<T>& in, const IfiLayer<T>& layer) {
  if (in.frames * in.queries == 0) throw InputError("ifi_layer: no embeddings");
  InstanceEmbeddings<T> st = in.unfold();
  Var<T> x = st.q;
  Var<T> q1 = layer.norm1(add(layer.attn(x, x, x, st.batch), x));
  Var<T> q2 = layer.norm2(add(layer.ffn(q1), q1));
  st.q = reshape(q2, x.shape());
  return st.fold();
}

template <class T>
struct TransformerDecoder {
  Var<T> query_embed;  // [N, C]
  std::vector<DecoderLayer<T>> layers;
  std::vector<IfiLayer<T>> ifi;
  int ratio_decoder = 1, ratio_ifi = 1;

  static TransformerDecoder create(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) {
    TransformerDecoder d;
    d.query_embed = ps.normal("decoder.query_embed", {cfg.queries, cfg.channels}, 1.0, rng);
    for (int i = 0; i < cfg.decoder_layers; ++i)
      d.layers.push_back(DecoderLayer<T>::create(ps, "decoder.layer" + std::to_string(i), cfg, rng));
    d.ratio_decoder = cfg.ifi_ratio_decoder;
    d.ratio_ifi = cfg.ifi_ratio_ifi;
    if (cfg.ifi_enabled) {
      const int n = (cfg.decoder_layers / cfg.ifi_ratio_decoder) * cfg.ifi_ratio_ifi;
      for (int i = 0; i < n; ++i) d.ifi.push_back(IfiLayer<T>::create(ps, "decoder.ifi" + std::to_string(i), cfg, rng));
    }
    return d;
  }
};

struct DecodeTrace {
  int decoder_layers_run = 0;
  int ifi_layers_run = 0;
};

/// Runs the decoder stack. Element i of the result is the state after
/// decoder layer i (and any IFI layers that follow it); with no layers the
/// initial queries are returned.
template <class T>
std::vector<InstanceEmbeddings<T>> decode(const QueryInit<T>& init, const MemoryFeatures<T>& mem,
                                          const TransformerDecoder<T>& dec, DecodeTrace* trace = nullptr) {
  std::vector<InstanceEmbeddings<T>> outs;
  InstanceEmbeddings<T> q = init.content;
  std::size_t next_ifi = 0;
  for (std::size_t i = 0; i < dec.layers.size(); ++i) {
    q = decoder_layer(q, init.pos, mem, dec.layers[i]);
    if (trace) ++trace->decoder_layers_run;
    if (!dec.ifi.empty() && (i + 1) % static_cast<std::size_t>(dec.ratio_decoder) == 0)
      for (int r = 0; r < dec.ratio_ifi && next_ifi < dec.ifi.size(); ++r) {
        q = ifi_layer(q, dec.ifi[next_ifi++]);
        if (trace) ++trace->ifi_layers_run;
      }
    outs.push_back(q);
  }
  if (outs.empty()) outs.push_back(q);
  return outs;
}

/// Multiply-accumulate count of one IFI layer from its matrix products:
/// Q/K/V/output projections, scores, weighted sum, and the two FFN layers.
/// Head count does not change the total (heads partition the channels).
inline std::int64_t ifi_flop_count(std::int64_t frames, std::int64_t queries, std::int64_t channels, std::int64_t heads,
                                   std::int64_t ffn_dim = -1) {
  if (frames <= 0 || queries <= 0 || channels <= 0 || heads <= 0) throw InputError("ifi_flop_count: arguments must be positive");
  if (ffn_dim < 0) ffn_dim = 2 * channels;
  const std::int64_t tokens = frames * queries;
  const std::int64_t projections = 4 * tokens * channels * channels;
  const std::int64_t attention = 2 * tokens * tokens * channels;
  const std::int64_t ffn = 2 * tokens * channels * ffn_dim;
  return projections + attention + ffn;
}

}  // namespace bifit
