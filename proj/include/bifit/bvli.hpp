#pragma once

// Bidirectional vision-language interaction. Two parallel submodules read
// the same raw inputs: one refines the word features level by level against
// the visual pyramid and pools them into a sentence feature, the other gates
// every visual level with attention over the raw words.

#include <utility>
#include <vector>

#include "bifit/encoders.hpp"

namespace bifit {

/// Cross-attention followed by either an elementwise product with the raw
/// query ("attention + multiply") or residual/LN/FFN ("attention + FFN").
template <class T>
struct CrossModalFusion {
  MultiHeadAttention<T> attn;
  Fusion mode = Fusion::AttentionMultiply;
  // Only used by Fusion::AttentionFfn.
  LayerNorm<T> norm1, norm2;
  FeedForward<T> ffn;

  static CrossModalFusion create(ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg, Rng& rng) {
    CrossModalFusion f;
    f.attn = MultiHeadAttention<T>::create(ps, name + ".attn", cfg.channels, cfg.heads, rng);
    f.mode = cfg.fusion;
    if (f.mode == Fusion::AttentionFfn) {
      f.norm1 = LayerNorm<T>::create(ps, name + ".norm1", cfg.channels);
      f.norm2 = LayerNorm<T>::create(ps, name + ".norm2", cfg.channels);
      f.ffn = FeedForward<T>::create(ps, name + ".ffn", cfg.channels, cfg.ffn_dim, rng);
    }
    return f;
  }
};

/// query [M, C] attends to context [K, C]. Positional encodings (either may
/// be empty) are added before the query/key projections; values use the raw
/// context.
template <class T>
Var<T> cross_attend_multiply(const Var<T>& query, const Var<T>& context, const CrossModalFusion<T>& fusion,
                             const Tensor<T>& query_pe, const Tensor<T>& context_pe) {
  if (query.rows() == 0 || context.rows() == 0) throw InputError("cross_attend_multiply: empty query or context");
  if (query.cols() != context.cols())
    throw DimensionError("cross_attend_multiply: channel mismatch " + std::to_string(query.cols()) + " vs " +
                         std::to_string(context.cols()));
  Var<T> q = query_pe.empty() ? query : add(query, constant(query_pe));
  Var<T> k = context_pe.empty() ? context : add(context, constant(context_pe));
  Var<T> a = fusion.attn(q, k, context);
  if (fusion.mode == Fusion::AttentionMultiply) return mul(a, query);
  Var<T> h = fusion.norm1(add(query, a));
  return fusion.norm2(add(h, fusion.ffn(h)));
}

namespace detail {
template <class T>
void check_pyramid(const Var<T>& words, const FeaturePyramid<T>& visual) {
  if (visual.levels.empty() || visual.levels.size() != visual.sizes.size())
    throw DimensionError("feature pyramid has no levels or inconsistent sizes");
  for (std::size_t i = 0; i < visual.levels.size(); ++i) {
    const auto& lv = visual.levels[i];
    if (lv.cols() != words.cols())
      throw DimensionError("level " + std::to_string(i) + " has " + std::to_string(lv.cols()) + " channels, words have " +
                           std::to_string(words.cols()));
    if (lv.rows() != visual.frames * visual.sizes[i].pixels())
      throw DimensionError("level " + std::to_string(i) + " row count does not match its declared size");
  }
}
}  // namespace detail

/// Text states F_l^0 .. F_l^{N_l}: each level refines the previous state.
/// Levels are consumed in the stored order (finest first).
template <class T>
std::vector<Var<T>> lewv_states(const Var<T>& words, const FeaturePyramid<T>& visual, const CrossModalFusion<T>& fusion) {
  detail::check_pyramid(words, visual);
  std::vector<Var<T>> states{words};
  for (std::size_t i = 0; i < visual.levels.size(); ++i) {
    const auto& s = visual.sizes[i];
    Tensor<T> pe = tile_frames(sinusoidal_pe_2d<T>(s.height, s.width, visual.channels).reshaped({s.pixels(), visual.channels}),
                               visual.frames);
    states.push_back(cross_attend_multiply(states.back(), visual.levels[i], fusion, Tensor<T>(), pe));
  }
  return states;
}

/// Vision-enhanced sentence feature [1, C].
template <class T>
Var<T> lewv(const Var<T>& words, const FeaturePyramid<T>& visual, const CrossModalFusion<T>& fusion,
            const SentencePooler<T>& pooler) {
  return pool_sentence(lewv_states(words, visual, fusion).back(), pooler);
}

/// Language-enhanced pyramid. Every level attends to the same raw words
/// unless `text_per_level` supplies one text state per level.
template <class T>
FeaturePyramid<T> vewl(const Var<T>& words, const FeaturePyramid<T>& visual, const CrossModalFusion<T>& fusion,
                       const std::vector<Var<T>>& text_per_level = {}) {
  detail::check_pyramid(words, visual);
  FeaturePyramid<T> out = visual;
  for (std::size_t i = 0; i < visual.levels.size(); ++i) {
    const Var<T>& text = text_per_level.empty() ? words : text_per_level.at(i);
    Tensor<T> pe = sinusoidal_pe_1d<T>(text.rows(), text.cols());
    out.levels[i] = cross_attend_multiply(visual.levels[i], text, fusion, Tensor<T>(), pe);
  }
  return out;
}

template <class T>
struct BidirectionalInteraction {
  CrossModalFusion<T> lewv_fusion;
  CrossModalFusion<T> vewl_fusion;
  bool lewv_enabled = true;
  bool vewl_enabled = true;
  VewlText vewl_text = VewlText::Fixed;

  static BidirectionalInteraction create(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) {
    BidirectionalInteraction b;
    b.lewv_enabled = cfg.lewv_enabled;
    b.vewl_enabled = cfg.vewl_enabled;
    b.vewl_text = cfg.vewl_text;
    if (b.lewv_enabled || (b.vewl_enabled && b.vewl_text == VewlText::Dynamic))
      b.lewv_fusion = CrossModalFusion<T>::create(ps, "bvli.lewv", cfg, rng);
    if (b.vewl_enabled) b.vewl_fusion = CrossModalFusion<T>::create(ps, "bvli.vewl", cfg, rng);
    return b;
  }
};

/// Returns (language-enhanced pyramid, sentence feature). A disabled
/// submodule passes its input through (raw pyramid / pooled raw words).
template <class T>
std::pair<FeaturePyramid<T>, Var<T>> bidirectional_interact(const Var<T>& words, const FeaturePyramid<T>& visual,
                                                            const BidirectionalInteraction<T>& bvli,
                                                            const SentencePooler<T>& pooler) {
  std::vector<Var<T>> states;
  const bool need_states = bvli.lewv_enabled || (bvli.vewl_enabled && bvli.vewl_text == VewlText::Dynamic);
  if (need_states) states = lewv_states(words, visual, bvli.lewv_fusion);

  FeaturePyramid<T> enhanced = visual;
  if (bvli.vewl_enabled) {
    if (bvli.vewl_text == VewlText::Dynamic)
      enhanced = vewl(words, visual, bvli.vewl_fusion, std::vector<Var<T>>(states.begin(), states.end() - 1));
    else
      enhanced = vewl(words, visual, bvli.vewl_fusion);
  }
  Var<T> sentence = bvli.lewv_enabled ? pool_sentence(states.back(), pooler) : pool_sentence(words, pooler);
  return {std::move(enhanced), sentence};
}

}  // namespace bifit
