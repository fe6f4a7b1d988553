#pragma once

// The assembled network: encoders, bidirectional interaction, multimodal
// transformer with IFI layers, and the three prediction heads.

#include <cstdint>
#include <vector>

#include "bifit/bvli.hpp"
#include "bifit/heads.hpp"
#include "bifit/losses.hpp"

namespace bifit {

/// Head outputs for one decoder layer.
/// probs [T*N, 1] and boxes [T*N, 4] use row t*N + n; logits [N*T*P] are
/// query-major, P = mask height * mask width.
template <class T>
struct LayerPrediction {
  Var<T> probs, boxes, logits;
};

template <class T>
struct ForwardOutput {
  std::vector<LayerPrediction<T>> layers;  // last entry is the final prediction
  int frames = 0, queries = 0, mask_height = 0, mask_width = 0;

  const LayerPrediction<T>& final() const { return layers.back(); }
  std::vector<PredictionSequence<T>> sequences() const {
    const auto& f = final();
    return split_predictions(f.probs.value(), f.boxes.value(), f.logits.value(), frames, queries, mask_height, mask_width);
  }
};

template <class T>
class BifitModel {
 public:
  BifitModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    image_ = ImageEncoder<T>::create(ps_, cfg_, rng);
    text_ = TextEncoder<T>::create(ps_, cfg_, rng);
    pooler_ = SentencePooler<T>::create(ps_, cfg_, rng);
    bvli_ = BidirectionalInteraction<T>::create(ps_, cfg_, rng);
    encoder_ = TransformerEncoder<T>::create(ps_, cfg_, rng);
    decoder_ = TransformerDecoder<T>::create(ps_, cfg_, rng);
    cls_ = ClassHead<T>::create(ps_, cfg_, rng);
    box_ = BoxHead<T>::create(ps_, cfg_, rng);
    mask_ = MaskHead<T>::create(ps_, cfg_, rng);
    fpn_ = Fpn<T>::create(ps_, cfg_, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }
  const TransformerDecoder<T>& decoder() const { return decoder_; }

  /// `all_layers` evaluates the heads after every decoder layer (auxiliary
  /// supervision); otherwise only after the last one.
  ForwardOutput<T> forward(const VideoClip<T>& clip, const std::vector<int>& ids, bool all_layers = false,
                           DecodeTrace* trace = nullptr) const {
    for (int id : ids)
      if (id < 0 || id >= cfg_.vocab_size)
        throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(cfg_.vocab_size));
    VisualFeatures<T> vis = encode_frames(clip, image_);
    Var<T> words = encode_text(ids, text_);
    auto [enhanced, sentence] = bidirectional_interact(words, vis.pyramid, bvli_, pooler_);
    MemoryFeatures<T> mem = encode_multiscale(enhanced, encoder_);
    const int Tn = clip.num_frames(), N = cfg_.queries;
    QueryInit<T> init = init_queries(sentence, N, Tn, decoder_.query_embed);
    auto states = decode(init, mem, decoder_, trace);
    Var<T> fseg = build_fpn(mem, vis.stride4, vis.stride4_size, fpn_);

    ForwardOutput<T> out;
    out.frames = Tn;
    out.queries = N;
    out.mask_height = vis.stride4_size.height;
    out.mask_width = vis.stride4_size.width;
    const std::size_t first = all_layers ? 0 : states.size() - 1;
    for (std::size_t i = first; i < states.size(); ++i) out.layers.push_back(heads(states[i], fseg, out));
    return out;
  }

 private:
  LayerPrediction<T> heads(const InstanceEmbeddings<T>& e, const Var<T>& fseg, const ForwardOutput<T>& o) const {
    const int Tn = o.frames, N = o.queries, H = o.mask_height, W = o.mask_width, P = H * W;
    LayerPrediction<T> lp;
    lp.probs = class_head(e.q, cls_);
    lp.boxes = box_head(e.q, box_);
    Var<T> kernels = mask_head(e.q, mask_);
    std::vector<Var<T>> frame_feats;
    for (int t = 0; t < Tn; ++t) frame_feats.push_back(slice_rows(fseg, t * P, P));
    std::vector<Var<T>> masks;
    for (int n = 0; n < N; ++n)
      for (int t = 0; t < Tn; ++t) {
        const int r = t * N + n;
        masks.push_back(conditional_segment(frame_feats[t], slice_rows(kernels, r, 1), slice_rows(lp.boxes, r, 1), H, W,
                                            cfg_.mask_channels));
      }
    lp.logits = reshape(concat_rows(masks), {N * Tn * P});
    return lp;
  }

  ModelConfig cfg_;
  ParamStore<T> ps_;
  ImageEncoder<T> image_;
  TextEncoder<T> text_;
  SentencePooler<T> pooler_;
  BidirectionalInteraction<T> bvli_;
  TransformerEncoder<T> encoder_;
  TransformerDecoder<T> decoder_;
  ClassHead<T> cls_;
  BoxHead<T> box_;
  MaskHead<T> mask_;
  Fpn<T> fpn_;
};

struct TrainingObjective {
  LossWeights weights;
  bool supervise_negatives = true;
  bool aux_losses = true;
};

/// Sum of the set-prediction loss over the returned decoder layers.
template <class T>
Var<T> objective(const ForwardOutput<T>& out, const GroundTruthSequence<T>& gt, const TrainingObjective& obj,
                 int* positive = nullptr) {
  if (gt.height != out.mask_height || gt.width != out.mask_width)
    throw ContractError("ground-truth masks are " + std::to_string(gt.height) + "x" + std::to_string(gt.width) +
                        ", predictions are " + std::to_string(out.mask_height) + "x" + std::to_string(out.mask_width));
  std::vector<Var<T>> terms;
  const std::size_t first = obj.aux_losses ? 0 : out.layers.size() - 1;
  for (std::size_t i = first; i < out.layers.size(); ++i) {
    const auto& l = out.layers[i];
    int pos = 0;
    terms.push_back(set_prediction_loss(l.probs, l.boxes, l.logits, gt, out.queries, obj.weights, obj.supervise_negatives, &pos));
    if (positive && i + 1 == out.layers.size()) *positive = pos;
  }
  return terms.size() == 1 ? terms.front() : add_n(terms);
}

/// Per-sequence score: mean class probability over frames.
template <class T>
std::vector<T> sequence_scores(const std::vector<PredictionSequence<T>>& seqs) {
  std::vector<T> s;
  for (const auto& q : seqs) {
    T m = 0;
    for (T p : q.probs) m += p;
    s.push_back(q.probs.empty() ? T(0) : m / static_cast<T>(q.probs.size()));
  }
  return s;
}

/// Index of the highest-scoring sequence; ties go to the lowest index.
template <class T>
int select_sequence(const std::vector<T>& scores) {
  if (scores.empty()) throw ContractError("select_sequence: no candidates");
  int best = 0;
  for (int i = 1; i < static_cast<int>(scores.size()); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

/// Bilinear resize of an h×w map by an integer factor (pixel-centre aligned,
/// edges clamped).
template <class T>
std::vector<T> upsample_bilinear(std::span<const T> src, int h, int w, int factor) {
  const int H = h * factor, W = w * factor;
  std::vector<T> out(static_cast<std::size_t>(H) * W);
  for (int y = 0; y < H; ++y) {
    const double sy = std::clamp((y + 0.5) / factor - 0.5, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(sy), y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < W; ++x) {
      const double sx = std::clamp((x + 0.5) / factor - 0.5, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(sx), x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - x0;
      const double v = (1 - fy) * ((1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
                       fy * ((1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
      out[static_cast<std::size_t>(y) * W + x] = static_cast<T>(v);
    }
  }
  return out;
}

/// The selected sequence, with binary masks at input resolution.
template <class T>
struct SelectedSequence {
  int index = 0;
  T score = 0;
  std::vector<Box<T>> boxes;
  std::vector<T> probs;
  int height = 0, width = 0;
  std::vector<std::uint8_t> masks;  // [T * height * width]
};

template <class T>
SelectedSequence<T> select_and_upsample(const ForwardOutput<T>& out, int image_height, int image_width) {
  const auto seqs = out.sequences();
  const auto scores = sequence_scores(seqs);
  const int best = seqs.size() == 1 ? 0 : select_sequence(scores);
  const int factor = image_height / out.mask_height;
  if (factor * out.mask_height != image_height || factor * out.mask_width != image_width)
    throw DimensionError("image size is not an integer multiple of the mask size");
  SelectedSequence<T> s;
  s.index = best;
  s.score = scores[best];
  s.boxes = seqs[best].boxes;
  s.probs = seqs[best].probs;
  s.height = image_height;
  s.width = image_width;
  // Probabilities, not logits, are interpolated: both sides of a boundary are
  // then bounded by [0, 1] and the 0.5 crossing does not drift toward the
  // side with the smaller logit magnitude.
  std::vector<T> prob(static_cast<std::size_t>(out.mask_height) * out.mask_width);
  for (int t = 0; t < out.frames; ++t) {
    auto lg = seqs[best].frame_logits(t);
    std::transform(lg.begin(), lg.end(), prob.begin(), [](T v) { return T(1) / (T(1) + std::exp(-v)); });
    auto up = upsample_bilinear(std::span<const T>(prob), out.mask_height, out.mask_width, factor);
    for (T v : up) s.masks.push_back(v > T(0.5) ? 1 : 0);
  }
  return s;
}

}  // namespace bifit
