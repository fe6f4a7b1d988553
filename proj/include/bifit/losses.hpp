#pragma once

// Sequence-level matching cost, positive-sample selection, and the training
// objective. Every loss comes with its analytic gradient so the objective can
// enter the tape as a single node.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "bifit/ops.hpp"

namespace bifit {

struct LossWeights {
  double cls = 2.0;
  double l1 = 5.0;
  double giou = 2.0;
  double dice = 1.0;
  double focal = 1.0;

  void validate() const {
    if (cls < 0 || l1 < 0 || giou < 0 || dice < 0 || focal < 0) throw ConfigError("loss weights must be non-negative");
  }
  LossWeights scaled(double k) const { return {cls * k, l1 * k, giou * k, dice * k, focal * k}; }
};

template <class T>
using Box = std::array<T, 4>;  // normalized (cx, cy, w, h)

/// Annotation of the referred object over a clip, masks at stride 4.
template <class T>
struct GroundTruthSequence {
  int height = 0, width = 0;            // mask size
  std::vector<std::uint8_t> visible;    // [T]
  std::vector<Box<T>> boxes;            // [T]
  std::vector<std::uint8_t> masks;      // [T * height * width]

  int frames() const { return static_cast<int>(visible.size()); }
  int pixels() const { return height * width; }
  std::span<const std::uint8_t> mask(int t) const {
    return {masks.data() + static_cast<std::size_t>(t) * pixels(), static_cast<std::size_t>(pixels())};
  }
};

/// One query's predictions over a clip.
template <class T>
struct PredictionSequence {
  int height = 0, width = 0;
  std::vector<T> probs;        // [T]
  std::vector<Box<T>> boxes;   // [T]
  std::vector<T> logits;       // [T * height * width]

  int frames() const { return static_cast<int>(probs.size()); }
  int pixels() const { return height * width; }
  std::span<const T> frame_logits(int t) const {
    return {logits.data() + static_cast<std::size_t>(t) * pixels(), static_cast<std::size_t>(pixels())};
  }
};

/// d(loss)/d(prediction), same layout as PredictionSequence.
template <class T>
struct PredictionGrad {
  std::vector<T> probs;
  std::vector<Box<T>> boxes;
  std::vector<T> logits;

  explicit PredictionGrad(const PredictionSequence<T>& p)
      : probs(p.probs.size()), boxes(p.boxes.size(), Box<T>{}), logits(p.logits.size()) {}
};

inline constexpr double kProbEps = 1e-8;

// -------------------------------------------------------------- focal loss

// Evaluated in double: at 32 bits 1 - 1e-8 rounds to 1 and the clamp would
// let log(0) through.
template <class T>
T focal_loss(T p, int target, T alpha = T(0.25), T gamma = T(2)) {
  const double pc = std::clamp(static_cast<double>(p), kProbEps, 1 - kProbEps), a = alpha, g = gamma;
  if (target == 1) return static_cast<T>(-a * std::pow(1 - pc, g) * std::log(pc));
  return static_cast<T>(-(1 - a) * std::pow(pc, g) * std::log(1 - pc));
}

template <class T>
T focal_loss_grad(T p, int target, T alpha = T(0.25), T gamma = T(2)) {
  const double x = p, a = alpha, g = gamma;
  if (x <= kProbEps || x >= 1 - kProbEps) return T(0);
  if (target == 1) {
    const double q = 1 - x;
    return static_cast<T>(a * (g * std::pow(q, g - 1) * std::log(x) - std::pow(q, g) / x));
  }
  return static_cast<T>(-(1 - a) * (g * std::pow(x, g - 1) * std::log(1 - x) - std::pow(x, g) / (1 - x)));
}

// --------------------------------------------------------------- box losses

template <class T>
T l1_box_loss(const Box<T>& a, const Box<T>& b) {
  T s = 0;
  for (int i = 0; i < 4; ++i) s += std::abs(a[i] - b[i]);
  return s;
}

template <class T>
Box<T> l1_box_grad(const Box<T>& pred, const Box<T>& gt) {
  Box<T> g{};
  for (int i = 0; i < 4; ++i) g[i] = pred[i] > gt[i] ? T(1) : (pred[i] < gt[i] ? T(-1) : T(0));
  return g;
}

namespace detail {
template <class T>
struct GiouParts {
  T loss;
  Box<T> grad;  // w.r.t. the first box, in (cx, cy, w, h)
};

constexpr double kAreaEps = 1e-12;

template <class T>
GiouParts<T> giou_eval(const Box<T>& p, const Box<T>& g) {
  const T px0 = p[0] - p[2] / 2, px1 = p[0] + p[2] / 2, py0 = p[1] - p[3] / 2, py1 = p[1] + p[3] / 2;
  const T gx0 = g[0] - g[2] / 2, gx1 = g[0] + g[2] / 2, gy0 = g[1] - g[3] / 2, gy1 = g[1] + g[3] / 2;

  const T pw = px1 - px0, ph = py1 - py0;
  const T ap_raw = pw * ph;
  const bool ap_clamped = ap_raw < T(kAreaEps);
  const T ap = ap_clamped ? T(kAreaEps) : ap_raw;
  const T ag = std::max(T((gx1 - gx0) * (gy1 - gy0)), T(kAreaEps));

  const T iw_raw = std::min(px1, gx1) - std::max(px0, gx0);
  const T ih_raw = std::min(py1, gy1) - std::max(py0, gy0);
  const T iw = std::max(iw_raw, T(0)), ih = std::max(ih_raw, T(0));
  const T inter = iw * ih;
  const T uni = ap + ag - inter;
  const T iou = inter / uni;

  const T hw = std::max(px1, gx1) - std::min(px0, gx0);
  const T hh = std::max(py1, gy1) - std::min(py0, gy0);
  const T hull_raw = hw * hh;
  const bool hull_clamped = hull_raw < T(kAreaEps);
  const T hull = hull_clamped ? T(kAreaEps) : hull_raw;

  GiouParts<T> out;
  out.loss = T(2) - iou - uni / hull;

  // Derivatives w.r.t. (x0, x1, y0, y1) of the predicted box.
  const T diw[4] = {iw_raw > 0 && px0 > gx0 ? T(-1) : T(0), iw_raw > 0 && px1 < gx1 ? T(1) : T(0), 0, 0};
  const T dih[4] = {0, 0, ih_raw > 0 && py0 > gy0 ? T(-1) : T(0), ih_raw > 0 && py1 < gy1 ? T(1) : T(0)};
  const T dap[4] = {ap_clamped ? T(0) : -ph, ap_clamped ? T(0) : ph, ap_clamped ? T(0) : -pw, ap_clamped ? T(0) : pw};
  const T dhw[4] = {px0 < gx0 ? T(-1) : T(0), px1 > gx1 ? T(1) : T(0), 0, 0};
  const T dhh[4] = {0, 0, py0 < gy0 ? T(-1) : T(0), py1 > gy1 ? T(1) : T(0)};
  T d[4];
  for (int k = 0; k < 4; ++k) {
    const T dI = diw[k] * ih + iw * dih[k];
    const T dU = dap[k] - dI;
    const T dH = hull_clamped ? T(0) : dhw[k] * hh + hw * dhh[k];
    const T diou = (dI * uni - inter * dU) / (uni * uni);
    d[k] = -diou - (dU * hull - uni * dH) / (hull * hull);
  }
  // x0 = cx - w/2, x1 = cx + w/2 (same for y).
  out.grad = {d[0] + d[1], d[2] + d[3], (d[1] - d[0]) / 2, (d[3] - d[2]) / 2};
  return out;
}
}  // namespace detail

/// 1 - GIoU for normalized (cx, cy, w, h) boxes; in [0, 2].
template <class T>
T giou_loss(const Box<T>& a, const Box<T>& b) {
  return detail::giou_eval(a, b).loss;
}

template <class T>
Box<T> giou_loss_grad(const Box<T>& pred, const Box<T>& gt) {
  return detail::giou_eval(pred, gt).grad;
}

// -------------------------------------------------------------- mask losses

template <class T>
T dice_loss(std::span<const T> logits, std::span<const std::uint8_t> target, std::span<T> grad = {}) {
  if (logits.size() != target.size()) throw DimensionError("dice_loss: shape mismatch");
  T sp = 0, st = 0, spt = 0;
  std::vector<T> s(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    s[i] = sigmoid_value(logits[i]);
    sp += s[i];
    st += target[i];
    spt += s[i] * target[i];
  }
  const T num = 2 * spt + 1, den = sp + st + 1;
  if (!grad.empty())
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const T ds = -(2 * T(target[i]) * den - num) / (den * den);
      grad[i] += ds * s[i] * (T(1) - s[i]);
    }
  return T(1) - num / den;
}

/// Pixel-mean focal loss on sigmoid(logits).
template <class T>
T mask_focal_loss(std::span<const T> logits, std::span<const std::uint8_t> target, std::span<T> grad = {}, T grad_scale = T(1)) {
  if (logits.size() != target.size()) throw DimensionError("mask_focal_loss: shape mismatch");
  if (logits.empty()) return T(0);
  const T inv = T(1) / static_cast<T>(logits.size());
  T total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = sigmoid_value(static_cast<double>(logits[i]));
    total += static_cast<T>(focal_loss(p, target[i]));
    if (!grad.empty()) grad[i] += grad_scale * inv * static_cast<T>(focal_loss_grad(p, int(target[i])) * p * (1 - p));
  }
  return total * inv;
}

// --------------------------------------------------------- sequence matching

/// Frame-normalized matching cost. Box and mask terms only count on frames
/// where the object is visible. When `grad` is given, d(cost)/d(pred) * scale
/// is added into it.
template <class T>
T matching_cost(const GroundTruthSequence<T>& gt, const PredictionSequence<T>& pred, const LossWeights& w,
                PredictionGrad<T>* grad = nullptr, T scale = T(1)) {
  const int Tn = gt.frames();
  if (pred.frames() != Tn) throw ContractError("matching_cost: prediction has " + std::to_string(pred.frames()) +
                                               " frames, ground truth has " + std::to_string(Tn));
  if (Tn == 0) throw ContractError("matching_cost: empty sequence");
  if (pred.pixels() != gt.pixels()) throw ContractError("matching_cost: mask size mismatch");
  const T inv_t = T(1) / static_cast<T>(Tn);
  const T g = scale * inv_t;
  T total = 0;
  for (int t = 0; t < Tn; ++t) {
    const int c = gt.visible[t] ? 1 : 0;
    total += T(w.cls) * focal_loss(pred.probs[t], c);
    if (grad) grad->probs[t] += g * T(w.cls) * focal_loss_grad(pred.probs[t], c);
    if (!c) continue;
    total += T(w.l1) * l1_box_loss(pred.boxes[t], gt.boxes[t]);
    const auto gi = detail::giou_eval(pred.boxes[t], gt.boxes[t]);
    total += T(w.giou) * gi.loss;
    auto logits = pred.frame_logits(t);
    auto target = gt.mask(t);
    std::span<T> lg;
    std::vector<T> dice_g;
    if (grad) {
      const auto l1g = l1_box_grad(pred.boxes[t], gt.boxes[t]);
      for (int k = 0; k < 4; ++k) grad->boxes[t][k] += g * (T(w.l1) * l1g[k] + T(w.giou) * gi.grad[k]);
      lg = std::span<T>(grad->logits.data() + static_cast<std::size_t>(t) * pred.pixels(), pred.pixels());
      dice_g.assign(logits.size(), T(0));
    }
    total += T(w.dice) * dice_loss(logits, target, std::span<T>(dice_g));
    if (grad)
      for (std::size_t i = 0; i < dice_g.size(); ++i) lg[i] += g * T(w.dice) * dice_g[i];
    total += T(w.focal) * mask_focal_loss(logits, target, lg, g * T(w.focal));
  }
  return total * inv_t;
}

/// Index of the minimum-cost prediction sequence; ties go to the lowest index.
template <class T>
int select_positive(const GroundTruthSequence<T>& gt, const std::vector<PredictionSequence<T>>& preds, const LossWeights& w) {
  if (preds.empty()) throw ContractError("select_positive: no candidates");
  int best = 0;
  T best_cost = matching_cost(gt, preds[0], w);
  for (int i = 1; i < static_cast<int>(preds.size()); ++i) {
    const T c = matching_cost(gt, preds[i], w);
    if (c < best_cost) {
      best_cost = c;
      best = i;
    }
  }
  return best;
}

struct TrainingLossResult {
  double value = 0;
  int positive = 0;
};

/// Matching cost of the positive sequence, plus (optionally) the class focal
/// term with target 0 averaged over every other query and frame.
template <class T>
T training_loss(const GroundTruthSequence<T>& gt, const std::vector<PredictionSequence<T>>& preds, const LossWeights& w,
                bool supervise_negatives, std::vector<PredictionGrad<T>>* grads = nullptr, int* positive = nullptr) {
  const int pos = select_positive(gt, preds, w);
  if (positive) *positive = pos;
  T total = matching_cost(gt, preds[pos], w, grads ? &(*grads)[pos] : nullptr);
  const int N = static_cast<int>(preds.size());
  if (supervise_negatives && N > 1) {
    const int Tn = gt.frames();
    const T inv = T(1) / static_cast<T>((N - 1) * Tn);
    for (int i = 0; i < N; ++i) {
      if (i == pos) continue;
      for (int t = 0; t < Tn; ++t) {
        total += inv * T(w.cls) * focal_loss(preds[i].probs[t], 0);
        if (grads) (*grads)[i].probs[t] += inv * T(w.cls) * focal_loss_grad(preds[i].probs[t], 0);
      }
    }
  }
  return total;
}

/// Splits head outputs for one clip into per-query sequences.
/// probs: [T*N, 1] (row t*N+n), boxes: [T*N, 4], logits: [N*T*P] (n-major).
template <class T>
std::vector<PredictionSequence<T>> split_predictions(const Tensor<T>& probs, const Tensor<T>& boxes, const Tensor<T>& logits,
                                                     int frames, int queries, int height, int width) {
  const int P = height * width;
  if (static_cast<int>(probs.size()) != frames * queries || static_cast<int>(boxes.size()) != frames * queries * 4 ||
      static_cast<int>(logits.size()) != queries * frames * P)
    throw DimensionError("split_predictions: head outputs do not match T, N and mask size");
  std::vector<PredictionSequence<T>> seqs(static_cast<std::size_t>(queries));
  for (int n = 0; n < queries; ++n) {
    auto& s = seqs[n];
    s.height = height;
    s.width = width;
    for (int t = 0; t < frames; ++t) {
      const int r = t * queries + n;
      s.probs.push_back(probs[r]);
      s.boxes.push_back({boxes[r * 4], boxes[r * 4 + 1], boxes[r * 4 + 2], boxes[r * 4 + 3]});
    }
    const T* src = logits.data() + static_cast<std::size_t>(n) * frames * P;
    s.logits.assign(src, src + static_cast<std::size_t>(frames) * P);
  }
  return seqs;
}

/// The training objective as a tape node over the three head outputs.
template <class T>
Var<T> set_prediction_loss(const Var<T>& probs, const Var<T>& boxes, const Var<T>& logits, const GroundTruthSequence<T>& gt,
                           int queries, const LossWeights& w, bool supervise_negatives, int* positive = nullptr) {
  const int Tn = gt.frames(), P = gt.pixels();
  auto preds = split_predictions(probs.value(), boxes.value(), logits.value(), Tn, queries, gt.height, gt.width);
  std::vector<PredictionGrad<T>> grads;
  for (const auto& p : preds) grads.emplace_back(p);
  const T value = training_loss(gt, preds, w, supervise_negatives, &grads, positive);
  if (!std::isfinite(static_cast<double>(value))) throw NumericError("non-finite training loss");

  Tensor<T> gp(probs.shape()), gb(boxes.shape()), gl(logits.shape());
  for (int n = 0; n < queries; ++n) {
    for (int t = 0; t < Tn; ++t) {
      const int r = t * queries + n;
      gp[r] = grads[n].probs[t];
      for (int k = 0; k < 4; ++k) gb[r * 4 + k] = grads[n].boxes[t][k];
    }
    std::copy(grads[n].logits.begin(), grads[n].logits.end(), gl.data() + static_cast<std::size_t>(n) * Tn * P);
  }
  return make_op<T>(Tensor<T>({1}, std::vector<T>{value}), {probs, boxes, logits},
                    [gp = std::move(gp), gb = std::move(gb), gl = std::move(gl)](Node<T>& n) {
                      const T s = n.grad[0];
                      auto scaled = [s](Tensor<T> g) {
                        for (auto& v : g.vec()) v *= s;
                        return g;
                      };
                      accumulate(n.parents[0], scaled(gp));
                      accumulate(n.parents[1], scaled(gb));
                      accumulate(n.parents[2], scaled(gl));
                    });
}

}  // namespace bifit
