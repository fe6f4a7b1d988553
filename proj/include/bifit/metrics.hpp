#pragma once

// Video segmentation metrics: region similarity J, DAVIS-style boundary
// F-measure, J&F, Precision@K, overall/mean IoU and threshold-averaged mAP.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bifit/error.hpp"

namespace bifit {

using MaskView = std::span<const std::uint8_t>;

namespace detail {
inline void check_same(MaskView a, MaskView b, int H, int W, const char* op) {
  if (a.size() != b.size() || a.size() != static_cast<std::size_t>(H) * W)
    throw ContractError(std::string(op) + ": masks must both be " + std::to_string(H) + "x" + std::to_string(W));
}
}  // namespace detail

struct IouCounts {
  long long intersection = 0, uni = 0;
};

inline IouCounts iou_counts(MaskView pred, MaskView gt) {
  if (pred.size() != gt.size()) throw ContractError("iou_counts: mask size mismatch");
  IouCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gt[i] != 0;
    c.intersection += p && g;
    c.uni += p || g;
  }
  return c;
}

/// IoU of two binary masks; 1 when both are empty.
inline double region_similarity(MaskView pred, MaskView gt) {
  const auto c = iou_counts(pred, gt);
  return c.uni == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(c.uni);
}

/// One-pixel-wide boundary map: a pixel is marked when its east, south or
/// south-east neighbour has a different label. The last row compares only
/// eastward, the last column only southward, the corner never.
inline std::vector<std::uint8_t> mask_boundary(MaskView m, int H, int W) {
  std::vector<std::uint8_t> b(m.size(), 0);
  auto at = [&](int y, int x) { return m[static_cast<std::size_t>(y) * W + x] != 0; };
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const bool v = at(y, x);
      bool diff = false;
      if (y + 1 < H && x + 1 < W)
        diff = at(y, x + 1) != v || at(y + 1, x) != v || at(y + 1, x + 1) != v;
      else if (x + 1 < W)
        diff = at(y, x + 1) != v;
      else if (y + 1 < H)
        diff = at(y + 1, x) != v;
      b[static_cast<std::size_t>(y) * W + x] = diff ? 1 : 0;
    }
  return b;
}

/// Binary dilation with a disk of radius r.
inline std::vector<std::uint8_t> dilate_disk(MaskView m, int H, int W, int r) {
  std::vector<std::uint8_t> out(m.size(), 0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!m[static_cast<std::size_t>(y) * W + x]) continue;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          if (dx * dx + dy * dy > r * r) continue;
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < H && xx >= 0 && xx < W) out[static_cast<std::size_t>(yy) * W + xx] = 1;
        }
    }
  return out;
}

inline int boundary_tolerance(int H, int W) {
  return static_cast<int>(std::ceil(0.008 * std::sqrt(static_cast<double>(H) * H + static_cast<double>(W) * W)));
}

/// Boundary F-measure with matching tolerance ceil(0.008 * diagonal).
inline double contour_accuracy(MaskView pred, MaskView gt, int H, int W) {
  detail::check_same(pred, gt, H, W, "contour_accuracy");
  const int r = boundary_tolerance(H, W);
  const auto bp = mask_boundary(pred, H, W), bg = mask_boundary(gt, H, W);
  const auto dp = dilate_disk(bp, H, W, r), dg = dilate_disk(bg, H, W, r);
  long long np = 0, ng = 0, mp = 0, mg = 0;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    np += bp[i];
    ng += bg[i];
    mp += bp[i] && dg[i];
    mg += bg[i] && dp[i];
  }
  if (np == 0 && ng == 0) return 1.0;
  double precision, recall;
  if (np == 0) {
    precision = 1.0;
    recall = 0.0;
  } else if (ng == 0) {
    precision = 0.0;
    recall = 1.0;
  } else {
    precision = static_cast<double>(mp) / np;
    recall = static_cast<double>(mg) / ng;
  }
  return precision + recall == 0 ? 0.0 : 2 * precision * recall / (precision + recall);
}

struct JF {
  double j = 0, f = 0, jf = 0;
};

/// Per-frame J and F lists of one sample, averaged.
inline JF j_and_f(const std::vector<double>& j, const std::vector<double>& f) {
  if (j.empty() || j.size() != f.size()) throw ContractError("j_and_f: J and F lists must be non-empty and equally long");
  JF r;
  for (std::size_t i = 0; i < j.size(); ++i) {
    r.j += j[i];
    r.f += f[i];
  }
  r.j /= static_cast<double>(j.size());
  r.f /= static_cast<double>(f.size());
  r.jf = (r.j + r.f) / 2;
  return r;
}

/// Mean of per-sample results.
inline JF average_samples(const std::vector<JF>& samples) {
  if (samples.empty()) throw ContractError("average_samples: no samples");
  JF r;
  for (const auto& s : samples) {
    r.j += s.j;
    r.f += s.f;
  }
  r.j /= static_cast<double>(samples.size());
  r.f /= static_cast<double>(samples.size());
  r.jf = (r.j + r.f) / 2;
  return r;
}

/// Fraction of samples with IoU strictly above k.
inline double precision_at_k(const std::vector<double>& ious, double k) {
  if (ious.empty()) throw ContractError("precision_at_k: no samples");
  std::size_t n = 0;
  for (double v : ious) n += v > k;
  return static_cast<double>(n) / static_cast<double>(ious.size());
}

inline std::vector<double> map_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

/// Precision@K averaged over K = 0.50, 0.55, ..., 0.95.
inline double map_over_thresholds(const std::vector<double>& ious) {
  if (ious.empty()) throw ContractError("map_over_thresholds: no samples");
  double s = 0;
  const auto th = map_thresholds();
  for (double k : th) s += precision_at_k(ious, k);
  return s / static_cast<double>(th.size());
}

struct OverallMeanIou {
  double overall = 0, mean = 0;
};

/// overall = sum I / sum U; mean = average of I/U, with 0/0 counted as 1.
inline OverallMeanIou overall_and_mean_iou(const std::vector<long long>& inter, const std::vector<long long>& uni) {
  if (inter.empty() || inter.size() != uni.size())
    throw ContractError("overall_and_mean_iou: lists must be non-empty and equally long");
  long long si = 0, su = 0;
  double m = 0;
  for (std::size_t i = 0; i < inter.size(); ++i) {
    if (inter[i] < 0 || uni[i] < inter[i]) throw ContractError("overall_and_mean_iou: need 0 <= I <= U");
    si += inter[i];
    su += uni[i];
    m += uni[i] == 0 ? 1.0 : static_cast<double>(inter[i]) / static_cast<double>(uni[i]);
  }
  return {su == 0 ? 1.0 : static_cast<double>(si) / static_cast<double>(su), m / static_cast<double>(inter.size())};
}

struct MetricsReport {
  double j = 0, f = 0, jf = 0;
  std::map<double, double> precision_at;  // threshold -> value
  double overall_iou = 0, mean_iou = 0, map = 0;
  int samples = 0, frames = 0;

  nlohmann::json to_json() const {
    nlohmann::json o;
    o["j"] = j;
    o["f"] = f;
    o["jf"] = jf;
    for (const auto& [k, v] : precision_at) o["precision_at_" + threshold_label(k)] = v;
    o["overall_iou"] = overall_iou;
    o["mean_iou"] = mean_iou;
    o["map"] = map;
    o["samples"] = samples;
    o["frames"] = frames;
    return o;
  }

  static std::string csv_header() {
    return "j,f,jf,precision_at_0.5,precision_at_0.6,precision_at_0.7,precision_at_0.8,precision_at_0.9,overall_iou,mean_iou,map";
  }
  std::string csv_row() const {
    std::ostringstream os;
    os.precision(10);
    os << j << ',' << f << ',' << jf;
    for (double k : {0.5, 0.6, 0.7, 0.8, 0.9}) {
      auto it = precision_at.find(k);
      os << ',' << (it == precision_at.end() ? 0.0 : it->second);
    }
    os << ',' << overall_iou << ',' << mean_iou << ',' << map;
    return os.str();
  }

  static std::string threshold_label(double k) {
    std::ostringstream os;
    os << k;
    return os.str();
  }
};

/// Accumulates per-frame results of predicted vs ground-truth mask sequences.
/// IoU-based metrics (Precision@K, overall/mean IoU, mAP) are per frame.
class MetricsAccumulator {
 public:
  void add_sample(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int frames, int H, int W) {
    const std::size_t P = static_cast<std::size_t>(H) * W;
    if (frames < 1 || pred.size() != P * frames || gt.size() != P * frames)
      throw ContractError("add_sample: mask sequences must both be [T, H, W]");
    std::vector<double> js, fs;
    for (int t = 0; t < frames; ++t) {
      auto p = pred.subspan(P * t, P), g = gt.subspan(P * t, P);
      const auto c = iou_counts(p, g);
      inter_.push_back(c.intersection);
      union_.push_back(c.uni);
      ious_.push_back(c.uni == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(c.uni));
      js.push_back(ious_.back());
      fs.push_back(contour_accuracy(p, g, H, W));
    }
    samples_.push_back(j_and_f(js, fs));
  }

  MetricsReport report() const {
    MetricsReport r;
    const JF m = average_samples(samples_);
    r.j = m.j;
    r.f = m.f;
    r.jf = m.jf;
    for (double k : {0.5, 0.6, 0.7, 0.8, 0.9}) r.precision_at[k] = precision_at_k(ious_, k);
    const auto om = overall_and_mean_iou(inter_, union_);
    r.overall_iou = om.overall;
    r.mean_iou = om.mean;
    r.map = map_over_thresholds(ious_);
    r.samples = static_cast<int>(samples_.size());
    r.frames = static_cast<int>(ious_.size());
    return r;
  }

 private:
  std::vector<JF> samples_;
  std::vector<double> ious_;
  std::vector<long long> inter_, union_;
};

}  // namespace bifit
