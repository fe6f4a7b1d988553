#pragma once

// Prediction heads over instance embeddings, the top-down FPN producing
// stride-4 segmentation features, and dynamic (conditional) 1×1 convolution.

#include <array>
#include <vector>

#include "bifit/transformer.hpp"

namespace bifit {

/// Number of dynamic parameters for three 1×1 convolutions
/// (C_mid+2 -> C_mid -> C_mid -> 1), weights and biases.
constexpr int dynamic_param_count(int c_mid) {
  const int cin = c_mid + 2;
  return (cin * c_mid + c_mid) + (c_mid * c_mid + c_mid) + (c_mid * 1 + 1);
}

template <class T>
struct ClassHead {
  Linear<T> fc;
  static ClassHead create(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) {
    return {Linear<T>::create(ps, "head.class", cfg.channels, 1, rng)};
  }
};

/// Per-embedding probability that it is the referred, visible object: [rows, 1].
template <class T>
Var<T> class_head(const Var<T>& embeddings, const ClassHead<T>& head) {
  return sigmoid(head.fc(reshape(embeddings, {embeddings.rows(), embeddings.cols()})));
}

template <class T>
struct BoxHead {
  Linear<T> fc1, fc2, fc3;
  static BoxHead create(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) {
    const int C = cfg.channels;
    return {Linear<T>::create(ps, "head.box.fc1", C, C, rng), Linear<T>::create(ps, "head.box.fc2", C, C, rng),
            Linear<T>::create(ps, "head.box.fc3", C, 4, rng)};
  }
};

/// Normalized (cx, cy, w, h) per embedding: [rows, 4].
template <class T>
Var<T> box_head(const Var<T>& embeddings, const BoxHead<T>& head) {
  Var<T> x = reshape(embeddings, {embeddings.rows(), embeddings.cols()});
  return sigmoid(head.fc3(relu(head.fc2(relu(head.fc1(x))))));
}

template <class T>
struct MaskHead {
  Linear<T> fc1, fc2, fc3;
  int mask_channels = 8;
  static MaskHead create(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) {
    const int C = cfg.channels;
    MaskHead m{Linear<T>::create(ps, "head.mask.fc1", C, C, rng), Linear<T>::create(ps, "head.mask.fc2", C, C, rng),
               Linear<T>::create(ps, "head.mask.fc3", C, dynamic_param_count(cfg.mask_channels), rng), cfg.mask_channels};
    return m;
  }
};

/// Dynamic kernel parameters per embedding: [rows, P].
template <class T>
Var<T> mask_head(const Var<T>& embeddings, const MaskHead<T>& head) {
  if (head.fc3.out_features() != dynamic_param_count(head.mask_channels))
    throw ContractError("mask head emits " + std::to_string(head.fc3.out_features()) + " parameters, expected " +
                        std::to_string(dynamic_param_count(head.mask_channels)));
  Var<T> x = reshape(embeddings, {embeddings.rows(), embeddings.cols()});
  return head.fc3(relu(head.fc2(relu(head.fc1(x)))));
}

template <class T>
struct Fpn {
  Conv2d<T> lateral4, lateral8, lateral16, lateral32;
  Conv2d<T> smooth;
  GroupNorm<T> smooth_norm;
  Conv2d<T> project;

  static Fpn create(ParamStore<T>& ps, const ModelConfig& cfg, Rng& rng) {
    const int C = cfg.channels, mid = C / 2;
    Fpn f;
    f.lateral4 = Conv2d<T>::create(ps, "fpn.lateral4", cfg.stem2, C, 1, 1, rng);
    f.lateral8 = Conv2d<T>::create(ps, "fpn.lateral8", C, C, 1, 1, rng);
    f.lateral16 = Conv2d<T>::create(ps, "fpn.lateral16", C, C, 1, 1, rng);
    f.lateral32 = Conv2d<T>::create(ps, "fpn.lateral32", C, C, 1, 1, rng);
    f.smooth = Conv2d<T>::create(ps, "fpn.smooth", C, mid, 3, 1, rng);
    f.smooth_norm = GroupNorm<T>::create(ps, "fpn.smooth_norm", mid, cfg.norm_groups);
    f.project = Conv2d<T>::create(ps, "fpn.project", mid, cfg.mask_channels, 1, 1, rng);
    return f;
  }
};

/// Top-down fusion of encoder levels (strides 8, 16, 32) with the backbone
/// stride-4 map. Returns [T*H4*W4, C_mid].
template <class T>
Var<T> build_fpn(const MemoryFeatures<T>& mem, const Var<T>& stride4, const LevelSize& s4, const Fpn<T>& fpn) {
  const auto& lv = mem.levels;
  const int Tn = lv.frames;
  if (lv.levels.size() < 3) throw DimensionError("build_fpn needs the stride 8/16/32 levels");
  for (int i = 0; i < 3; ++i)
    if (lv.sizes[i].height * 2 != (i == 0 ? s4.height : lv.sizes[i - 1].height) ||
        lv.sizes[i].width * 2 != (i == 0 ? s4.width : lv.sizes[i - 1].width))
      throw DimensionError("build_fpn: levels are not successive 2x downsamplings");
  if (stride4.rows() != Tn * s4.pixels()) throw DimensionError("build_fpn: stride-4 feature has wrong size");

  Var<T> p = fpn.lateral32(lv.levels[2], Tn, lv.sizes[2].height, lv.sizes[2].width);
  p = add(fpn.lateral16(lv.levels[1], Tn, lv.sizes[1].height, lv.sizes[1].width),
          upsample2x(p, Tn, lv.sizes[2].height, lv.sizes[2].width));
  p = add(fpn.lateral8(lv.levels[0], Tn, lv.sizes[0].height, lv.sizes[0].width),
          upsample2x(p, Tn, lv.sizes[1].height, lv.sizes[1].width));
  p = add(fpn.lateral4(stride4, Tn, s4.height, s4.width), upsample2x(p, Tn, lv.sizes[0].height, lv.sizes[0].width));
  p = relu(fpn.smooth_norm(fpn.smooth(p, Tn, s4.height, s4.width), Tn));
  return fpn.project(p, Tn, s4.height, s4.width);
}

/// Offsets (x - cx, y - cy) of normalized pixel centres from the box centre,
/// [H, W, 2]. Pixel (i, j) sits at ((j + 0.5) / W, (i + 0.5) / H).
template <class T>
Tensor<T> relative_coordinates(const std::array<T, 4>& box, int H, int W) {
  Tensor<T> out({H, W, 2});
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      T* px = out.data() + static_cast<std::size_t>(i * W + j) * 2;
      px[0] = (static_cast<T>(j) + T(0.5)) / static_cast<T>(W) - box[0];
      px[1] = (static_cast<T>(i) + T(0.5)) / static_cast<T>(H) - box[1];
    }
  return out;
}

struct ConditionalConvOptions {
  bool relu = true;  // switched off only to probe linearity in tests
};

/// Mask logits [H*W] for one instance on one frame. `features` is
/// [H*W, C_mid]; `kernels` is the instance's [1, P] dynamic parameter row;
/// `box` is its [1, 4] box row, whose centre positions the coordinate
/// channels (gradients flow back into the centre).
template <class T>
Var<T> conditional_segment(const Var<T>& features, const Var<T>& kernels, const Var<T>& box, int H, int W, int c_mid,
                           ConditionalConvOptions opt = {}) {
  if (features.cols() != c_mid || features.rows() != H * W)
    throw DimensionError("conditional_segment: features must be [H*W, C_mid]");
  if (static_cast<int>(kernels.size()) != dynamic_param_count(c_mid))
    throw DimensionError("conditional_segment: kernel row has " + std::to_string(kernels.size()) + " entries, expected " +
                         std::to_string(dynamic_param_count(c_mid)));
  if (box.size() != 4) throw DimensionError("conditional_segment: box must have 4 entries");
  const int cin = c_mid + 2;
  Var<T> row = reshape(kernels, {1, static_cast<int>(kernels.size())});
  int off = 0;
  auto take = [&](int rows, int cols) {
    Var<T> v = reshape(slice_cols(row, off, rows * cols), {rows, cols});
    off += rows * cols;
    return v;
  };
  Var<T> w1 = take(cin, c_mid), b1 = take(1, c_mid);
  Var<T> w2 = take(c_mid, c_mid), b2 = take(1, c_mid);
  Var<T> w3 = take(c_mid, 1), b3 = take(1, 1);
  // Pixel centres minus the box centre.
  const Tensor<T> grid = relative_coordinates<T>({T(0), T(0), T(0), T(0)}, H, W).reshaped({H * W, 2});
  Var<T> centre = slice_cols(reshape(box, {1, 4}), 0, 2);
  Var<T> coords = sub(constant(grid), repeat_rows(centre, H * W));
  Var<T> x = concat_cols<T>({features, coords});
  auto act = [&](const Var<T>& v) { return opt.relu ? relu(v) : v; };
  Var<T> h = act(linear(x, w1, b1));
  h = act(linear(h, w2, b2));
  return reshape(linear(h, w3, b3), {H * W});
}

/// Same with a fixed box.
template <class T>
Var<T> conditional_segment(const Var<T>& features, const Var<T>& kernels, const std::array<T, 4>& box, int H, int W,
                           int c_mid, ConditionalConvOptions opt = {}) {
  Tensor<T> b({1, 4});
  std::copy(box.begin(), box.end(), b.data());
  return conditional_segment(features, kernels, constant(b), H, W, c_mid, opt);
}

}  // namespace bifit
