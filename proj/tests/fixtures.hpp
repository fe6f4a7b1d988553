#pragma once

// Small model configurations and random inputs shared by the unit tests.

#include <cmath>
#include <vector>

#include "bifit/encoders.hpp"
#include "bifit/model_config.hpp"

namespace bifit::testkit {

/// C=8, two heads, one block everywhere: fast enough for finite differences.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.channels = 8;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.queries = 2;
  c.mask_channels = 4;
  c.ffn_dim = 16;
  c.stem1 = 4;
  c.stem2 = 8;
  c.norm_groups = 2;
  c.text_layers = 1;
  return c;
}

template <class T>
VideoClip<T> random_clip(int frames, int H, int W, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> f({frames, H, W, 3});
  for (auto& v : f.vec()) v = static_cast<T>(rng.uniform());
  return {f};
}

template <class T>
Var<T> random_var(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<T>(scale * rng.normal());
  return Var<T>(std::move(t), false);
}

template <class T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && a.vec() == b.vec();
}

/// Rows [begin, begin+count) of a row-major tensor.
template <class T>
std::vector<T> rows_of(const Tensor<T>& t, int begin, int count) {
  const std::size_t c = t.size() / t.dim(0);
  return {t.data() + begin * c, t.data() + (begin + count) * c};
}

}  // namespace bifit::testkit
