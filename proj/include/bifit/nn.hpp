#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bifit/attention.hpp"
#include "bifit/ops.hpp"

namespace bifit {

/// Deterministic random source. Distribution transforms are written out here
/// so that streams are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

  std::uint64_t next() { return eng_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int uniform_int(int lo, int hi) {  // inclusive
    const auto span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<int>(eng_() % span);
  }
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }
  template <class Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[eng_() % i]);
  }

  std::string state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }
  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
  }

 private:
  std::mt19937_64 eng_;
};

/// Ordered registry of named trainable tensors.
template <class T>
class ParamStore {
 public:
  Var<T> add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    index_[name] = params_.size();
    params_.emplace_back(name, Var<T>(std::move(init), true));
    return params_.back().second;
  }

  Var<T> xavier(const std::string& name, int fan_in, int fan_out, Rng& rng, Shape shape = {}) {
    if (shape.empty()) shape = {fan_in, fan_out};
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor<T> t(shape);
    for (auto& v : t.vec()) v = static_cast<T>(rng.uniform(-a, a));
    return add(name, std::move(t));
  }
  Var<T> zeros(const std::string& name, Shape shape) { return add(name, Tensor<T>(std::move(shape))); }
  Var<T> ones(const std::string& name, Shape shape) { return add(name, Tensor<T>(std::move(shape), T(1))); }
  Var<T> normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(stddev * rng.normal());
    return add(name, std::move(t));
  }

  const std::vector<std::pair<std::string, Var<T>>>& entries() const { return params_; }
  std::vector<std::pair<std::string, Var<T>>>& entries() { return params_; }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Var<T> get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return params_[it->second].second;
  }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v.size();
    return n;
  }
  void zero_grad() {
    for (auto& [_, v] : params_) v.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

template <class T>
struct Linear {
  Var<T> weight;  // [in, out]
  Var<T> bias;    // [out] or undefined

  static Linear create(ParamStore<T>& ps, const std::string& name, int in, int out, Rng& rng, bool with_bias = true) {
    Linear l;
    l.weight = ps.xavier(name + ".weight", in, out, rng);
    if (with_bias) l.bias = ps.zeros(name + ".bias", {out});
    return l;
  }
  Var<T> operator()(const Var<T>& x) const { return linear(x, weight, bias); }
  int in_features() const { return weight.rows(); }
  int out_features() const { return weight.cols(); }
};

template <class T>
struct LayerNorm {
  Var<T> gain, bias;
  static LayerNorm create(ParamStore<T>& ps, const std::string& name, int width) {
    return {ps.ones(name + ".gain", {width}), ps.zeros(name + ".bias", {width})};
  }
  Var<T> operator()(const Var<T>& x) const { return layer_norm(x, gain, bias); }
};

template <class T>
struct GroupNorm {
  Var<T> gain, bias;
  int groups = 1;
  static GroupNorm create(ParamStore<T>& ps, const std::string& name, int width, int groups) {
    return {ps.ones(name + ".gain", {width}), ps.zeros(name + ".bias", {width}), groups};
  }
  Var<T> operator()(const Var<T>& x, int batch) const { return group_norm(x, batch, groups, gain, bias); }
};

/// k×k convolution over NHWC images stored as [batch*H*W, C].
template <class T>
struct Conv2d {
  Linear<T> proj;  // [k*k*Cin, Cout]
  int k = 1, stride = 1, pad = 0;

  static Conv2d create(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k, int stride, Rng& rng) {
    Conv2d c;
    c.k = k;
    c.stride = stride;
    c.pad = k / 2;
    c.proj.weight = ps.xavier(name + ".weight", k * k * cin, cout, rng);
    c.proj.bias = ps.zeros(name + ".bias", {cout});
    return c;
  }
  int out_size(int n) const { return (n + 2 * pad - k) / stride + 1; }
  Var<T> operator()(const Var<T>& x, int batch, int H, int W) const {
    if (k == 1 && stride == 1) return proj(x);
    return proj(im2col(x, batch, H, W, k, stride, pad));
  }
};

/// Position-wise two-layer network with ReLU.
template <class T>
struct FeedForward {
  Linear<T> fc1, fc2;
  static FeedForward create(ParamStore<T>& ps, const std::string& name, int width, int hidden, Rng& rng) {
    return {Linear<T>::create(ps, name + ".fc1", width, hidden, rng), Linear<T>::create(ps, name + ".fc2", hidden, width, rng)};
  }
  Var<T> operator()(const Var<T>& x) const { return fc2(relu(fc1(x))); }
};

/// Projections around `attention`. Output projection is applied after the
/// heads are concatenated.
template <class T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  int heads = 1;

  static MultiHeadAttention create(ParamStore<T>& ps, const std::string& name, int width, int heads, Rng& rng) {
    if (heads < 1 || width % heads != 0)
      throw DimensionError("attention heads (" + std::to_string(heads) + ") must divide width " + std::to_string(width));
    MultiHeadAttention m;
    m.wq = Linear<T>::create(ps, name + ".q", width, width, rng);
    m.wk = Linear<T>::create(ps, name + ".k", width, width, rng);
    m.wv = Linear<T>::create(ps, name + ".v", width, width, rng);
    m.wo = Linear<T>::create(ps, name + ".out", width, width, rng);
    m.heads = heads;
    return m;
  }
  Var<T> operator()(const Var<T>& q, const Var<T>& k, const Var<T>& v, int groups = 1) const {
    return wo(attention(wq(q), wk(k), wv(v), heads, groups));
  }
};

}  // namespace bifit
