#pragma once

// AdamW with decoupled weight decay and a two-milestone step decay.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "bifit/nn.hpp"

namespace bifit {

struct OptimConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double grad_clip = 0.1;  // max global gradient norm; 0 disables
  int steps = 2000;
  int batch_clips = 1;  // clips averaged per update
  double milestone1 = 0.6, milestone2 = 0.85;  // fractions of `steps`
  double decay = 0.1;

  void validate() const {
    if (!(lr > 0)) throw ConfigError("optim.lr must be positive");
    if (weight_decay < 0 || grad_clip < 0) throw ConfigError("optim.weight_decay and optim.grad_clip must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("optim betas must lie in [0,1)");
    if (steps < 0) throw ConfigError("optim.steps must be non-negative");
    if (batch_clips < 1) throw ConfigError("optim.batch_clips must be at least 1");
    if (!(milestone1 >= 0 && milestone1 <= milestone2 && milestone2 <= 1)) throw ConfigError("need 0 <= milestone1 <= milestone2 <= 1");
  }

  /// Step size for the update numbered `step` (0-based).
  double lr_at(int step) const {
    double r = lr;
    if (step >= static_cast<int>(std::ceil(milestone1 * steps))) r *= decay;
    if (step >= static_cast<int>(std::ceil(milestone2 * steps))) r *= decay;
    return r;
  }
};

template <class T>
class AdamW {
 public:
  explicit AdamW(const OptimConfig& cfg) : cfg_(cfg) {}

  /// Rescales all gradients so their global L2 norm is at most `max_norm`.
  /// Returns the norm before clipping.
  static double clip_grad_norm(ParamStore<T>& ps, double max_norm) {
    double sq = 0;
    for (auto& [_, p] : ps.entries())
      if (p.has_grad())
        for (T g : p.grad().vec()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
      const T s = static_cast<T>(max_norm / (norm + 1e-12));
      for (auto& [_, p] : ps.entries())
        if (p.has_grad())
          for (T& g : p.grad().vec()) g *= s;
    }
    return norm;
  }

  /// One update with step size `lr`. Parameters without a gradient (unused
  /// in this step) are left untouched.
  void step(ParamStore<T>& ps, double lr) {
    ++t_;
    const double bc1 = 1 - std::pow(cfg_.beta1, t_), bc2 = 1 - std::pow(cfg_.beta2, t_);
    for (auto& [name, p] : ps.entries()) {
      if (!p.has_grad()) continue;
      auto& st = state_[name];
      if (st.m.size() != p.size()) {
        st.m = Tensor<T>(p.shape());
        st.v = Tensor<T>(p.shape());
      }
      T* w = p.mutable_value().data();
      const T* g = p.grad().data();
      T* m = st.m.data();
      T* v = st.v.data();
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g[i]);
        v[i] = static_cast<T>(cfg_.beta2 * v[i] + (1 - cfg_.beta2) * static_cast<double>(g[i]) * g[i]);
        const double mh = m[i] / bc1, vh = v[i] / bc2;
        w[i] = static_cast<T>(w[i] - lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * w[i]));
      }
    }
  }

  struct Moments {
    Tensor<T> m, v;
  };
  long long steps_taken() const { return t_; }
  void set_steps_taken(long long t) { t_ = t; }
  std::map<std::string, Moments>& state() { return state_; }
  const std::map<std::string, Moments>& state() const { return state_; }

 private:
  OptimConfig cfg_;
  long long t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace bifit
