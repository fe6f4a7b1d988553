#pragma once

// Differentiable primitives over row-major matrices. Most ops view their
// operands as [rows, cols] with cols = last extent.

#include <Eigen/Core>
#include <cmath>
#include <numeric>
#include <vector>

#include "bifit/autograd.hpp"

namespace bifit {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;
template <class T>
using StridedMap = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;
template <class T>
using CStridedMap = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;

template <class T>
CMapR<T> as_mat(const Tensor<T>& t) {
  return CMapR<T>(t.data(), t.rows(), t.cols());
}
template <class T>
MapR<T> as_mat(Tensor<T>& t) {
  return MapR<T>(t.data(), t.rows(), t.cols());
}

namespace detail {
inline void require(bool ok, const char* op, const std::string& msg) {
  if (!ok) throw DimensionError(std::string(op) + ": " + msg);
}
}  // namespace detail

template <class T>
Var<T> constant(Tensor<T> t) {
  return Var<T>(std::move(t), false);
}

// ---------------------------------------------------------------- elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require(a.size() == b.size(), "add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  out += b.value();
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    accumulate(n.parents[0], n.grad);
    accumulate(n.parents[1], n.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require(a.size() == b.size(), "sub", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    accumulate(n.parents[0], n.grad);
    Tensor<T> g = n.grad;
    for (auto& v : g.vec()) v = -v;
    accumulate(n.parents[1], g);
  });
}

/// Hadamard product.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require(a.size() == b.size(), "mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    const auto& av = n.parents[0]->value;
    const auto& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor<T> g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= bv[i];
      accumulate(n.parents[0], g);
    }
    if (n.parents[1]->requires_grad) {
      Tensor<T> g = n.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= av[i];
      accumulate(n.parents[1], g);
    }
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.vec()) v *= s;
  return make_op<T>(std::move(out), {a}, [s](Node<T>& n) {
    Tensor<T> g = n.grad;
    for (auto& v : g.vec()) v *= s;
    accumulate(n.parents[0], g);
  });
}

/// X[r, c] + v[c] for every row r.
template <class T>
Var<T> add_rowvec(const Var<T>& x, const Var<T>& v) {
  const int C = x.cols();
  detail::require(static_cast<int>(v.size()) == C, "add_rowvec", "vector length must equal column count");
  Tensor<T> out = x.value();
  const int R = out.rows();
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out.at(r, c) += v.value()[c];
  return make_op<T>(std::move(out), {x, v}, [R, C](Node<T>& n) {
    accumulate(n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) {
      Tensor<T> g(n.parents[1]->value.shape());
      for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) g[c] += n.grad.at(r, c);
      accumulate(n.parents[1], g);
    }
  });
}

namespace detail {
template <class T, class F, class DF>
Var<T> unary(const Var<T>& x, F f, DF df_from_xy) {
  Tensor<T> out = x.value();
  for (auto& v : out.vec()) v = f(v);
  return make_op<T>(std::move(out), {x}, [df_from_xy](Node<T>& n) {
    const auto& xv = n.parents[0]->value;
    Tensor<T> g = n.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= df_from_xy(xv[i], n.value[i]);
    accumulate(n.parents[0], g);
  });
}
}  // namespace detail

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> gelu(const Var<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return detail::unary(
      x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      });
}

template <class T>
T sigmoid_value(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(x, [](T v) { return sigmoid_value(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> tanh(const Var<T>& x) {
  return detail::unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// ------------------------------------------------------------------- algebra

/// A[M,K] @ B[K,N].
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  const int M = a.rows(), K = a.cols(), N = b.cols();
  detail::require(b.rows() == K, "matmul", shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  Tensor<T> out({M, N});
  as_mat(out).noalias() = as_mat(a.value()) * as_mat(b.value());
  return make_op<T>(std::move(out), {a, b}, [](Node<T>& n) {
    auto& A = n.parents[0];
    auto& B = n.parents[1];
    auto G = as_mat(static_cast<const Tensor<T>&>(n.grad));
    if (A->requires_grad) {
      Tensor<T> g(A->value.shape());
      as_mat(g).noalias() = G * as_mat(static_cast<const Tensor<T>&>(B->value)).transpose();
      accumulate(A, g);
    }
    if (B->requires_grad) {
      Tensor<T> g(B->value.shape());
      as_mat(g).noalias() = as_mat(static_cast<const Tensor<T>&>(A->value)).transpose() * G;
      accumulate(B, g);
    }
  });
}

/// X[M,in] @ W[in,out] + b[out]; `b` may be undefined.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const int M = x.rows(), K = x.cols(), N = w.cols();
  detail::require(w.rows() == K, "linear", "input width " + std::to_string(K) + " vs weight " + shape_str(w.shape()));
  Tensor<T> out({M, N});
  auto O = as_mat(out);
  O.noalias() = as_mat(x.value()) * as_mat(w.value());
  const bool has_bias = b.defined();
  if (has_bias) {
    detail::require(static_cast<int>(b.size()) == N, "linear", "bias length mismatch");
    O.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().data(), N);
  }
  std::vector<Var<T>> parents{x, w};
  if (has_bias) parents.push_back(b);
  return make_op<T>(std::move(out), std::move(parents), [has_bias](Node<T>& n) {
    auto& X = n.parents[0];
    auto& W = n.parents[1];
    auto G = as_mat(static_cast<const Tensor<T>&>(n.grad));
    if (X->requires_grad) {
      Tensor<T> g(X->value.shape());
      as_mat(g).noalias() = G * as_mat(static_cast<const Tensor<T>&>(W->value)).transpose();
      accumulate(X, g);
    }
    if (W->requires_grad) {
      Tensor<T> g(W->value.shape());
      as_mat(g).noalias() = as_mat(static_cast<const Tensor<T>&>(X->value)).transpose() * G;
      accumulate(W, g);
    }
    if (has_bias && n.parents[2]->requires_grad) {
      Tensor<T> g(n.parents[2]->value.shape());
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(g.data(), g.size()) = G.colwise().sum();
      accumulate(n.parents[2], g);
    }
  });
}

// ------------------------------------------------------------ normalization

/// Row-wise layer normalization with per-column gain and bias.
template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  const int R = x.rows(), C = x.cols();
  detail::require(static_cast<int>(gain.size()) == C && static_cast<int>(bias.size()) == C, "layer_norm",
                  "gain/bias width mismatch");
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.size()), rstd(R);
  for (int r = 0; r < R; ++r) {
    const T* xr = x.value().data() + static_cast<std::size_t>(r) * C;
    T mean = 0;
    for (int c = 0; c < C; ++c) mean += xr[c];
    mean /= C;
    T var = 0;
    for (int c = 0; c < C; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= C;
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (int c = 0; c < C; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * C + c;
      xhat[i] = (xr[c] - mean) * rstd[r];
      out[i] = xhat[i] * gain.value()[c] + bias.value()[c];
    }
  }
  return make_op<T>(std::move(out), {x, gain, bias}, [R, C, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& n) {
    const auto& g = n.grad;
    const auto& gv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor<T> dx(n.value.shape());
      for (int r = 0; r < R; ++r) {
        T s1 = 0, s2 = 0;
        for (int c = 0; c < C; ++c) {
          const std::size_t i = static_cast<std::size_t>(r) * C + c;
          const T d = g[i] * gv[c];
          s1 += d;
          s2 += d * xhat[i];
        }
        for (int c = 0; c < C; ++c) {
          const std::size_t i = static_cast<std::size_t>(r) * C + c;
          const T d = g[i] * gv[c];
          dx[i] = rstd[r] * (d - s1 / C - xhat[i] * s2 / C);
        }
      }
      accumulate(n.parents[0], dx);
    }
    Tensor<T> dg(gv.shape()), db(gv.shape());
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) {
        const std::size_t i = static_cast<std::size_t>(r) * C + c;
        dg[c] += g[i] * xhat[i];
        db[c] += g[i];
      }
    accumulate(n.parents[1], dg);
    accumulate(n.parents[2], db);
  });
}

/// Group normalization over `batch` images stored as [batch * pixels, C].
/// Statistics are taken per image and per channel group.
template <class T>
Var<T> group_norm(const Var<T>& x, int batch, int groups, const Var<T>& gain, const Var<T>& bias,
                  T eps = T(1e-5)) {
  const int C = x.cols();
  detail::require(batch > 0 && x.rows() % batch == 0, "group_norm", "rows not divisible by batch");
  detail::require(groups > 0 && C % groups == 0, "group_norm", "channels not divisible by groups");
  const int P = x.rows() / batch, cg = C / groups;
  const T count = static_cast<T>(P) * cg;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.size()), rstd(static_cast<std::size_t>(batch) * groups);
  const auto& xv = x.value();
  for (int b = 0; b < batch; ++b)
    for (int gi = 0; gi < groups; ++gi) {
      T mean = 0, var = 0;
      for (int p = 0; p < P; ++p)
        for (int c = gi * cg; c < (gi + 1) * cg; ++c) mean += xv.at(b * P + p, c);
      mean /= count;
      for (int p = 0; p < P; ++p)
        for (int c = gi * cg; c < (gi + 1) * cg; ++c) {
          const T d = xv.at(b * P + p, c) - mean;
          var += d * d;
        }
      var /= count;
      const T rs = T(1) / std::sqrt(var + eps);
      rstd[static_cast<std::size_t>(b) * groups + gi] = rs;
      for (int p = 0; p < P; ++p)
        for (int c = gi * cg; c < (gi + 1) * cg; ++c) {
          const std::size_t i = static_cast<std::size_t>(b * P + p) * C + c;
          xhat[i] = (xv[i] - mean) * rs;
          out[i] = xhat[i] * gain.value()[c] + bias.value()[c];
        }
    }
  return make_op<T>(std::move(out), {x, gain, bias},
                    [batch, groups, P, C, cg, count, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& n) {
                      const auto& g = n.grad;
                      const auto& gv = n.parents[1]->value;
                      if (n.parents[0]->requires_grad) {
                        Tensor<T> dx(n.value.shape());
                        for (int b = 0; b < batch; ++b)
                          for (int gi = 0; gi < groups; ++gi) {
                            T s1 = 0, s2 = 0;
                            for (int p = 0; p < P; ++p)
                              for (int c = gi * cg; c < (gi + 1) * cg; ++c) {
                                const std::size_t i = static_cast<std::size_t>(b * P + p) * C + c;
                                const T d = g[i] * gv[c];
                                s1 += d;
                                s2 += d * xhat[i];
                              }
                            const T rs = rstd[static_cast<std::size_t>(b) * groups + gi];
                            for (int p = 0; p < P; ++p)
                              for (int c = gi * cg; c < (gi + 1) * cg; ++c) {
                                const std::size_t i = static_cast<std::size_t>(b * P + p) * C + c;
                                dx[i] = rs * (g[i] * gv[c] - s1 / count - xhat[i] * s2 / count);
                              }
                          }
                        accumulate(n.parents[0], dx);
                      }
                      Tensor<T> dg(gv.shape()), db(gv.shape());
                      const int R = batch * P;
                      for (int r = 0; r < R; ++r)
                        for (int c = 0; c < C; ++c) {
                          const std::size_t i = static_cast<std::size_t>(r) * C + c;
                          dg[c] += g[i] * xhat[i];
                          db[c] += g[i];
                        }
                      accumulate(n.parents[1], dg);
                      accumulate(n.parents[2], db);
                    });
}

// ------------------------------------------------------------ image layout

/// Unfolds k×k patches of `batch` NHWC images stored as [batch*H*W, C] into
/// [batch*Ho*Wo, k*k*C] (zero padding). Column order is (ky, kx, c).
template <class T>
Var<T> im2col(const Var<T>& x, int batch, int H, int W, int k, int stride, int pad) {
  const int C = x.cols();
  detail::require(x.rows() == batch * H * W, "im2col", "row count must equal batch*H*W");
  const int Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  const int KC = k * k * C;
  Tensor<T> out({batch * Ho * Wo, KC});
  const auto& xv = x.value();
  for (int b = 0; b < batch; ++b)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        T* dst = out.data() + static_cast<std::size_t>((b * Ho + oy) * Wo + ox) * KC;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            T* d = dst + (ky * k + kx) * C;
            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
            const T* s = xv.data() + static_cast<std::size_t>((b * H + iy) * W + ix) * C;
            std::copy(s, s + C, d);
          }
        }
      }
  return make_op<T>(std::move(out), {x}, [=](Node<T>& n) {
    Tensor<T> g(n.parents[0]->value.shape());
    for (int b = 0; b < batch; ++b)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const T* src = n.grad.data() + static_cast<std::size_t>((b * Ho + oy) * Wo + ox) * KC;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              const T* s = src + (ky * k + kx) * C;
              T* d = g.data() + static_cast<std::size_t>((b * H + iy) * W + ix) * C;
              for (int c = 0; c < C; ++c) d[c] += s[c];
            }
          }
        }
    accumulate(n.parents[0], g);
  });
}

/// Nearest-neighbour 2× upsampling of NHWC images stored as [batch*H*W, C].
template <class T>
Var<T> upsample2x(const Var<T>& x, int batch, int H, int W) {
  const int C = x.cols();
  detail::require(x.rows() == batch * H * W, "upsample2x", "row count must equal batch*H*W");
  Tensor<T> out({batch * 4 * H * W, C});
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx) {
        const T* s = x.value().data() + static_cast<std::size_t>((b * H + y / 2) * W + xx / 2) * C;
        std::copy(s, s + C, out.data() + static_cast<std::size_t>((b * 2 * H + y) * 2 * W + xx) * C);
      }
  return make_op<T>(std::move(out), {x}, [=](Node<T>& n) {
    Tensor<T> g(n.parents[0]->value.shape());
    for (int b = 0; b < batch; ++b)
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx) {
          const T* s = n.grad.data() + static_cast<std::size_t>((b * 2 * H + y) * 2 * W + xx) * C;
          T* d = g.data() + static_cast<std::size_t>((b * H + y / 2) * W + xx / 2) * C;
          for (int c = 0; c < C; ++c) d[c] += s[c];
        }
    accumulate(n.parents[0], g);
  });
}

// ------------------------------------------------------------- structural

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_op<T>(std::move(out), {x}, [](Node<T>& n) {
    accumulate(n.parents[0], n.grad.reshaped(n.parents[0]->value.shape()));
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& xs) {
  detail::require(!xs.empty(), "concat_rows", "no inputs");
  const int C = xs.front().cols();
  int R = 0;
  for (const auto& x : xs) {
    detail::require(x.cols() == C, "concat_rows", "column count mismatch");
    R += x.rows();
  }
  Tensor<T> out({R, C});
  std::size_t off = 0;
  for (const auto& x : xs) {
    std::copy(x.value().data(), x.value().data() + x.size(), out.data() + off);
    off += x.size();
  }
  return make_op<T>(std::move(out), xs, [](Node<T>& n) {
    std::size_t off = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) {
        Tensor<T> g(p->value.shape());
        std::copy(n.grad.data() + off, n.grad.data() + off + g.size(), g.data());
        accumulate(p, g);
      }
      off += p->value.size();
    }
  });
}

template <class T>
Var<T> slice_rows(const Var<T>& x, int begin, int count) {
  const int C = x.cols();
  detail::require(begin >= 0 && count >= 0 && begin + count <= x.rows(), "slice_rows", "range out of bounds");
  Tensor<T> out({count, C});
  const T* s = x.value().data() + static_cast<std::size_t>(begin) * C;
  std::copy(s, s + out.size(), out.data());
  return make_op<T>(std::move(out), {x}, [begin, C](Node<T>& n) {
    Tensor<T> g(n.parents[0]->value.shape());
    std::copy(n.grad.data(), n.grad.data() + n.grad.size(), g.data() + static_cast<std::size_t>(begin) * C);
    accumulate(n.parents[0], g);
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& xs) {
  detail::require(!xs.empty(), "concat_cols", "no inputs");
  const int R = xs.front().rows();
  int C = 0;
  for (const auto& x : xs) {
    detail::require(x.rows() == R, "concat_cols", "row count mismatch");
    C += x.cols();
  }
  Tensor<T> out({R, C});
  int off = 0;
  for (const auto& x : xs) {
    const int c = x.cols();
    for (int r = 0; r < R; ++r)
      std::copy(x.value().data() + static_cast<std::size_t>(r) * c, x.value().data() + static_cast<std::size_t>(r + 1) * c,
                out.data() + static_cast<std::size_t>(r) * C + off);
    off += c;
  }
  return make_op<T>(std::move(out), xs, [R, C](Node<T>& n) {
    int off = 0;
    for (auto& p : n.parents) {
      const int c = p->value.cols();
      if (p->requires_grad) {
        Tensor<T> g(p->value.shape());
        for (int r = 0; r < R; ++r)
          std::copy(n.grad.data() + static_cast<std::size_t>(r) * C + off,
                    n.grad.data() + static_cast<std::size_t>(r) * C + off + c, g.data() + static_cast<std::size_t>(r) * c);
        accumulate(p, g);
      }
      off += c;
    }
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& x, int begin, int count) {
  const int R = x.rows(), C = x.cols();
  detail::require(begin >= 0 && count >= 0 && begin + count <= C, "slice_cols", "range out of bounds");
  Tensor<T> out({R, count});
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < count; ++c) out.at(r, c) = x.value().at(r, begin + c);
  return make_op<T>(std::move(out), {x}, [R, begin, count](Node<T>& n) {
    Tensor<T> g(n.parents[0]->value.shape());
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < count; ++c) g.at(r, begin + c) = n.grad.at(r, c);
    accumulate(n.parents[0], g);
  });
}

/// out[i] = x[indices[i]] (rows). Backward scatters with accumulation.
template <class T>
Var<T> gather_rows(const Var<T>& x, std::vector<int> indices) {
  const int C = x.cols(), R = x.rows();
  Tensor<T> out({static_cast<int>(indices.size()), C});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    detail::require(indices[i] >= 0 && indices[i] < R, "gather_rows", "index out of range");
    const T* s = x.value().data() + static_cast<std::size_t>(indices[i]) * C;
    std::copy(s, s + C, out.data() + i * C);
  }
  return make_op<T>(std::move(out), {x}, [C, idx = std::move(indices)](Node<T>& n) {
    Tensor<T> g(n.parents[0]->value.shape());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const T* s = n.grad.data() + i * C;
      T* d = g.data() + static_cast<std::size_t>(idx[i]) * C;
      for (int c = 0; c < C; ++c) d[c] += s[c];
    }
    accumulate(n.parents[0], g);
  });
}

/// Tiles the whole [R, C] block `times` times along rows.
template <class T>
Var<T> repeat_rows(const Var<T>& x, int times) {
  detail::require(times >= 0, "repeat_rows", "negative repeat");
  const std::size_t blk = x.size();
  Tensor<T> out({x.rows() * times, x.cols()});
  for (int t = 0; t < times; ++t) std::copy(x.value().data(), x.value().data() + blk, out.data() + t * blk);
  return make_op<T>(std::move(out), {x}, [times, blk](Node<T>& n) {
    Tensor<T> g(n.parents[0]->value.shape());
    for (int t = 0; t < times; ++t)
      for (std::size_t i = 0; i < blk; ++i) g[i] += n.grad[t * blk + i];
    accumulate(n.parents[0], g);
  });
}

/// Column means: [R, C] -> [1, C].
template <class T>
Var<T> mean_rows(const Var<T>& x) {
  const int R = x.rows(), C = x.cols();
  if (R == 0) throw InputError("mean_rows: empty input");
  Tensor<T> out({1, C});
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[c] += x.value().at(r, c);
  for (auto& v : out.vec()) v /= R;
  return make_op<T>(std::move(out), {x}, [R, C](Node<T>& n) {
    Tensor<T> g(n.parents[0]->value.shape());
    for (int r = 0; r < R; ++r)
      for (int c = 0; c < C; ++c) g.at(r, c) = n.grad[c] / R;
    accumulate(n.parents[0], g);
  });
}

/// Rows of `table` selected by `ids`.
template <class T>
Var<T> embedding(const Var<T>& table, const std::vector<int>& ids) {
  for (int id : ids)
    if (id < 0 || id >= table.rows())
      throw InputError("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(table.rows()));
  return gather_rows(table, ids);
}

/// Sum of a list of equally shaped tensors.
template <class T>
Var<T> add_n(const std::vector<Var<T>>& xs) {
  detail::require(!xs.empty(), "add_n", "no inputs");
  Tensor<T> out = xs.front().value();
  for (std::size_t i = 1; i < xs.size(); ++i) {
    detail::require(xs[i].size() == out.size(), "add_n", "shape mismatch");
    out += xs[i].value();
  }
  return make_op<T>(std::move(out), xs, [](Node<T>& n) {
    for (auto& p : n.parents) accumulate(p, n.grad);
  });
}

/// Sum of all elements -> [1].
template <class T>
Var<T> sum_all(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().vec()) s += v;
  return make_op<T>(Tensor<T>({1}, std::vector<T>{s}), {x}, [](Node<T>& n) {
    Tensor<T> g(n.parents[0]->value.shape(), n.grad[0]);
    accumulate(n.parents[0], g);
  });
}

}  // namespace bifit
