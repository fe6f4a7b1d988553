#pragma once

#include <cmath>
#include <vector>

#include "bifit/ops.hpp"

namespace bifit {

/// Collects every softmax matrix produced by `attention` on this thread while
/// installed. Used by invariant checks; costs nothing when absent.
template <class T>
struct AttentionLog {
  std::vector<Tensor<T>> weights;
};

namespace detail {
template <class T>
inline thread_local AttentionLog<T>* attention_log = nullptr;
}

template <class T>
class AttentionLogScope {
 public:
  explicit AttentionLogScope(AttentionLog<T>& log) : prev_(detail::attention_log<T>) {
    detail::attention_log<T> = &log;
  }
  ~AttentionLogScope() { detail::attention_log<T> = prev_; }
  AttentionLogScope(const AttentionLogScope&) = delete;
  AttentionLogScope& operator=(const AttentionLogScope&) = delete;

 private:
  AttentionLog<T>* prev_;
};

/// Multi-head scaled dot-product attention on already-projected inputs.
///
/// q: [Mq, C], k: [Mk, C], v: [Mk, Cv]. Heads split the column axis evenly.
/// Rows are partitioned into `groups` equal contiguous blocks and block g of
/// the queries only sees block g of the keys, which is how frame-independent
/// attention is expressed. Returns [Mq, Cv] with heads concatenated.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, int groups = 1) {
  const int Mq = q.rows(), Mk = k.rows(), C = q.cols(), Cv = v.cols();
  if (Mq == 0 || Mk == 0) throw InputError("attention: empty query or context");
  detail::require(k.cols() == C, "attention", "query/key width mismatch");
  detail::require(v.rows() == Mk, "attention", "key/value row mismatch");
  detail::require(heads > 0 && C % heads == 0 && Cv % heads == 0, "attention", "heads must divide widths");
  detail::require(groups > 0 && Mq % groups == 0 && Mk % groups == 0, "attention", "groups must divide rows");
  const int dh = C / heads, dv = Cv / heads, mq = Mq / groups, mk = Mk / groups;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));

  Tensor<T> out({Mq, Cv});
  std::vector<T> probs(static_cast<std::size_t>(groups) * heads * mq * mk);
  for (int g = 0; g < groups; ++g)
    for (int h = 0; h < heads; ++h) {
      CStridedMap<T> Q(q.value().data() + static_cast<std::size_t>(g) * mq * C + h * dh, mq, dh, Eigen::OuterStride<>(C));
      CStridedMap<T> K(k.value().data() + static_cast<std::size_t>(g) * mk * C + h * dh, mk, dh, Eigen::OuterStride<>(C));
      CStridedMap<T> V(v.value().data() + static_cast<std::size_t>(g) * mk * Cv + h * dv, mk, dv, Eigen::OuterStride<>(Cv));
      MapR<T> P(probs.data() + (static_cast<std::size_t>(g) * heads + h) * mq * mk, mq, mk);
      P.noalias() = (Q * K.transpose()) * sc;
      for (int r = 0; r < mq; ++r) {
        const T mx = P.row(r).maxCoeff();
        P.row(r) = (P.row(r).array() - mx).exp();
        P.row(r) /= P.row(r).sum();
      }
      StridedMap<T> O(out.data() + static_cast<std::size_t>(g) * mq * Cv + h * dv, mq, dv, Eigen::OuterStride<>(Cv));
      O.noalias() = P * V;
      if (auto* log = detail::attention_log<T>) {
        Tensor<T> w({mq, mk});
        std::copy(P.data(), P.data() + P.size(), w.data());
        log->weights.push_back(std::move(w));
      }
    }

  return make_op<T>(std::move(out), {q, k, v}, [=, probs = std::move(probs)](Node<T>& n) {
    const auto& qv = n.parents[0]->value;
    const auto& kv = n.parents[1]->value;
    const auto& vv = n.parents[2]->value;
    Tensor<T> dq(qv.shape()), dk(kv.shape()), dvt(vv.shape());
    MatR<T> dP, dS;
    for (int g = 0; g < groups; ++g)
      for (int h = 0; h < heads; ++h) {
        CStridedMap<T> Q(qv.data() + static_cast<std::size_t>(g) * mq * C + h * dh, mq, dh, Eigen::OuterStride<>(C));
        CStridedMap<T> K(kv.data() + static_cast<std::size_t>(g) * mk * C + h * dh, mk, dh, Eigen::OuterStride<>(C));
        CStridedMap<T> V(vv.data() + static_cast<std::size_t>(g) * mk * Cv + h * dv, mk, dv, Eigen::OuterStride<>(Cv));
        CMapR<T> P(probs.data() + (static_cast<std::size_t>(g) * heads + h) * mq * mk, mq, mk);
        CStridedMap<T> dO(n.grad.data() + static_cast<std::size_t>(g) * mq * Cv + h * dv, mq, dv, Eigen::OuterStride<>(Cv));
        StridedMap<T> dQ(dq.data() + static_cast<std::size_t>(g) * mq * C + h * dh, mq, dh, Eigen::OuterStride<>(C));
        StridedMap<T> dK(dk.data() + static_cast<std::size_t>(g) * mk * C + h * dh, mk, dh, Eigen::OuterStride<>(C));
        StridedMap<T> dV(dvt.data() + static_cast<std::size_t>(g) * mk * Cv + h * dv, mk, dv, Eigen::OuterStride<>(Cv));
        dV.noalias() += P.transpose() * dO;
        dP.noalias() = dO * V.transpose();
        dS = P.cwiseProduct(dP);
        for (int r = 0; r < mq; ++r) {
          const T s = dS.row(r).sum();
          dS.row(r) -= P.row(r) * s;
        }
        dQ.noalias() += (dS * K) * sc;
        dK.noalias() += (dS.transpose() * Q) * sc;
      }
    accumulate(n.parents[0], dq);
    accumulate(n.parents[1], dk);
    accumulate(n.parents[2], dvt);
  });
}

}  // namespace bifit
