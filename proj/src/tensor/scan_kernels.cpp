// Copyright 2026 The quad2lin Authors.
// SPDX-License-Identifier: Apache-2.0

#include "quad2lin/scan_kernels.hpp"

#include <algorithm>

#include "quad2lin/kernels.hpp"

namespace q2l::kernels {

ScanGeometry scan_geometry(const Shape& q, const Shape& k, const Shape& v, const Shape& gamma,
                           std::size_t heads, std::size_t groups) {
  if (heads == 0 || groups == 0 || heads % groups != 0) {
    throw DimensionError("scan: heads (" + std::to_string(heads) +
                         ") must be a positive multiple of groups (" + std::to_string(groups) + ")");
  }
  if (q.size() != 2 || k.size() != 2 || v.size() != 2 || gamma.size() != 2) {
    throw DimensionError("scan: q, k, v, gamma must be rank-2");
  }
  ScanGeometry g{q[0], heads, groups, q[1] / heads};
  if (g.head_dim * heads != q[1] || k != Shape{g.steps, groups * g.head_dim} || v != k ||
      gamma != Shape{g.steps, groups}) {
    throw DimensionError("scan: inconsistent shapes q" + shape_str(q) + " k" + shape_str(k) + " v" +
                         shape_str(v) + " gamma" + shape_str(gamma));
  }
  return g;
}

template <typename T>
Tensor<T> scan_recurrent(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                         const Tensor<T>& gamma, const ScanGeometry& g, T score_scale,
                         std::vector<T>* states) {
  const std::size_t dh = g.head_dim, hpg = g.heads_per_group();
  const std::size_t qc = g.heads * dh, kc = g.groups * dh, ss = dh * dh;
  Tensor<T> y(Shape{g.steps, qc});
  std::vector<T> s(g.groups * ss, T(0));
  if (states) states->assign(g.steps * g.groups * ss, T(0));
  for (std::size_t t = 0; t < g.steps; ++t) {
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      T* sg = s.data() + grp * ss;
      const T gm = gamma.data()[t * g.groups + grp];
      const T* kt = k.data() + t * kc + grp * dh;
      const T* vt = v.data() + t * kc + grp * dh;
      for (std::size_t a = 0; a < dh; ++a) {
        T* srow = sg + a * dh;
        const T va = vt[a];
        for (std::size_t b = 0; b < dh; ++b) srow[b] = gm * srow[b] + va * kt[b];
      }
      for (std::size_t h = grp * hpg; h < (grp + 1) * hpg; ++h) {
        const T* qt = q.data() + t * qc + h * dh;
        T* yt = y.data() + t * qc + h * dh;
        for (std::size_t a = 0; a < dh; ++a) yt[a] = score_scale * dot(sg + a * dh, qt, dh);
      }
      if (states) std::copy_n(sg, ss, states->data() + (t * g.groups + grp) * ss);
    }
  }
  return y;
}

template <typename T>
Tensor<T> scan_chunked(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                       const Tensor<T>& gamma, const ScanGeometry& g, T score_scale,
                       std::size_t chunk) {
  if (chunk == 0) throw ContractError("scan_chunked: chunk must be >= 1");
  const std::size_t dh = g.head_dim, hpg = g.heads_per_group();
  const std::size_t qc = g.heads * dh, kc = g.groups * dh, ss = dh * dh;
  Tensor<T> y(Shape{g.steps, qc});
  std::vector<T> state(g.groups * ss, T(0));
  std::vector<T> kb(chunk * dh), vb(chunk * dh), qb(chunk * dh), yb(chunk * dh);
  std::vector<T> decay(chunk * chunk), scores(chunk * chunk), cum(chunk), tailw(chunk), inter(chunk * dh);
  std::vector<T> next(ss);

  for (std::size_t s0 = 0; s0 < g.steps; s0 += chunk) {
    const std::size_t c = std::min(chunk, g.steps - s0);
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      const T* gm = gamma.data() + grp;
      auto gam = [&](std::size_t t) { return gm[(s0 + t) * g.groups]; };
      // decay[t][i] = prod_{j=i+1..t} gamma_j for i <= t, built by running products
      // so a zero gamma gives an exact zero rather than 0/0.
      for (std::size_t t = 0; t < c; ++t) {
        T run = T(1);
        for (std::size_t i = t + 1; i-- > 0;) {
          decay[t * c + i] = run;
          run *= gam(i);
        }
        for (std::size_t i = t + 1; i < c; ++i) decay[t * c + i] = T(0);
        cum[t] = run;  // prod_{j=0..t} gamma_j: decay of the carried state
      }
      for (std::size_t i = 0; i < c; ++i) tailw[i] = decay[(c - 1) * c + i];
      for (std::size_t t = 0; t < c; ++t) {
        std::copy_n(k.data() + (s0 + t) * kc + grp * dh, dh, kb.data() + t * dh);
        std::copy_n(v.data() + (s0 + t) * kc + grp * dh, dh, vb.data() + t * dh);
      }
      T* sg = state.data() + grp * ss;
      for (std::size_t h = grp * hpg; h < (grp + 1) * hpg; ++h) {
        for (std::size_t t = 0; t < c; ++t)
          std::copy_n(q.data() + (s0 + t) * qc + h * dh, dh, qb.data() + t * dh);
        gemm_nt(qb.data(), kb.data(), scores.data(), c, dh, c);
        for (std::size_t i = 0; i < c * c; ++i) scores[i] *= decay[i];
        gemm_nn(scores.data(), vb.data(), yb.data(), c, c, dh);
        // carried state: y_t += cum_t * S_prev q_t, i.e. rows of Q S^T
        gemm_nt(qb.data(), sg, inter.data(), c, dh, dh);
        for (std::size_t t = 0; t < c; ++t) {
          T* yt = y.data() + (s0 + t) * qc + h * dh;
          for (std::size_t a = 0; a < dh; ++a)
            yt[a] = score_scale * (yb[t * dh + a] + cum[t] * inter[t * dh + a]);
        }
      }
      // S_next = cum_{c-1} S_prev + sum_i tailw_i v_i k_i^T
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t a = 0; a < dh; ++a) vb[i * dh + a] *= tailw[i];
      gemm_tn(vb.data(), kb.data(), next.data(), dh, c, dh);
      for (std::size_t i = 0; i < ss; ++i) sg[i] = cum[c - 1] * sg[i] + next[i];
    }
  }
  return y;
}

template <typename T>
void scan_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                   const Tensor<T>& gamma, const ScanGeometry& g, T score_scale,
                   const std::vector<T>& states, const Tensor<T>& dy, Tensor<T>* dq,
                   Tensor<T>* dk, Tensor<T>* dv, Tensor<T>* dgamma) {
  const std::size_t dh = g.head_dim, hpg = g.heads_per_group();
  const std::size_t qc = g.heads * dh, kc = g.groups * dh, ss = dh * dh;
  // gacc holds dL/dS_t for each group, including contributions carried back from t+1.
  std::vector<T> gacc(g.groups * ss, T(0));
  for (std::size_t t = g.steps; t-- > 0;) {
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      T* G = gacc.data() + grp * ss;
      if (t + 1 < g.steps) {
        const T gnext = gamma.data()[(t + 1) * g.groups + grp];
        for (std::size_t i = 0; i < ss; ++i) G[i] *= gnext;
      } else {
        std::fill(G, G + ss, T(0));
      }
      const T* st = states.data() + (t * g.groups + grp) * ss;
      for (std::size_t h = grp * hpg; h < (grp + 1) * hpg; ++h) {
        const T* qt = q.data() + t * qc + h * dh;
        const T* dyt = dy.data() + t * qc + h * dh;
        for (std::size_t a = 0; a < dh; ++a) {
          const T da = score_scale * dyt[a];
          T* grow = G + a * dh;
          for (std::size_t b = 0; b < dh; ++b) grow[b] += da * qt[b];
        }
        if (dq) {
          // dq_t = scale * S_t^T dy_t
          T* dqt = dq->data() + t * qc + h * dh;
          for (std::size_t a = 0; a < dh; ++a) {
            const T da = score_scale * dyt[a];
            const T* srow = st + a * dh;
            for (std::size_t b = 0; b < dh; ++b) dqt[b] += da * srow[b];
          }
        }
      }
      const T* kt = k.data() + t * kc + grp * dh;
      const T* vt = v.data() + t * kc + grp * dh;
      if (dv) {
        T* dvt = dv->data() + t * kc + grp * dh;
        for (std::size_t a = 0; a < dh; ++a) dvt[a] += dot(G + a * dh, kt, dh);
      }
      if (dk) {
        T* dkt = dk->data() + t * kc + grp * dh;
        for (std::size_t a = 0; a < dh; ++a) {
          const T va = vt[a];
          const T* grow = G + a * dh;
          for (std::size_t b = 0; b < dh; ++b) dkt[b] += va * grow[b];
        }
      }
      if (dgamma && t > 0) {
        const T* sprev = states.data() + ((t - 1) * g.groups + grp) * ss;
        dgamma->data()[t * g.groups + grp] += dot(G, sprev, ss);
      }
    }
  }
}

template Tensor<float> scan_recurrent(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                      const Tensor<float>&, const ScanGeometry&, float,
                                      std::vector<float>*);
template Tensor<double> scan_recurrent(const Tensor<double>&, const Tensor<double>&,
                                       const Tensor<double>&, const Tensor<double>&,
                                       const ScanGeometry&, double, std::vector<double>*);
template Tensor<float> scan_chunked(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                    const Tensor<float>&, const ScanGeometry&, float, std::size_t);
template Tensor<double> scan_chunked(const Tensor<double>&, const Tensor<double>&,
                                     const Tensor<double>&, const Tensor<double>&,
                                     const ScanGeometry&, double, std::size_t);
template void scan_backward(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                            const Tensor<float>&, const ScanGeometry&, float,
                            const std::vector<float>&, const Tensor<float>&, Tensor<float>*,
                            Tensor<float>*, Tensor<float>*, Tensor<float>*);
template void scan_backward(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                            const Tensor<double>&, const ScanGeometry&, double,
                            const std::vector<double>&, const Tensor<double>&, Tensor<double>*,
                            Tensor<double>*, Tensor<double>*, Tensor<double>*);

}  // namespace q2l::kernels
