#pragma once

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "abswin/grid.hpp"

namespace abswin {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct AttentionLayerConfig {
  int dim = 0;
  int heads = 1;
  std::optional<int> window_size;  // absent = global attention
  bool use_relpos = false;

  int head_dim() const { return dim / heads; }
  void validate() const {
    if (dim < 1 || heads < 1 || dim % heads != 0) {
      throw std::invalid_argument("AttentionLayerConfig: dim must be divisible by heads");
    }
    if (window_size && *window_size < 1) {
      throw std::invalid_argument("AttentionLayerConfig: window_size must be >= 1");
    }
  }
};

// Decomposed per-axis relative-position tables, shared across heads.
// row/col hold (2*side - 1) entries of head_dim values each.
template <typename T>
struct RelPosTables {
  int side = 0;
  int head_dim = 0;
  std::vector<T> row;
  std::vector<T> col;

  static RelPosTables zeros(int side, int head_dim) {
    RelPosTables t;
    t.side = side;
    t.head_dim = head_dim;
    t.row.assign(static_cast<std::size_t>(2 * side - 1) * head_dim, T(0));
    t.col.assign(static_cast<std::size_t>(2 * side - 1) * head_dim, T(0));
    return t;
  }
};

template <typename T>
struct MhsaParams {
  // Projection weights, row-major (in x out); biases of length dim.
  std::vector<T> wq, wk, wv, wo;
  std::vector<T> bq, bk, bv, bo;
  RelPosTables<T> relpos;

  static MhsaParams identity(int dim) {
    MhsaParams p;
    auto eye = [dim] {
      std::vector<T> m(static_cast<std::size_t>(dim) * dim, T(0));
      for (int i = 0; i < dim; ++i) m[static_cast<std::size_t>(i) * dim + i] = T(1);
      return m;
    };
    p.wq = eye();
    p.wk = eye();
    p.wv = eye();
    p.wo = eye();
    p.bq.assign(dim, T(0));
    p.bk.assign(dim, T(0));
    p.bv.assign(dim, T(0));
    p.bo.assign(dim, T(0));
    return p;
  }
};

// Additive logit bias for one head: for query (qy, qx) with vector q and key
// (ky, kx), bias = <q, row[qy - ky + S - 1]> + <q, col[qx - kx + S - 1]>.
// Fills bias[n_q x n_k] for a (q_h x q_w) query grid against a (k_h x k_w)
// key grid. Exposed mostly for tests; the forward pass uses the same tables
// through a precomputed per-query form.
template <typename T>
void relpos_bias(const T* q, int q_h, int q_w, int k_h, int k_w,
                 const RelPosTables<T>& tables, T* bias_out) {
  const int need = std::max(std::max(q_h, q_w), std::max(k_h, k_w));
  if (tables.side < need || tables.head_dim < 1) {
    throw std::invalid_argument("relpos_bias: tables too small for attended size");
  }
  const int S = tables.side;
  const int hd = tables.head_dim;
  const int nq = q_h * q_w;
  const int nk = k_h * k_w;
  for (int qi = 0; qi < nq; ++qi) {
    const int qy = qi / q_w, qx = qi % q_w;
    const T* qv = q + static_cast<std::size_t>(qi) * hd;
    for (int ki = 0; ki < nk; ++ki) {
      const int ky = ki / k_w, kx = ki % k_w;
      const T* rv = tables.row.data() + static_cast<std::size_t>(qy - ky + S - 1) * hd;
      const T* cv = tables.col.data() + static_cast<std::size_t>(qx - kx + S - 1) * hd;
      T acc = T(0);
      for (int c = 0; c < hd; ++c) acc += qv[c] * rv[c] + qv[c] * cv[c];
      bias_out[static_cast<std::size_t>(qi) * nk + ki] = acc;
    }
  }
}

// Intermediates of one attended group (a window or the whole grid), kept for
// the training tape's backward pass.
template <typename T>
struct MhsaGroupSaved {
  int side_y = 0, side_x = 0;
  std::vector<T> x;       // n x dim group input
  std::vector<T> q, k, v; // n x dim
  std::vector<T> probs;   // heads x n x n softmax rows
  std::vector<T> concat;  // n x dim pre-output-projection
};

template <typename T>
struct MhsaSaved {
  bool windowed = false;
  WindowLayout layout;
  std::vector<MhsaGroupSaved<T>> groups;
};

namespace detail {

template <typename T>
void softmax_rows_inplace(T* m, int rows, int cols) {
  using ArrMap = Eigen::Map<Eigen::Array<T, 1, Eigen::Dynamic>>;
  for (int r = 0; r < rows; ++r) {
    ArrMap row(m + static_cast<std::size_t>(r) * cols, cols);
    row = (row - row.maxCoeff()).exp();
    row *= T(1) / row.sum();
  }
}

// Attention over one group of n = side_y * side_x tokens.
//
// Without relpos the score matrix is processed in query blocks and never
// materialized in full. With relpos the full matrix is built so the
// decomposed bias can be added before the softmax; this is the slow path the
// latency harness measures.
template <typename T>
void attend_group(const BasicGrid<T>& xg, const MhsaParams<T>& p,
                  const AttentionLayerConfig& cfg, BasicGrid<T>& out,
                  MhsaGroupSaved<T>* save) {
  const int n = xg.tokens();
  const int dim = cfg.dim;
  const int heads = cfg.heads;
  const int hd = cfg.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  ConstMatMap<T> X(xg.data.data(), n, dim);
  ConstMatMap<T> Wq(p.wq.data(), dim, dim), Wk(p.wk.data(), dim, dim),
      Wv(p.wv.data(), dim, dim), Wo(p.wo.data(), dim, dim);

  RowMat<T> Q = X * Wq;
  RowMat<T> K = X * Wk;
  RowMat<T> V = X * Wv;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < dim; ++c) {
      Q(i, c) += p.bq[c];
      K(i, c) += p.bk[c];
      V(i, c) += p.bv[c];
    }

  const bool relpos = cfg.use_relpos;
  const int S = relpos ? p.relpos.side : 0;
  if (relpos) {
    if (p.relpos.head_dim != hd) {
      throw std::invalid_argument("mhsa_forward: relpos head_dim mismatch");
    }
    if (S < std::max(xg.height, xg.width)) {
      throw std::invalid_argument("mhsa_forward: relpos tables too small");
    }
  }

  RowMat<T> concat(n, dim);
  constexpr int kBlock = 64;
  RowMat<T> full;        // relpos path only: heads share one n x n buffer
  RowMat<T> rq, rc;      // per-query bias terms, n x (2S-1)

  if (save) {
    save->side_y = xg.height;
    save->side_x = xg.width;
    save->x.assign(xg.data.begin(), xg.data.end());
    save->q.assign(Q.data(), Q.data() + Q.size());
    save->k.assign(K.data(), K.data() + K.size());
    save->v.assign(V.data(), V.data() + V.size());
    save->probs.assign(static_cast<std::size_t>(heads) * n * n, T(0));
  }

  for (int h = 0; h < heads; ++h) {
    auto Qh = Q.middleCols(h * hd, hd);
    auto Kh = K.middleCols(h * hd, hd);
    auto Vh = V.middleCols(h * hd, hd);
    auto Oh = concat.middleCols(h * hd, hd);

    if (relpos) {
      // Rq(i, d) = <Q_i, row_table[d]>, likewise for columns.
      ConstMatMap<T> Rt(p.relpos.row.data(), 2 * S - 1, hd);
      ConstMatMap<T> Ct(p.relpos.col.data(), 2 * S - 1, hd);
      rq.noalias() = Qh * Rt.transpose();
      rc.noalias() = Qh * Ct.transpose();
      full.resize(n, n);
    }

    for (int r0 = 0; r0 < n; r0 += kBlock) {
      const int rows = std::min(kBlock, n - r0);
      RowMat<T> L(rows, n);
      L.noalias() = Qh.middleRows(r0, rows) * Kh.transpose() * scale;
      if (relpos) {
        for (int r = 0; r < rows; ++r) {
          const int qy = (r0 + r) / xg.width, qx = (r0 + r) % xg.width;
          T* lrow = L.data() + static_cast<std::size_t>(r) * n;
          const T* rrow = rq.data() + static_cast<std::size_t>(r0 + r) * (2 * S - 1);
          const T* crow = rc.data() + static_cast<std::size_t>(r0 + r) * (2 * S - 1);
          for (int k = 0; k < n; ++k) {
            const int ky = k / xg.width, kx = k % xg.width;
            lrow[k] += rrow[qy - ky + S - 1] + crow[qx - kx + S - 1];
          }
        }
        full.middleRows(r0, rows) = L;
      } else {
        softmax_rows_inplace(L.data(), rows, n);
        if (save) {
          for (int r = 0; r < rows; ++r)
            std::copy(L.data() + static_cast<std::size_t>(r) * n,
                      L.data() + static_cast<std::size_t>(r + 1) * n,
                      save->probs.data() + (static_cast<std::size_t>(h) * n + r0 + r) * n);
        }
        Oh.middleRows(r0, rows).noalias() = L * Vh;
      }
    }

    if (relpos) {
      softmax_rows_inplace(full.data(), n, n);
      if (save) {
        std::copy(full.data(), full.data() + static_cast<std::size_t>(n) * n,
                  save->probs.data() + static_cast<std::size_t>(h) * n * n);
      }
      for (int r0 = 0; r0 < n; r0 += kBlock) {
        const int rows = std::min(kBlock, n - r0);
        Oh.middleRows(r0, rows).noalias() = full.middleRows(r0, rows) * Vh;
      }
    }
  }

  RowMat<T> Y = concat * Wo;
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < dim; ++c) Y(i, c) += p.bo[c];

  if (save) save->concat.assign(concat.data(), concat.data() + concat.size());

  out = BasicGrid<T>(xg.height, xg.width, dim);
  std::copy(Y.data(), Y.data() + Y.size(), out.data.data());
}

}  // namespace detail

// Multi-head self-attention over a token grid. Windowed configs partition the
// grid (zero-padding bottom/right), attend within each window independently,
// and reassemble; global configs attend over all tokens.
template <typename T>
BasicGrid<T> mhsa_forward(const BasicGrid<T>& x, const MhsaParams<T>& p,
                          const AttentionLayerConfig& cfg,
                          MhsaSaved<T>* saved = nullptr) {
  cfg.validate();
  if (x.channels != cfg.dim) {
    throw std::invalid_argument("mhsa_forward: input channels do not match cfg.dim");
  }
  if (saved) {
    saved->groups.clear();
    saved->windowed = cfg.window_size.has_value();
  }

  if (!cfg.window_size) {
    BasicGrid<T> out;
    MhsaGroupSaved<T>* gs = nullptr;
    if (saved) {
      saved->groups.emplace_back();
      gs = &saved->groups.back();
    }
    detail::attend_group(x, p, cfg, out, gs);
    return out;
  }

  const WindowLayout layout = make_window_layout(x.height, x.width, *cfg.window_size);
  if (saved) saved->layout = layout;
  auto windows = window_partition(x, layout);
  std::vector<BasicGrid<T>> outs(windows.size());
  for (std::size_t i = 0; i < windows.size(); ++i) {
    MhsaGroupSaved<T>* gs = nullptr;
    if (saved) {
      saved->groups.emplace_back();
      gs = &saved->groups.back();
    }
    detail::attend_group(windows[i], p, cfg, outs[i], gs);
  }
  return window_unpartition(outs, layout);
}

// Gradients of mhsa_forward. dY has the output shape; gradients are added
// into dX and the MhsaParams-shaped accumulators.
template <typename T>
void mhsa_backward(const MhsaSaved<T>& saved, const MhsaParams<T>& p,
                   const AttentionLayerConfig& cfg, const BasicGrid<T>& dy,
                   BasicGrid<T>& dx, MhsaParams<T>& grads) {
  const int dim = cfg.dim;
  const int heads = cfg.heads;
  const int hd = cfg.head_dim();
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  ConstMatMap<T> Wq(p.wq.data(), dim, dim), Wk(p.wk.data(), dim, dim),
      Wv(p.wv.data(), dim, dim), Wo(p.wo.data(), dim, dim);
  MatMap<T> dWq(grads.wq.data(), dim, dim), dWk(grads.wk.data(), dim, dim),
      dWv(grads.wv.data(), dim, dim), dWo(grads.wo.data(), dim, dim);

  std::vector<BasicGrid<T>> dy_groups;
  if (saved.windowed) {
    dy_groups = window_partition(dy, saved.layout);
  } else {
    dy_groups.push_back(dy);
  }
  if (dy_groups.size() != saved.groups.size()) {
    throw std::invalid_argument("mhsa_backward: saved state does not match dy");
  }

  std::vector<BasicGrid<T>> dx_groups(dy_groups.size());
  const int S = p.relpos.side;

  for (std::size_t g = 0; g < saved.groups.size(); ++g) {
    const MhsaGroupSaved<T>& gs = saved.groups[g];
    const int n = gs.side_y * gs.side_x;

    ConstMatMap<T> X(gs.x.data(), n, dim);
    ConstMatMap<T> Q(gs.q.data(), n, dim);
    ConstMatMap<T> K(gs.k.data(), n, dim);
    ConstMatMap<T> V(gs.v.data(), n, dim);
    ConstMatMap<T> C(gs.concat.data(), n, dim);
    ConstMatMap<T> dY(dy_groups[g].data.data(), n, dim);

    // output projection
    dWo.noalias() += C.transpose() * dY;
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < dim; ++c) grads.bo[c] += dY(i, c);
    RowMat<T> dC = dY * Wo.transpose();

    RowMat<T> dQ = RowMat<T>::Zero(n, dim);
    RowMat<T> dK = RowMat<T>::Zero(n, dim);
    RowMat<T> dV = RowMat<T>::Zero(n, dim);

    for (int h = 0; h < heads; ++h) {
      ConstMatMap<T> P(gs.probs.data() + static_cast<std::size_t>(h) * n * n, n, n);
      auto Qh = Q.middleCols(h * hd, hd);
      auto Kh = K.middleCols(h * hd, hd);
      auto Vh = V.middleCols(h * hd, hd);
      auto dCh = dC.middleCols(h * hd, hd);

      dV.middleCols(h * hd, hd).noalias() += P.transpose() * dCh;
      RowMat<T> dP = dCh * Vh.transpose();

      // softmax backward: dL = P .* (dP - rowsum(dP .* P))
      RowMat<T> dL(n, n);
      for (int r = 0; r < n; ++r) {
        double dot = 0.0;
        for (int c = 0; c < n; ++c) dot += static_cast<double>(dP(r, c)) * P(r, c);
        for (int c = 0; c < n; ++c)
          dL(r, c) = P(r, c) * (dP(r, c) - static_cast<T>(dot));
      }

      dQ.middleCols(h * hd, hd).noalias() += dL * Kh * scale;
      dK.middleCols(h * hd, hd).noalias() += dL.transpose() * Qh * scale;

      if (cfg.use_relpos) {
        MatMap<T> dRow(grads.relpos.row.data(), 2 * S - 1, hd);
        MatMap<T> dCol(grads.relpos.col.data(), 2 * S - 1, hd);
        ConstMatMap<T> Rt(p.relpos.row.data(), 2 * S - 1, hd);
        ConstMatMap<T> Ct(p.relpos.col.data(), 2 * S - 1, hd);
        auto dQh = dQ.middleCols(h * hd, hd);
        for (int qi = 0; qi < n; ++qi) {
          const int qy = qi / gs.side_x, qx = qi % gs.side_x;
          for (int ki = 0; ki < n; ++ki) {
            const int ky = ki / gs.side_x, kx = ki % gs.side_x;
            const T d = dL(qi, ki);
            if (d == T(0)) continue;
            const int ri = qy - ky + S - 1;
            const int ci = qx - kx + S - 1;
            dRow.row(ri) += d * Qh.row(qi);
            dCol.row(ci) += d * Qh.row(qi);
            dQh.row(qi) += d * (Rt.row(ri) + Ct.row(ci));
          }
        }
      }
    }

    dWq.noalias() += X.transpose() * dQ;
    dWk.noalias() += X.transpose() * dK;
    dWv.noalias() += X.transpose() * dV;
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < dim; ++c) {
        grads.bq[c] += dQ(i, c);
        grads.bk[c] += dK(i, c);
        grads.bv[c] += dV(i, c);
      }

    RowMat<T> dXg = dQ * Wq.transpose() + dK * Wk.transpose() + dV * Wv.transpose();
    dx_groups[g] = BasicGrid<T>(gs.side_y, gs.side_x, dim);
    std::copy(dXg.data(), dXg.data() + dXg.size(), dx_groups[g].data.data());
  }

  if (saved.windowed) {
    dx = window_unpartition(dx_groups, saved.layout);
  } else {
    dx = std::move(dx_groups.front());
  }
}

// Channelwise 2x2 max pooling; odd extents are padded bottom/right with the
// lowest finite value. argmax (flat source token index per output cell and
// channel) feeds the training backward pass.
template <typename T>
BasicGrid<T> pool2x2(const BasicGrid<T>& x, std::vector<int>* argmax = nullptr) {
  if (x.empty()) throw std::invalid_argument("pool2x2: empty grid");
  const int oh = (x.height + 1) / 2;
  const int ow = (x.width + 1) / 2;
  BasicGrid<T> out(oh, ow, x.channels);
  if (argmax) argmax->assign(out.size(), 0);
  const T lowest = std::numeric_limits<T>::lowest();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      for (int c = 0; c < x.channels; ++c) {
        T best = lowest;
        int best_idx = (2 * oy) * x.width + (2 * ox);
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const int y = 2 * oy + dy, xx = 2 * ox + dx;
            if (y >= x.height || xx >= x.width) continue;
            const T v = x.at(y, xx, c);
            if (v > best) {
              best = v;
              best_idx = y * x.width + xx;
            }
          }
        }
        out.at(oy, ox, c) = best;
        if (argmax) {
          (*argmax)[(static_cast<std::size_t>(oy) * ow + ox) * x.channels + c] = best_idx;
        }
      }
    }
  }
  return out;
}

// --- latency harness --------------------------------------------------------

struct BenchStats {
  double mean_ms = 0.0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
};

struct BenchConfigResult {
  std::string config_id;
  int grid_side = 0;
  int window_size = 0;  // 0 = global
  bool relpos = false;
  BenchStats stats;
};

struct BenchResult {
  BenchConfigResult a, b;
  double ratio_mean = 0.0;    // b.mean / a.mean
  double ratio_median = 0.0;  // b.median / a.median
};

// Times mhsa_forward (float32) for one config over `iters` iterations of a
// fixed batch of random grids, discarding the first 25% of iterations as
// warm-up. Single-threaded.
BenchConfigResult bench_attention_single(const AttentionLayerConfig& cfg,
                                         const std::string& config_id,
                                         int grid_side, int iters, int batch = 8,
                                         unsigned seed = 1);

// Two-config comparison; the ratio is b's time over a's.
BenchResult bench_attention(const AttentionLayerConfig& cfg_a,
                            const AttentionLayerConfig& cfg_b, int grid_side,
                            int iters, int batch = 8, unsigned seed = 1);

}  // namespace abswin
