#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "abswin/attention.hpp"
#include "abswin/grid.hpp"

namespace abswin {

// Reverse-mode tape over BasicGrid<T> values. Every operation appends one
// node holding its output value, a same-shaped gradient buffer, and a
// backward closure; Tape::backward walks the nodes once in reverse creation
// order. Instantiated with T = double for gradient checks and T = float for
// experiment runs.
template <typename T>
class Tape {
 public:
  using GridT = BasicGrid<T>;

  struct Node {
    GridT val;
    GridT grad;
    std::function<void()> back;  // empty for leaves
  };

  int size() const { return static_cast<int>(nodes_.size()); }
  const GridT& val(int id) const { return nodes_[check(id)].val; }
  const GridT& grad(int id) const { return nodes_[check(id)].grad; }

  int input(GridT v) {
    return push(std::move(v), {});
  }

  int add(int a, int b) {
    const GridT& va = val(a);
    const GridT& vb = val(b);
    if (!va.same_shape(vb)) throw std::invalid_argument("tape add: shape mismatch");
    GridT out = va;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb.data[i];
    int id = push(std::move(out), {});
    nodes_[id].back = [this, id, a, b] {
      const GridT& g = nodes_[id].grad;
      GridT& ga = nodes_[a].grad;
      GridT& gb = nodes_[b].grad;
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        ga.data[i] += g.data[i];
        gb.data[i] += g.data[i];
      }
    };
    return id;
  }

  int scale(int a, double s) {
    GridT out = val(a);
    for (T& v : out.data) v = static_cast<T>(v * s);
    int id = push(std::move(out), {});
    nodes_[id].back = [this, id, a, s] {
      const GridT& g = nodes_[id].grad;
      GridT& ga = nodes_[a].grad;
      for (std::size_t i = 0; i < g.data.size(); ++i)
        ga.data[i] += static_cast<T>(g.data[i] * s);
    };
    return id;
  }

  // Sums a list of scalar nodes into one scalar.
  int sum_scalars(const std::vector<int>& ids) {
    if (ids.empty()) throw std::invalid_argument("tape sum_scalars: empty list");
    GridT out(1, 1, 1);
    for (int a : ids) {
      if (val(a).size() != 1) throw std::invalid_argument("tape sum_scalars: non-scalar input");
      out.data[0] += val(a).data[0];
    }
    int id = push(std::move(out), {});
    std::vector<int> captured = ids;
    nodes_[id].back = [this, id, captured] {
      const T g = nodes_[id].grad.data[0];
      for (int a : captured) nodes_[a].grad.data[0] += g;
    };
    return id;
  }

  // Tokens-by-channels matmul with bias: x is (h, w, cin), w_mat is a
  // (cin, cout, 1) matrix parameter, bias (1, cout, 1) or -1 for none.
  int matmul_tokens(int x, int w_mat, int bias = -1) {
    const GridT& vx = val(x);
    const GridT& vw = val(w_mat);
    if (vw.channels != 1 || vx.channels != vw.height) {
      throw std::invalid_argument("tape matmul_tokens: weight shape mismatch");
    }
    const int n = vx.tokens();
    const int cin = vx.channels;
    const int cout = vw.width;
    if (bias >= 0) {
      const GridT& vb = val(bias);
      if (static_cast<int>(vb.size()) != cout) {
        throw std::invalid_argument("tape matmul_tokens: bias shape mismatch");
      }
    }
    GridT out(vx.height, vx.width, cout);
    {
      ConstMatMap<T> X(vx.data.data(), n, cin);
      ConstMatMap<T> W(vw.data.data(), cin, cout);
      MatMap<T> Y(out.data.data(), n, cout);
      Y.noalias() = X * W;
      if (bias >= 0) {
        const GridT& vb = val(bias);
        for (int i = 0; i < n; ++i)
          for (int c = 0; c < cout; ++c) Y(i, c) += vb.data[c];
      }
    }
    int id = push(std::move(out), {});
    nodes_[id].back = [this, id, x, w_mat, bias, n, cin, cout] {
      ConstMatMap<T> G(nodes_[id].grad.data.data(), n, cout);
      ConstMatMap<T> X(nodes_[x].val.data.data(), n, cin);
      ConstMatMap<T> W(nodes_[w_mat].val.data.data(), cin, cout);
      MatMap<T> dX(nodes_[x].grad.data.data(), n, cin);
      MatMap<T> dW(nodes_[w_mat].grad.data.data(), cin, cout);
      dX.noalias() += G * W.transpose();
      dW.noalias() += X.transpose() * G;
      if (bias >= 0) {
        GridT& db = nodes_[bias].grad;
        for (int i = 0; i < n; ++i)
          for (int c = 0; c < cout; ++c) db.data[c] += G(i, c);
      }
    };
    return id;
  }

  // Per-token layer normalization over channels with learned gain/shift.
  int layernorm(int x, int gamma, int beta, double eps = 1e-6) {
    const GridT& vx = val(x);
    const int n = vx.tokens();
    const int c = vx.channels;
    if (static_cast<int>(val(gamma).size()) != c || static_cast<int>(val(beta).size()) != c) {
      throw std::invalid_argument("tape layernorm: gamma/beta shape mismatch");
    }
    auto xhat = std::make_shared<std::vector<T>>(vx.data.size());
    auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
    GridT out(vx.height, vx.width, c);
    const GridT& vg = val(gamma);
    const GridT& vb = val(beta);
    for (int i = 0; i < n; ++i) {
      const T* xi = vx.data.data() + static_cast<std::size_t>(i) * c;
      double mu = 0.0;
      for (int k = 0; k < c; ++k) mu += xi[k];
      mu /= c;
      double var = 0.0;
      for (int k = 0; k < c; ++k) var += (xi[k] - mu) * (xi[k] - mu);
      var /= c;
      const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
      (*inv_std)[i] = is;
      for (int k = 0; k < c; ++k) {
        const T xh = static_cast<T>((xi[k] - mu) * is);
        (*xhat)[static_cast<std::size_t>(i) * c + k] = xh;
        out.data[static_cast<std::size_t>(i) * c + k] = vg.data[k] * xh + vb.data[k];
      }
    }
    int id = push(std::move(out), {});
    nodes_[id].back = [this, id, x, gamma, beta, n, c, xhat, inv_std] {
      const GridT& g = nodes_[id].grad;
      const GridT& vg = nodes_[gamma].val;
      GridT& dx = nodes_[x].grad;
      GridT& dgamma = nodes_[gamma].grad;
      GridT& dbeta = nodes_[beta].grad;
      for (int i = 0; i < n; ++i) {
        const std::size_t off = static_cast<std::size_t>(i) * c;
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int k = 0; k < c; ++k) {
          const T gi = g.data[off + k];
          const T xh = (*xhat)[off + k];
          dgamma.data[k] += gi * xh;
          dbeta.data[k] += gi;
          const double dxh = static_cast<double>(gi) * vg.data[k];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh;
        }
        const double is = (*inv_std)[i];
        for (int k = 0; k < c; ++k) {
          const double dxh = static_cast<double>(g.data[off + k]) * vg.data[k];
          dx.data[off + k] += static_cast<T>(
              is * (dxh - sum_dxh / c - (*xhat)[off + k] * sum_dxh_xh / c));
        }
      }
    };
    return id;
  }

  int gelu(int x) {
    const GridT& vx = val(x);
    GridT out = vx;
    for (T& v : out.data) {
      const double z = v;
      v = static_cast<T>(z * 0.5 * (1.0 + std::erf(z / std::sqrt(2.0))));
    }
    int id = push(std::move(out), {});
    nodes_[id].back = [this, id, x] {
      const GridT& g = nodes_[id].grad;
      const GridT& vx = nodes_[x].val;
      GridT& dx = nodes_[x].grad;
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        const double z = vx.data[i];
        const double cdf = 0.5 * (1.0 + std::erf(z / std::sqrt(2.0)));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * z * z);
        dx.data[i] += static_cast<T>(g.data[i] * (cdf + z * pdf));
      }
    };
    return id;
  }

  // Multi-head self-attention as one composite node. Parameter ids follow
  // MhsaParams: projection matrices are (dim, dim, 1), biases (1, dim, 1),
  // relpos tables (2S-1, head_dim, 1) each (or -1 when unused).
  struct AttnParamIds {
    int wq = -1, wk = -1, wv = -1, wo = -1;
    int bq = -1, bk = -1, bv = -1, bo = -1;
    int relpos_row = -1, relpos_col = -1;
    int relpos_side = 0;
  };

  int attention(int x, const AttnParamIds& ids, const AttentionLayerConfig& cfg) {
    MhsaParams<T> p;
    auto vec = [this](int id) {
      const GridT& v = val(id);
      return std::vector<T>(v.data.begin(), v.data.end());
    };
    p.wq = vec(ids.wq);
    p.wk = vec(ids.wk);
    p.wv = vec(ids.wv);
    p.wo = vec(ids.wo);
    p.bq = vec(ids.bq);
    p.bk = vec(ids.bk);
    p.bv = vec(ids.bv);
    p.bo = vec(ids.bo);
    if (cfg.use_relpos) {
      p.relpos.side = ids.relpos_side;
      p.relpos.head_dim = cfg.head_dim();
      p.relpos.row = vec(ids.relpos_row);
      p.relpos.col = vec(ids.relpos_col);
    }
    auto saved = std::make_shared<MhsaSaved<T>>();
    auto params = std::make_shared<MhsaParams<T>>(std::move(p));
    GridT out = mhsa_forward(val(x), *params, cfg, saved.get());
    int id = push(std::move(out), {});
    AttnParamIds captured = ids;
    nodes_[id].back = [this, id, x, captured, cfg, saved, params] {
      MhsaParams<T> grads;
      const int dim = cfg.dim;
      grads.wq.assign(static_cast<std::size_t>(dim) * dim, T(0));
      grads.wk.assign(static_cast<std::size_t>(dim) * dim, T(0));
      grads.wv.assign(static_cast<std::size_t>(dim) * dim, T(0));
      grads.wo.assign(static_cast<std::size_t>(dim) * dim, T(0));
      grads.bq.assign(dim, T(0));
      grads.bk.assign(dim, T(0));
      grads.bv.assign(dim, T(0));
      grads.bo.assign(dim, T(0));
      if (cfg.use_relpos) {
        grads.relpos = RelPosTables<T>::zeros(params->relpos.side, cfg.head_dim());
      }
      GridT dx;
      mhsa_backward(*saved, *params, cfg, nodes_[id].grad, dx, grads);
      GridT& gx = nodes_[x].grad;
      for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += dx.data[i];
      auto acc = [this](int pid, const std::vector<T>& g) {
        GridT& dst = nodes_[pid].grad;
        for (std::size_t i = 0; i < g.size(); ++i) dst.data[i] += g[i];
      };
      acc(captured.wq, grads.wq);
      acc(captured.wk, grads.wk);
      acc(captured.wv, grads.wv);
      acc(captured.wo, grads.wo);
      acc(captured.bq, grads.bq);
      acc(captured.bk, grads.bk);
      acc(captured.bv, grads.bv);
      acc(captured.bo, grads.bo);
      if (cfg.use_relpos) {
        acc(captured.relpos_row, grads.relpos.row);
        acc(captured.relpos_col, grads.relpos.col);
      }
    };
    return id;
  }

  int pool2x2_max(int x) {
    auto argmax = std::make_shared<std::vector<int>>();
    GridT out = pool2x2(val(x), argmax.get());
    const int c = out.channels;
    const int cells = out.tokens();
    int id = push(std::move(out), {});
    nodes_[id].back = [this, id, x, argmax, c, cells] {
      const GridT& g = nodes_[id].grad;
      GridT& dx = nodes_[x].grad;
      for (int i = 0; i < cells; ++i)
        for (int k = 0; k < c; ++k) {
          const int src = (*argmax)[static_cast<std::size_t>(i) * c + k];
          dx.data[static_cast<std::size_t>(src) * c + k] += g.data[static_cast<std::size_t>(i) * c + k];
        }
    };
    return id;
  }

  int mean_tokens(int x) {
    const GridT& vx = val(x);
    const int n = vx.tokens();
    const int c = vx.channels;
    GridT out(1, 1, c);
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < c; ++k) out.data[k] += vx.data[static_cast<std::size_t>(i) * c + k];
    for (int k = 0; k < c; ++k) out.data[k] = static_cast<T>(out.data[k] / n);
    int id = push(std::move(out), {});
    nodes_[id].back = [this, id, x, n, c] {
      const GridT& g = nodes_[id].grad;
      GridT& dx = nodes_[x].grad;
      for (int i = 0; i < n; ++i)
        for (int k = 0; k < c; ++k)
          dx.data[static_cast<std::size_t>(i) * c + k] += static_cast<T>(g.data[k] / static_cast<double>(n));
    };
    return id;
  }

  // Tile the source periodically and crop to (out_h, out_w); the backward
  // pass folds gradients back onto the source modulo its extent.
  int tile_crop(int x, int out_h, int out_w) {
    const GridT& vx = val(x);
    const int sh = vx.height, sw = vx.width, c = vx.channels;
    GridT out(out_h, out_w, c);
    for (int y = 0; y < out_h; ++y)
      for (int xx = 0; xx < out_w; ++xx) {
        const T* s = vx.token_ptr(y % sh, xx % sw);
        std::copy(s, s + c, out.token_ptr(y, xx));
      }
    int id = push(std::move(out), {});
    nodes_[id].back = [this, id, x, out_h, out_w, sh, sw, c] {
      const GridT& g = nodes_[id].grad;
      GridT& dx = nodes_[x].grad;
      for (int y = 0; y < out_h; ++y)
        for (int xx = 0; xx < out_w; ++xx) {
          const T* gp = g.token_ptr(y, xx);
          T* dp = dx.token_ptr(y % sh, xx % sw);
          for (int k = 0; k < c; ++k) dp[k] += gp[k];
        }
    };
    return id;
  }

  // Bicubic resize as a linear operator; backward applies the transpose
  // (scatter each output gradient through its 4x4 tap weights).
  int bicubic(int x, int out_h, int out_w) {
    const GridT& vx = val(x);
    GridT out = bicubic_resize(vx, out_h, out_w);
    auto tx = std::make_shared<std::vector<CubicTap>>(cubic_taps(vx.width, out_w));
    auto ty = std::make_shared<std::vector<CubicTap>>(cubic_taps(vx.height, out_h));
    const int c = vx.channels;
    int id = push(std::move(out), {});
    nodes_[id].back = [this, id, x, tx, ty, out_h, out_w, c] {
      const GridT& g = nodes_[id].grad;
      GridT& dx = nodes_[x].grad;
      for (int oy = 0; oy < out_h; ++oy) {
        const CubicTap& wy = (*ty)[oy];
        for (int ox = 0; ox < out_w; ++ox) {
          const CubicTap& wx = (*tx)[ox];
          const T* gp = g.token_ptr(oy, ox);
          for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b) {
              const double w = wy.w[a] * wx.w[b];
              T* dp = dx.token_ptr(wy.idx[a], wx.idx[b]);
              for (int k = 0; k < c; ++k) dp[k] += static_cast<T>(w * gp[k]);
            }
        }
      }
    };
    return id;
  }

  // Keep whole unit x unit windows (mask units), laid out side by side:
  // output is (unit, keep.size() * unit, C) in keep order.
  int gather_units(int x, const std::vector<int>& keep, int unit) {
    const GridT& vx = val(x);
    if (vx.height % unit != 0 || vx.width % unit != 0) {
      throw std::invalid_argument("tape gather_units: grid not a unit multiple");
    }
    if (keep.empty()) throw std::invalid_argument("tape gather_units: empty keep set");
    const int units_x = vx.width / unit;
    const int c = vx.channels;
    GridT out(unit, static_cast<int>(keep.size()) * unit, c);
    for (std::size_t j = 0; j < keep.size(); ++j) {
      const int uy = keep[j] / units_x, ux = keep[j] % units_x;
      for (int y = 0; y < unit; ++y)
        for (int xx = 0; xx < unit; ++xx) {
          const T* s = vx.token_ptr(uy * unit + y, ux * unit + xx);
          std::copy(s, s + c, out.token_ptr(y, static_cast<int>(j) * unit + xx));
        }
    }
    int id = push(std::move(out), {});
    std::vector<int> kept = keep;
    nodes_[id].back = [this, id, x, kept, unit, units_x, c] {
      const GridT& g = nodes_[id].grad;
      GridT& dx = nodes_[x].grad;
      for (std::size_t j = 0; j < kept.size(); ++j) {
        const int uy = kept[j] / units_x, ux = kept[j] % units_x;
        for (int y = 0; y < unit; ++y)
          for (int xx = 0; xx < unit; ++xx) {
            const T* gp = g.token_ptr(y, static_cast<int>(j) * unit + xx);
            T* dp = dx.token_ptr(uy * unit + y, ux * unit + xx);
            for (int k = 0; k < c; ++k) dp[k] += gp[k];
          }
      }
    };
    return id;
  }

  // Inverse of gather_units over a (units_y x units_x) unit grid; units not
  // in the keep set are filled with a broadcast learned token (1, 1, C).
  int scatter_units(int x, const std::vector<int>& keep, int unit, int units_y,
                    int units_x, int mask_token) {
    const GridT& vx = val(x);
    const int c = vx.channels;
    const GridT& vm = val(mask_token);
    if (static_cast<int>(vm.size()) != c) {
      throw std::invalid_argument("tape scatter_units: mask token shape mismatch");
    }
    GridT out(units_y * unit, units_x * unit, c);
    std::vector<int> owner(static_cast<std::size_t>(units_y) * units_x, -1);
    for (std::size_t j = 0; j < keep.size(); ++j) owner[keep[j]] = static_cast<int>(j);
    for (int uy = 0; uy < units_y; ++uy)
      for (int ux = 0; ux < units_x; ++ux) {
        const int j = owner[static_cast<std::size_t>(uy) * units_x + ux];
        for (int y = 0; y < unit; ++y)
          for (int xx = 0; xx < unit; ++xx) {
            T* d = out.token_ptr(uy * unit + y, ux * unit + xx);
            if (j >= 0) {
              const T* s = vx.token_ptr(y, j * unit + xx);
              std::copy(s, s + c, d);
            } else {
              std::copy(vm.data.data(), vm.data.data() + c, d);
            }
          }
      }
    int id = push(std::move(out), {});
    nodes_[id].back = [this, id, x, owner, unit, units_y, units_x, mask_token, c] {
      const GridT& g = nodes_[id].grad;
      GridT& dx = nodes_[x].grad;
      GridT& dm = nodes_[mask_token].grad;
      for (int uy = 0; uy < units_y; ++uy)
        for (int ux = 0; ux < units_x; ++ux) {
          const int j = owner[static_cast<std::size_t>(uy) * units_x + ux];
          for (int y = 0; y < unit; ++y)
            for (int xx = 0; xx < unit; ++xx) {
              const T* gp = g.token_ptr(uy * unit + y, ux * unit + xx);
              if (j >= 0) {
                T* dp = dx.token_ptr(y, j * unit + xx);
                for (int k = 0; k < c; ++k) dp[k] += gp[k];
              } else {
                for (int k = 0; k < c; ++k) dm.data[k] += gp[k];
              }
            }
        }
    };
    return id;
  }

  // Rearranges (h*p, w*p, c) into (h, w, p*p*c); the patchify stem and the
  // reconstruction-target layout both use it. Pure permutation.
  int space_to_depth(int x, int p) {
    const GridT& vx = val(x);
    if (p < 1 || vx.height % p != 0 || vx.width % p != 0) {
      throw std::invalid_argument("tape space_to_depth: extent not a multiple of p");
    }
    const int oh = vx.height / p, ow = vx.width / p, c = vx.channels;
    GridT out(oh, ow, p * p * c);
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        T* d = out.token_ptr(y, xx);
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx) {
            const T* s = vx.token_ptr(y * p + dy, xx * p + dx);
            std::copy(s, s + c, d + (dy * p + dx) * c);
          }
      }
    int id = push(std::move(out), {});
    nodes_[id].back = [this, id, x, p, oh, ow, c] {
      const GridT& g = nodes_[id].grad;
      GridT& dx = nodes_[x].grad;
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const T* gp = g.token_ptr(y, xx);
          for (int dy = 0; dy < p; ++dy)
            for (int dxx = 0; dxx < p; ++dxx) {
              T* dp = dx.token_ptr(y * p + dy, xx * p + dxx);
              for (int k = 0; k < c; ++k) dp[k] += gp[(dy * p + dxx) * c + k];
            }
        }
    };
    return id;
  }

  // Scalar sum of all entries.
  int sum_all(int x) {
    const GridT& vx = val(x);
    GridT out(1, 1, 1);
    double acc = 0.0;
    for (T v : vx.data) acc += v;
    out.data[0] = static_cast<T>(acc);
    int id = push(std::move(out), {});
    nodes_[id].back = [this, id, x] {
      const T g = nodes_[id].grad.data[0];
      GridT& dx = nodes_[x].grad;
      for (T& v : dx.data) v += g;
    };
    return id;
  }

  // Scalar <x, r> against a detached coefficient grid.
  int dot_const(int x, GridT r) {
    const GridT& vx = val(x);
    if (!vx.same_shape(r)) throw std::invalid_argument("tape dot_const: shape mismatch");
    GridT out(1, 1, 1);
    double acc = 0.0;
    for (std::size_t i = 0; i < vx.data.size(); ++i) acc += static_cast<double>(vx.data[i]) * r.data[i];
    out.data[0] = static_cast<T>(acc);
    int id = push(std::move(out), {});
    auto coeff = std::make_shared<GridT>(std::move(r));
    nodes_[id].back = [this, id, x, coeff] {
      const T g = nodes_[id].grad.data[0];
      GridT& dx = nodes_[x].grad;
      for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += g * coeff->data[i];
    };
    return id;
  }

  // Softmax cross-entropy of (1, 1, K) logits against an integer label.
  int softmax_xent(int logits, int label) {
    const GridT& vl = val(logits);
    const int k = static_cast<int>(vl.size());
    if (vl.tokens() != 1 || label < 0 || label >= k) {
      throw std::invalid_argument("tape softmax_xent: bad logits shape or label");
    }
    auto probs = std::make_shared<std::vector<T>>(vl.data.begin(), vl.data.end());
    detail::softmax_rows_inplace(probs->data(), 1, k);
    GridT out(1, 1, 1);
    out.data[0] = static_cast<T>(-std::log(std::max(static_cast<double>((*probs)[label]), 1e-300)));
    int id = push(std::move(out), {});
    nodes_[id].back = [this, id, logits, label, probs, k] {
      const T g = nodes_[id].grad.data[0];
      GridT& dl = nodes_[logits].grad;
      for (int i = 0; i < k; ++i) {
        dl.data[i] += g * ((*probs)[i] - (i == label ? T(1) : T(0)));
      }
    };
    return id;
  }

  // Mean squared error against a detached target, restricted to tokens whose
  // selector is true. Empty selection yields loss 0.
  int mse_selected(int pred, GridT target, std::vector<std::uint8_t> select) {
    const GridT& vp = val(pred);
    if (!vp.same_shape(target)) throw std::invalid_argument("tape mse_selected: target shape mismatch");
    if (static_cast<int>(select.size()) != vp.tokens()) {
      throw std::invalid_argument("tape mse_selected: selector size mismatch");
    }
    const int c = vp.channels;
    long long count = 0;
    for (std::uint8_t s : select)
      if (s) ++count;
    double acc = 0.0;
    for (int i = 0; i < vp.tokens(); ++i) {
      if (!select[i]) continue;
      for (int k = 0; k < c; ++k) {
        const double d = static_cast<double>(vp.data[static_cast<std::size_t>(i) * c + k]) -
                         target.data[static_cast<std::size_t>(i) * c + k];
        acc += d * d;
      }
    }
    const double denom = count > 0 ? static_cast<double>(count) * c : 1.0;
    GridT out(1, 1, 1);
    out.data[0] = static_cast<T>(acc / denom);
    int id = push(std::move(out), {});
    auto tgt = std::make_shared<GridT>(std::move(target));
    auto sel = std::make_shared<std::vector<std::uint8_t>>(std::move(select));
    nodes_[id].back = [this, id, pred, tgt, sel, c, denom] {
      const T g = nodes_[id].grad.data[0];
      const GridT& vp = nodes_[pred].val;
      GridT& dp = nodes_[pred].grad;
      for (int i = 0; i < vp.tokens(); ++i) {
        if (!(*sel)[i]) continue;
        for (int k = 0; k < c; ++k) {
          const std::size_t idx = static_cast<std::size_t>(i) * c + k;
          dp.data[idx] += static_cast<T>(g * 2.0 * (vp.data[idx] - tgt->data[idx]) / denom);
        }
        }
    };
    return id;
  }

  // Seeds d(loss)/d(loss) = 1 and walks the tape once in reverse.
  void backward(int loss) {
    if (nodes_.empty()) throw std::runtime_error("tape backward: no forward recorded");
    if (loss < 0 || loss >= size() || val(loss).size() != 1) {
      throw std::runtime_error("tape backward: loss must be a recorded scalar");
    }
    nodes_[loss].grad.data[0] = T(1);
    for (int i = loss; i >= 0; --i) {
      if (nodes_[i].back) nodes_[i].back();
    }
  }

 private:
  int check(int id) const {
    if (id < 0 || id >= size()) throw std::invalid_argument("tape: bad node id");
    return id;
  }

  int push(GridT val, std::function<void()> back) {
    Node n;
    n.grad = GridT(val.height, val.width, val.channels);
    n.val = std::move(val);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return size() - 1;
  }

  std::vector<Node> nodes_;
};

}  // namespace abswin
