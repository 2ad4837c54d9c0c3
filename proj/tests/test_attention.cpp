#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "abswin/attention.hpp"
#include "oracles.hpp"

using namespace abswin;

namespace {

template <typename T>
MhsaParams<T> gaussian_params(const AttentionLayerConfig& cfg, std::mt19937_64& rng,
                              double stddev = 0.2) {
  std::normal_distribution<double> dist(0.0, stddev);
  auto fill = [&](std::vector<T>& v, std::size_t len) {
    v.resize(len);
    for (T& x : v) x = static_cast<T>(dist(rng));
  };
  MhsaParams<T> p;
  const std::size_t d2 = static_cast<std::size_t>(cfg.dim) * cfg.dim;
  fill(p.wq, d2);
  fill(p.wk, d2);
  fill(p.wv, d2);
  fill(p.wo, d2);
  fill(p.bq, cfg.dim);
  fill(p.bk, cfg.dim);
  fill(p.bv, cfg.dim);
  fill(p.bo, cfg.dim);
  return p;
}

template <typename T>
BasicGrid<T> gaussian_grid_t(std::mt19937_64& rng, int h, int w, int c, double stddev = 1.0) {
  std::normal_distribution<double> dist(0.0, stddev);
  BasicGrid<T> g(h, w, c);
  for (T& v : g.data) v = static_cast<T>(dist(rng));
  return g;
}

}  // namespace

TEST_CASE("single token with identity projections passes the value through") {
  AttentionLayerConfig cfg{.dim = 4, .heads = 2};
  auto p = MhsaParams<float>::identity(4);
  Grid x(1, 1, 4);
  x.data = {0.5f, -1.0f, 2.0f, 0.25f};
  Grid y = mhsa_forward(x, p, cfg);
  CHECK(oracles::bitwise_equal(y, x));
}

TEST_CASE("full-grid window equals global attention bitwise") {
  std::mt19937_64 rng(61);
  AttentionLayerConfig global{.dim = 8, .heads = 2};
  AttentionLayerConfig windowed{.dim = 8, .heads = 2, .window_size = 6};
  auto p = gaussian_params<float>(global, rng);
  Grid x = gaussian_grid_t<float>(rng, 6, 6, 8);
  CHECK(oracles::bitwise_equal(mhsa_forward(x, p, global), mhsa_forward(x, p, windowed)));
}

TEST_CASE("two-token attention matches the hand-worked closed form") {
  // 1x2 grid, dim 2, one head. Weights chosen so the softmax logits are easy
  // to carry by hand; the expected output below is recomputed in scalar
  // double arithmetic.
  AttentionLayerConfig cfg{.dim = 2, .heads = 1};
  MhsaParams<double> p;
  p.wq = {1.0, 0.0, 0.0, 1.0};
  p.wk = {0.0, 1.0, 1.0, 0.0};   // K = x swapped
  p.wv = {2.0, 0.0, 0.0, -1.0};  // V = (2x0, -x1)
  p.wo = {1.0, 0.0, 0.0, 1.0};
  p.bq = {0.1, 0.0};
  p.bk = {0.0, 0.0};
  p.bv = {0.0, 0.5};
  p.bo = {0.0, 0.0};

  BasicGrid<double> x(1, 2, 2);
  x.data = {1.0, 0.0, 0.0, 1.0};  // tokens (1,0) and (0,1)

  // scalar recomputation
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  double q[2][2] = {{1.1, 0.0}, {0.1, 1.0}};
  double k[2][2] = {{0.0, 1.0}, {1.0, 0.0}};
  double v[2][2] = {{2.0, 0.5}, {0.0, -0.5}};
  double expect[2][2];
  for (int t = 0; t < 2; ++t) {
    double l0 = (q[t][0] * k[0][0] + q[t][1] * k[0][1]) * inv_sqrt2;
    double l1 = (q[t][0] * k[1][0] + q[t][1] * k[1][1]) * inv_sqrt2;
    double m = std::max(l0, l1);
    double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
    double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
    expect[t][0] = p0 * v[0][0] + p1 * v[1][0];
    expect[t][1] = p0 * v[0][1] + p1 * v[1][1];
  }

  BasicGrid<double> y = mhsa_forward(x, p, cfg);
  for (int t = 0; t < 2; ++t)
    for (int c = 0; c < 2; ++c) CHECK(y.at(0, t, c) == doctest::Approx(expect[t][c]).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(67);
  AttentionLayerConfig cfg{.dim = 8, .heads = 4, .window_size = 3};
  auto p = gaussian_params<float>(cfg, rng);
  Grid x = gaussian_grid_t<float>(rng, 7, 5, 8);  // forces padding
  MhsaSaved<float> saved;
  mhsa_forward(x, p, cfg, &saved);
  for (const auto& g : saved.groups) {
    const int n = g.side_y * g.side_x;
    for (int h = 0; h < cfg.heads; ++h)
      for (int r = 0; r < n; ++r) {
        double sum = 0.0;
        for (int c = 0; c < n; ++c)
          sum += g.probs[(static_cast<std::size_t>(h) * n + r) * n + c];
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
      }
  }
}

TEST_CASE("window attention output depends only on the token's own window") {
  std::mt19937_64 rng(71);
  AttentionLayerConfig cfg{.dim = 8, .heads = 2, .window_size = 2};
  auto p = gaussian_params<float>(cfg, rng);
  Grid x = gaussian_grid_t<float>(rng, 4, 4, 8);
  Grid base = mhsa_forward(x, p, cfg);

  // perturb a token in the bottom-right window; top-left window must not move
  Grid x2 = x;
  for (int c = 0; c < 8; ++c) x2.at(3, 3, c) += 5.0f;
  Grid changed = mhsa_forward(x2, p, cfg);
  for (int y = 0; y < 2; ++y)
    for (int xx = 0; xx < 2; ++xx)
      for (int c = 0; c < 8; ++c) CHECK(changed.at(y, xx, c) == base.at(y, xx, c));
  // and the perturbed window does move
  CHECK(changed.at(3, 3, 0) != base.at(3, 3, 0));
}

TEST_CASE("global attention is permutation-equivariant") {
  std::mt19937_64 rng(73);
  AttentionLayerConfig cfg{.dim = 6, .heads = 3};
  auto p = gaussian_params<float>(cfg, rng);
  Grid x = gaussian_grid_t<float>(rng, 3, 3, 6);
  Grid y = mhsa_forward(x, p, cfg);

  // swap two tokens
  Grid xp = x;
  for (int c = 0; c < 6; ++c) std::swap(xp.at(0, 1, c), xp.at(2, 2, c));
  Grid yp = mhsa_forward(xp, p, cfg);
  for (int c = 0; c < 6; ++c) {
    CHECK(yp.at(0, 1, c) == doctest::Approx(y.at(2, 2, c)).epsilon(1e-5));
    CHECK(yp.at(2, 2, c) == doctest::Approx(y.at(0, 1, c)).epsilon(1e-5));
    CHECK(yp.at(1, 1, c) == doctest::Approx(y.at(1, 1, c)).epsilon(1e-5));
  }
}

TEST_CASE("zero relpos tables reproduce the no-relpos forward") {
  std::mt19937_64 rng(79);
  AttentionLayerConfig plain{.dim = 8, .heads = 2};
  AttentionLayerConfig with{.dim = 8, .heads = 2, .use_relpos = true};
  auto p = gaussian_params<float>(plain, rng);
  Grid x = gaussian_grid_t<float>(rng, 5, 5, 8);
  Grid base = mhsa_forward(x, p, plain);
  p.relpos = RelPosTables<float>::zeros(5, 4);
  Grid biased = mhsa_forward(x, p, with);
  CHECK(oracles::bitwise_equal(base, biased));
}

TEST_CASE("constant relpos bias is a softmax no-op") {
  std::mt19937_64 rng(83);
  AttentionLayerConfig plain{.dim = 8, .heads = 2};
  AttentionLayerConfig with{.dim = 8, .heads = 2, .use_relpos = true};
  auto p = gaussian_params<float>(plain, rng);
  Grid x = gaussian_grid_t<float>(rng, 4, 4, 8);
  Grid base = mhsa_forward(x, p, plain);

  // every table entry is the same vector: the bias is constant per query row
  p.relpos = RelPosTables<float>::zeros(4, 4);
  for (int i = 0; i < 7; ++i)
    for (int c = 0; c < 4; ++c) {
      p.relpos.row[static_cast<std::size_t>(i) * 4 + c] = 0.3f * (c + 1);
      p.relpos.col[static_cast<std::size_t>(i) * 4 + c] = -0.2f * (c + 1);
    }
  Grid biased = mhsa_forward(x, p, with);
  CHECK(oracles::max_abs_diff(base, biased) < 1e-5);
}

TEST_CASE("relpos bias matches hand enumeration on a 2x2 grid") {
  // one-hot tables: row table entry d has 1 in channel 0, col entry d has
  // value d in channel 0. With q = (1, 0) for every token, bias(q, k) =
  // row_onehot + (qx - kx + S - 1).
  RelPosTables<float> t = RelPosTables<float>::zeros(2, 2);
  const int S = 2;
  for (int d = 0; d < 2 * S - 1; ++d) {
    t.row[static_cast<std::size_t>(d) * 2 + 0] = (d == 2) ? 1.0f : 0.0f;  // hot at dy = +1
    t.col[static_cast<std::size_t>(d) * 2 + 0] = static_cast<float>(d);
  }
  std::vector<float> q(4 * 2, 0.0f);
  for (int i = 0; i < 4; ++i) q[static_cast<std::size_t>(i) * 2] = 1.0f;

  std::vector<float> bias(16);
  relpos_bias(q.data(), 2, 2, 2, 2, t, bias.data());

  // hand enumeration: token order (0,0),(0,1),(1,0),(1,1)
  auto expected = [S](int qy, int qx, int ky, int kx) {
    float row = (qy - ky + S - 1) == 2 ? 1.0f : 0.0f;
    float col = static_cast<float>(qx - kx + S - 1);
    return row + col;
  };
  int qi = 0;
  for (int qy = 0; qy < 2; ++qy)
    for (int qx = 0; qx < 2; ++qx, ++qi) {
      int ki = 0;
      for (int ky = 0; ky < 2; ++ky)
        for (int kx = 0; kx < 2; ++kx, ++ki)
          CHECK(bias[static_cast<std::size_t>(qi) * 4 + ki] ==
                doctest::Approx(expected(qy, qx, ky, kx)));
    }

  std::vector<float> small_q(2, 1.0f);
  std::vector<float> one(1);
  relpos_bias(small_q.data(), 1, 1, 1, 1, t, one.data());
  CHECK(one[0] == doctest::Approx(expected(0, 0, 0, 0)));

  RelPosTables<float> tiny = RelPosTables<float>::zeros(1, 2);
  CHECK_THROWS_AS(relpos_bias(q.data(), 2, 2, 2, 2, tiny, bias.data()),
                  std::invalid_argument);
}

TEST_CASE("pool2x2") {
  Grid c(4, 6, 2, 1.5f);
  Grid pc = pool2x2(c);
  REQUIRE(pc.height == 2);
  REQUIRE(pc.width == 3);
  for (float v : pc.data) CHECK(v == 1.5f);

  Grid g(2, 2, 1);
  g.data = {1.0f, 2.0f, 3.0f, 4.0f};
  Grid pg = pool2x2(g);
  REQUIRE(pg.size() == 1);
  CHECK(pg.data[0] == 4.0f);

  // pooling a w-tiled grid yields a (w/2)-tiled grid
  std::mt19937_64 rng(89);
  Grid window = oracles::gaussian_grid(rng, 4, 4, 3);
  Grid tiled = tile(window, 3, 3);
  Grid pooled = pool2x2(tiled);
  Grid pooled_window = pool2x2(window);
  for (int by = 0; by < 3; ++by)
    for (int bx = 0; bx < 3; ++bx)
      CHECK(oracles::bitwise_equal(crop(pooled, by * 2, bx * 2, 2, 2), pooled_window));

  // odd dims pad bottom/right
  Grid odd(3, 3, 1, -2.0f);
  Grid podd = pool2x2(odd);
  REQUIRE(podd.height == 2);
  REQUIRE(podd.width == 2);
  CHECK(podd.at(1, 1, 0) == -2.0f);
}

TEST_CASE("attention gradients match finite differences") {
  std::mt19937_64 rng(97);
  for (bool relpos : {false, true}) {
    for (bool windowed : {false, true}) {
      AttentionLayerConfig cfg{.dim = 4, .heads = 2, .use_relpos = relpos};
      if (windowed) cfg.window_size = 2;
      auto p = gaussian_params<double>(cfg, rng, 0.3);
      const int side = windowed ? 2 : 3;
      p.relpos = RelPosTables<double>::zeros(side, 2);
      if (relpos) {
        std::normal_distribution<double> d(0.0, 0.3);
        for (double& v : p.relpos.row) v = d(rng);
        for (double& v : p.relpos.col) v = d(rng);
      }
      BasicGrid<double> x = gaussian_grid_t<double>(rng, 3, 3, 4, 0.5);
      BasicGrid<double> r = gaussian_grid_t<double>(rng, 3, 3, 4, 1.0);

      auto loss = [&](const MhsaParams<double>& params, const BasicGrid<double>& input) {
        BasicGrid<double> y = mhsa_forward(input, params, cfg);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.data.size(); ++i) acc += y.data[i] * r.data[i];
        return acc;
      };

      MhsaSaved<double> saved;
      mhsa_forward(x, p, cfg, &saved);
      MhsaParams<double> grads;
      grads.wq.assign(16, 0.0);
      grads.wk.assign(16, 0.0);
      grads.wv.assign(16, 0.0);
      grads.wo.assign(16, 0.0);
      grads.bq.assign(4, 0.0);
      grads.bk.assign(4, 0.0);
      grads.bv.assign(4, 0.0);
      grads.bo.assign(4, 0.0);
      grads.relpos = RelPosTables<double>::zeros(side, 2);
      BasicGrid<double> dx;
      mhsa_backward(saved, p, cfg, r, dx, grads);

      const double h = 1e-6;
      auto check_vec = [&](std::vector<double>& vec, const std::vector<double>& grad) {
        for (std::size_t i = 0; i < vec.size(); ++i) {
          const double keep = vec[i];
          vec[i] = keep + h;
          const double up = loss(p, x);
          vec[i] = keep - h;
          const double dn = loss(p, x);
          vec[i] = keep;
          const double fd = (up - dn) / (2 * h);
          CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-5).scale(1.0));
        }
      };
      check_vec(p.wq, grads.wq);
      check_vec(p.wk, grads.wk);
      check_vec(p.wv, grads.wv);
      check_vec(p.wo, grads.wo);
      check_vec(p.bq, grads.bq);
      check_vec(p.bv, grads.bv);
      if (relpos) {
        check_vec(p.relpos.row, grads.relpos.row);
        check_vec(p.relpos.col, grads.relpos.col);
      }
      // input gradient
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        const double keep = x.data[i];
        x.data[i] = keep + h;
        const double up = loss(p, x);
        x.data[i] = keep - h;
        const double dn = loss(p, x);
        x.data[i] = keep;
        CHECK(dx.data[i] == doctest::Approx((up - dn) / (2 * h)).epsilon(1e-5).scale(1.0));
      }
    }
  }
}

TEST_CASE("bench harness smoke: identical configs time alike") {
  AttentionLayerConfig cfg{.dim = 8, .heads = 2, .window_size = 4};
  BenchResult r = bench_attention(cfg, cfg, 16, 12, 2, 5);
  CHECK(r.ratio_mean > 0.5);
  CHECK(r.ratio_mean < 2.0);  // tiny workloads jitter; the acceptance run uses real sizes
  CHECK(r.a.stats.mean_ms > 0.0);
  CHECK(r.a.stats.p95_ms >= r.a.stats.median_ms);
}

TEST_CASE("dim/head mismatch is rejected") {
  AttentionLayerConfig bad{.dim = 7, .heads = 2};
  MhsaParams<float> p;
  Grid x(2, 2, 7);
  CHECK_THROWS_AS(mhsa_forward(x, p, bad), std::invalid_argument);

  AttentionLayerConfig ok{.dim = 4, .heads = 2};
  auto pid = MhsaParams<float>::identity(4);
  Grid wrong(2, 2, 3);
  CHECK_THROWS_AS(mhsa_forward(wrong, pid, ok), std::invalid_argument);
}
