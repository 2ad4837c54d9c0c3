#include "abswin/attention.hpp"

#include <algorithm>
#include <chrono>
#include <random>

namespace abswin {

namespace {

MhsaParams<float> random_params(const AttentionLayerConfig& cfg, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, 0.02f);
  auto fill = [&](std::vector<float>& v, std::size_t len) {
    v.resize(len);
    for (float& x : v) x = dist(rng);
  };
  MhsaParams<float> p;
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

BenchStats summarize(std::vector<double> samples_ms) {
  std::sort(samples_ms.begin(), samples_ms.end());
  BenchStats s;
  double total = 0.0;
  for (double v : samples_ms) total += v;
  s.mean_ms = total / samples_ms.size();
  s.median_ms = samples_ms[samples_ms.size() / 2];
  const std::size_t p95 = std::min(samples_ms.size() - 1,
                                   static_cast<std::size_t>(samples_ms.size() * 0.95));
  s.p95_ms = samples_ms[p95];
  return s;
}

BenchConfigResult run_config(const AttentionLayerConfig& cfg, const std::string& id,
                             int grid_side, int iters, int batch, unsigned seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  MhsaParams<float> params = random_params(cfg, rng);
  if (cfg.use_relpos) {
    const int side = cfg.window_size ? *cfg.window_size : grid_side;
    params.relpos = RelPosTables<float>::zeros(side, cfg.head_dim());
    std::normal_distribution<float> dist(0.0f, 0.02f);
    for (float& v : params.relpos.row) v = dist(rng);
    for (float& v : params.relpos.col) v = dist(rng);
  }

  std::vector<Grid> inputs;
  inputs.reserve(static_cast<std::size_t>(batch));
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (int b = 0; b < batch; ++b) {
    Grid g(grid_side, grid_side, cfg.dim);
    for (float& v : g.data) v = dist(rng);
    inputs.push_back(std::move(g));
  }

  std::vector<double> per_forward_ms;
  per_forward_ms.reserve(static_cast<std::size_t>(iters));
  volatile float sink = 0.0f;  // keep the forwards observable
  for (int it = 0; it < iters; ++it) {
    auto t0 = std::chrono::steady_clock::now();
    for (const Grid& g : inputs) {
      Grid out = mhsa_forward(g, params, cfg);
      sink = sink + out.data[0];
    }
    auto t1 = std::chrono::steady_clock::now();
    const double ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    per_forward_ms.push_back(ms / batch);
  }
  (void)sink;

  // warm-up: throw out the first 25% of iterations
  const std::size_t discard = per_forward_ms.size() / 4;
  per_forward_ms.erase(per_forward_ms.begin(),
                       per_forward_ms.begin() + static_cast<std::ptrdiff_t>(discard));

  BenchConfigResult r;
  r.config_id = id;
  r.grid_side = grid_side;
  r.window_size = cfg.window_size.value_or(0);
  r.relpos = cfg.use_relpos;
  r.stats = summarize(std::move(per_forward_ms));
  return r;
}

}  // namespace

BenchConfigResult bench_attention_single(const AttentionLayerConfig& cfg,
                                         const std::string& config_id,
                                         int grid_side, int iters, int batch,
                                         unsigned seed) {
  if (grid_side < 1 || iters < 2 || batch < 1) {
    throw std::invalid_argument("bench_attention_single: bad harness parameters");
  }
  return run_config(cfg, config_id, grid_side, iters, batch, seed);
}

BenchResult bench_attention(const AttentionLayerConfig& cfg_a,
                            const AttentionLayerConfig& cfg_b, int grid_side,
                            int iters, int batch, unsigned seed) {
  if (grid_side < 1 || iters < 2 || batch < 1) {
    throw std::invalid_argument("bench_attention: bad harness parameters");
  }
  BenchResult res;
  res.a = run_config(cfg_a, "a", grid_side, iters, batch, seed);
  res.b = run_config(cfg_b, "b", grid_side, iters, batch, seed);
  res.ratio_mean = res.b.stats.mean_ms / res.a.stats.mean_ms;
  res.ratio_median = res.b.stats.median_ms / res.a.stats.median_ms;
  return res;
}

}  // namespace abswin
