#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <random>

#include "abswin/model.hpp"
#include "oracles.hpp"

using namespace abswin;

namespace {

ModelSpec tiny_spec() {
  ModelSpec s;
  s.input_grid = 8;
  s.in_channels = 2;
  s.stage_depths = {2};
  s.stage_dims = {16};
  s.stage_window_sizes = {4};
  s.global_layer_indices = {1};  // second block global
  s.embed_mode = EmbedMode::abswin;
  s.window_size = 4;
  s.global_size = 2;
  s.head = HeadKind::classify;
  s.num_classes = 3;
  s.heads = 2;
  return s;
}

ModelSpec grad_spec(HeadKind head) {
  ModelSpec s;
  s.input_grid = 4;
  s.in_channels = 2;
  s.stage_depths = {1, 1};
  s.stage_dims = {8, 8};
  s.stage_window_sizes = {2, 0};
  s.embed_mode = EmbedMode::abswin;
  s.window_size = 2;
  s.global_size = 2;
  s.head = head;
  s.num_classes = 3;
  s.heads = 2;
  s.decoder_dim = 8;
  s.decoder_depth = 1;
  return s;
}

GridD random_image(std::mt19937_64& rng, const ModelSpec& s, double stddev = 1.0) {
  std::normal_distribution<double> d(0.0, stddev);
  GridD g(s.input_grid * s.patch_size, s.input_grid * s.patch_size, s.in_channels);
  for (double& v : g.data) v = d(rng);
  return g;
}

// ---------------------------------------------------------------------------
// Straight-line scalar reference forward for tiny_spec(): plain loops, no
// Eigen, no tape, with the bicubic term evaluated through the direct-sample
// oracle. Independent of the production forward path.
// ---------------------------------------------------------------------------

struct RefTensor {
  int n = 0, c = 0;
  std::vector<double> v;
  double& at(int i, int k) { return v[static_cast<std::size_t>(i) * c + k]; }
  double at(int i, int k) const { return v[static_cast<std::size_t>(i) * c + k]; }
};

RefTensor ref_matmul(const RefTensor& x, const GridD& w, const GridD& b) {
  RefTensor y{x.n, w.width, std::vector<double>(static_cast<std::size_t>(x.n) * w.width)};
  for (int i = 0; i < x.n; ++i)
    for (int o = 0; o < w.width; ++o) {
      double acc = b.data[o];
      for (int k = 0; k < x.c; ++k) acc += x.at(i, k) * w.data[static_cast<std::size_t>(k) * w.width + o];
      y.at(i, o) = acc;
    }
  return y;
}

RefTensor ref_layernorm(const RefTensor& x, const GridD& g, const GridD& b) {
  RefTensor y = x;
  for (int i = 0; i < x.n; ++i) {
    double mu = 0.0;
    for (int k = 0; k < x.c; ++k) mu += x.at(i, k);
    mu /= x.c;
    double var = 0.0;
    for (int k = 0; k < x.c; ++k) var += (x.at(i, k) - mu) * (x.at(i, k) - mu);
    var /= x.c;
    const double inv = 1.0 / std::sqrt(var + 1e-6);
    for (int k = 0; k < x.c; ++k) y.at(i, k) = g.data[k] * (x.at(i, k) - mu) * inv + b.data[k];
  }
  return y;
}

// attention over an explicit token-index group
void ref_attend(RefTensor& x, const std::vector<int>& group, const Model<double>& m,
                const std::string& prefix, int heads) {
  const int dim = x.c;
  const int hd = dim / heads;
  const int n = static_cast<int>(group.size());
  auto& P = m.params;
  const GridD& wq = P.at(prefix + "attn.wq").value;
  const GridD& wk = P.at(prefix + "attn.wk").value;
  const GridD& wv = P.at(prefix + "attn.wv").value;
  const GridD& wo = P.at(prefix + "attn.wo").value;
  const GridD& bq = P.at(prefix + "attn.bq").value;
  const GridD& bk = P.at(prefix + "attn.bk").value;
  const GridD& bv = P.at(prefix + "attn.bv").value;
  const GridD& bo = P.at(prefix + "attn.bo").value;

  auto proj = [&](const GridD& w, const GridD& b, int i, int o) {
    double acc = b.data[o];
    for (int k = 0; k < dim; ++k) acc += x.at(group[i], k) * w.data[static_cast<std::size_t>(k) * dim + o];
    return acc;
  };
  std::vector<double> q(static_cast<std::size_t>(n) * dim), kk(q.size()), vv(q.size()),
      concat(q.size());
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < dim; ++o) {
      q[static_cast<std::size_t>(i) * dim + o] = proj(wq, bq, i, o);
      kk[static_cast<std::size_t>(i) * dim + o] = proj(wk, bk, i, o);
      vv[static_cast<std::size_t>(i) * dim + o] = proj(wv, bv, i, o);
    }
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < n; ++i) {
      std::vector<double> logits(static_cast<std::size_t>(n));
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int k = 0; k < hd; ++k)
          acc += q[static_cast<std::size_t>(i) * dim + h * hd + k] *
                 kk[static_cast<std::size_t>(j) * dim + h * hd + k];
        logits[j] = acc * scale;
      }
      double mx = logits[0];
      for (double l : logits) mx = std::max(mx, l);
      double z = 0.0;
      for (double& l : logits) {
        l = std::exp(l - mx);
        z += l;
      }
      for (int k = 0; k < hd; ++k) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j)
          acc += logits[j] / z * vv[static_cast<std::size_t>(j) * dim + h * hd + k];
        concat[static_cast<std::size_t>(i) * dim + h * hd + k] = acc;
      }
    }
  }
  for (int i = 0; i < n; ++i)
    for (int o = 0; o < dim; ++o) {
      double acc = bo.data[o];
      for (int k = 0; k < dim; ++k) acc += concat[static_cast<std::size_t>(i) * dim + k] *
                                           wo.data[static_cast<std::size_t>(k) * dim + o];
      x.at(group[i], o) += acc;  // residual
    }
}

std::vector<double> reference_logits(const Model<double>& m, const GridD& image) {
  const ModelSpec& s = m.spec;
  const int g = s.input_grid;
  auto& P = m.params;

  // patchify (patch 1) + two-part embedding
  RefTensor x{g * g, s.stage_dims[0], {}};
  x.v.resize(static_cast<std::size_t>(x.n) * x.c);
  {
    RefTensor img{g * g, s.in_channels,
                  std::vector<double>(image.data.begin(), image.data.end())};
    x = ref_matmul(img, P.at("patch.w").value, P.at("patch.b").value);
    const GridD& win = P.at("embed.window").value;
    const GridD& glob = P.at("embed.global").value;
    for (int y = 0; y < g; ++y)
      for (int xx = 0; xx < g; ++xx)
        for (int k = 0; k < x.c; ++k) {
          x.at(y * g + xx, k) += win.at(y % s.window_size, xx % s.window_size, k) +
                                 oracles::bicubic_sample_at(glob, g, g, y, xx, k);
        }
  }

  // block 0: window attention, block 1: global
  for (int block = 0; block < 2; ++block) {
    const std::string prefix = "enc.s0.b" + std::to_string(block) + ".";
    RefTensor normed = ref_layernorm(x, P.at(prefix + "ln1.g").value, P.at(prefix + "ln1.b").value);
    RefTensor pre = x;
    x = normed;
    if (block == 0) {
      for (int wy = 0; wy < g / s.window_size; ++wy)
        for (int wx = 0; wx < g / s.window_size; ++wx) {
          std::vector<int> group;
          for (int y = 0; y < s.window_size; ++y)
            for (int xx = 0; xx < s.window_size; ++xx)
              group.push_back((wy * s.window_size + y) * g + wx * s.window_size + xx);
          ref_attend(x, group, m, prefix, s.heads);
          for (int i : group)
            for (int k = 0; k < x.c; ++k) x.at(i, k) = pre.at(i, k) + (x.at(i, k) - normed.at(i, k));
        }
    } else {
      std::vector<int> group(static_cast<std::size_t>(g * g));
      for (int i = 0; i < g * g; ++i) group[i] = i;
      ref_attend(x, group, m, prefix, s.heads);
      for (int i = 0; i < g * g; ++i)
        for (int k = 0; k < x.c; ++k) x.at(i, k) = pre.at(i, k) + (x.at(i, k) - normed.at(i, k));
    }
    RefTensor n2 = ref_layernorm(x, P.at(prefix + "ln2.g").value, P.at(prefix + "ln2.b").value);
    RefTensor mid = ref_matmul(n2, P.at(prefix + "mlp.w1").value, P.at(prefix + "mlp.b1").value);
    for (double& v : mid.v) v = v * 0.5 * (1.0 + std::erf(v / std::sqrt(2.0)));
    RefTensor out = ref_matmul(mid, P.at(prefix + "mlp.w2").value, P.at(prefix + "mlp.b2").value);
    for (int i = 0; i < x.n; ++i)
      for (int k = 0; k < x.c; ++k) x.at(i, k) += out.at(i, k);
  }

  // mean pool, head layernorm, linear head
  RefTensor pooled{1, x.c, std::vector<double>(static_cast<std::size_t>(x.c))};
  for (int i = 0; i < x.n; ++i)
    for (int k = 0; k < x.c; ++k) pooled.at(0, k) += x.at(i, k) / x.n;
  pooled = ref_layernorm(pooled, P.at("head.ln.g").value, P.at("head.ln.b").value);
  RefTensor logits = ref_matmul(pooled, P.at("head.w").value, P.at("head.b").value);
  return logits.v;
}

}  // namespace

TEST_CASE("model building is deterministic for a fixed seed") {
  ModelSpec s = tiny_spec();
  Model<double> a = build_model<double>(s, 7);
  Model<double> b = build_model<double>(s, 7);
  REQUIRE(a.params.names() == b.params.names());
  for (const auto& name : a.params.names()) {
    const auto& pa = a.params.at(name).value;
    const auto& pb = b.params.at(name).value;
    REQUIRE(pa.data == pb.data);
  }
  Model<double> c = build_model<double>(s, 8);
  CHECK(a.params.at("patch.w").value.data != c.params.at("patch.w").value.data);
}

TEST_CASE("zeroed model emits the head bias as logits") {
  Model<double> m = build_model<double>(tiny_spec(), 3);
  for (const auto& name : m.params.names()) {
    auto& p = m.params.at(name);
    std::fill(p.value.data.begin(), p.value.data.end(), 0.0);
  }
  auto& hb = m.params.at("head.b").value;
  hb.data = {0.25, -1.5, 2.0};

  std::mt19937_64 rng(11);
  GridD image = random_image(rng, m.spec);
  Tape<double> tape;
  TapeBinding<double> bind(tape, m.params);
  int logits = classify_logits(tape, bind, m, image);
  CHECK(tape.val(logits).data[0] == 0.25);
  CHECK(tape.val(logits).data[1] == -1.5);
  CHECK(tape.val(logits).data[2] == 2.0);
}

TEST_CASE("global-only model is invariant to matched token+embedding permutation") {
  ModelSpec s = tiny_spec();
  s.stage_window_sizes = {0};
  s.global_layer_indices = {};
  s.embed_mode = EmbedMode::naive;
  Model<double> m = build_model<double>(s, 21);

  std::mt19937_64 rng(13);
  GridD image = random_image(rng, s);
  auto logits_of = [&](const GridD& img) {
    Tape<double> tape;
    TapeBinding<double> bind(tape, m.params);
    return tape.val(classify_logits(tape, bind, m, img)).data;
  };
  auto before = logits_of(image);

  // swap tokens (0,0) <-> (2,3) in both the image and the naive embedding
  GridD swapped = image;
  GridD& embed = m.params.at("embed.grid").value;
  for (int c = 0; c < s.in_channels; ++c) std::swap(swapped.at(0, 0, c), swapped.at(2, 3, c));
  for (int c = 0; c < s.stage_dims[0]; ++c) std::swap(embed.at(0, 0, c), embed.at(2, 3, c));
  auto after = logits_of(swapped);
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(after[i] == doctest::Approx(before[i]).epsilon(1e-10));
}

TEST_CASE("forward matches the straight-line scalar reference") {
  Model<double> m = build_model<double>(tiny_spec(), 1234);
  std::mt19937_64 rng(17);
  GridD image = random_image(rng, m.spec);

  Tape<double> tape;
  TapeBinding<double> bind(tape, m.params);
  int logits = classify_logits(tape, bind, m, image);
  std::vector<double> expect = reference_logits(m, image);
  REQUIRE(expect.size() == 3);
  for (int i = 0; i < 3; ++i)
    CHECK(tape.val(logits).data[i] == doctest::Approx(expect[i]).epsilon(1e-9));
}

TEST_CASE("analytic gradients match central finite differences per group") {
  for (HeadKind head : {HeadKind::classify, HeadKind::mae}) {
    Model<double> m = build_model<double>(grad_spec(head), 99);
    REQUIRE(m.params.total_parameters() <= 10000);
    // amplify the init so every parameter group carries usable signal
    for (const auto& name : m.params.names()) {
      for (double& v : m.params.at(name).value.data) v *= 5.0;
    }
    std::mt19937_64 rng(19);
    GridD image = random_image(rng, m.spec);
    const std::vector<int> keep{0, 2, 3};

    auto loss_value = [&]() {
      Tape<double> tape;
      TapeBinding<double> bind(tape, m.params);
      if (head == HeadKind::classify) {
        return tape.val(classify_loss(tape, bind, m, image, 1)).data[0];
      }
      return tape.val(mae_loss(tape, bind, m, image, keep).loss).data[0];
    };

    m.params.zero_grads();
    {
      Tape<double> tape;
      TapeBinding<double> bind(tape, m.params);
      int loss = head == HeadKind::classify
                     ? classify_loss(tape, bind, m, image, 1)
                     : mae_loss(tape, bind, m, image, keep).loss;
      tape.backward(loss);
      bind.accumulate_grads();
    }

    const double h = 1e-5;
    for (const auto& name : m.params.names()) {
      auto& p = m.params.at(name);
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double keepv = p.value.data[i];
        p.value.data[i] = keepv + h;
        const double up = loss_value();
        p.value.data[i] = keepv - h;
        const double dn = loss_value();
        p.value.data[i] = keepv;
        const double fd = (up - dn) / (2 * h);
        num += (p.grad.data[i] - fd) * (p.grad.data[i] - fd);
        den += fd * fd;
      }
      const double abs_err = std::sqrt(num);
      const double rel = abs_err / std::max(std::sqrt(den), 1e-8);
      INFO("group ", name);
      // near-zero-gradient groups are judged on absolute error
      CHECK((abs_err < 1e-9 || rel < 1e-5));
    }
  }
}

TEST_CASE("optimizer updates") {
  ModelSpec s = grad_spec(HeadKind::classify);
  Model<double> m = build_model<double>(s, 5);

  SUBCASE("sgd without momentum subtracts lr * grad") {
    auto& p = m.params.at("patch.w");
    GridD before = p.value;
    std::fill(p.grad.data.begin(), p.grad.data.end(), 2.0);
    m.params.grads_ready = true;
    OptimConfig cfg{.kind = OptKind::sgd, .lr = 0.1, .momentum = 0.0};
    optim_step(m.params, cfg);
    for (std::size_t i = 0; i < before.data.size(); ++i)
      CHECK(m.params.at("patch.w").value.data[i] == doctest::Approx(before.data[i] - 0.2).epsilon(1e-12));
  }

  SUBCASE("zero gradients with zero weight decay leave parameters unchanged") {
    GridD before = m.params.at("patch.w").value;
    m.params.grads_ready = true;  // grads are zeroed at construction
    OptimConfig cfg{.kind = OptKind::adamw, .lr = 0.5, .weight_decay = 0.0};
    optim_step(m.params, cfg);
    CHECK(m.params.at("patch.w").value.data == before.data);
  }

  SUBCASE("adamw first step moves by ~lr for a constant gradient") {
    auto& p = m.params.at("patch.w");
    GridD before = p.value;
    std::fill(p.grad.data.begin(), p.grad.data.end(), 0.37);
    m.params.grads_ready = true;
    OptimConfig cfg{.kind = OptKind::adamw, .lr = 1e-3, .weight_decay = 0.0};
    optim_step(m.params, cfg);
    // hand trace: m-hat = g, v-hat = g^2, update = lr * g / (|g| + eps)
    const double expect = 1e-3 * 0.37 / (0.37 + 1e-8);
    for (std::size_t i = 0; i < before.data.size(); ++i)
      CHECK(before.data[i] - p.value.data[i] == doctest::Approx(expect).epsilon(1e-9));
  }

  SUBCASE("stepping twice without fresh gradients is a state error") {
    m.params.grads_ready = true;
    OptimConfig cfg{.kind = OptKind::sgd, .lr = 0.1};
    optim_step(m.params, cfg);
    CHECK_THROWS_AS(optim_step(m.params, cfg), std::runtime_error);
  }

  SUBCASE("adamw skips weight decay on no-decay parameters") {
    auto& embed = m.params.at("embed.window");
    GridD before = embed.value;
    m.params.grads_ready = true;
    OptimConfig cfg{.kind = OptKind::adamw, .lr = 0.5, .weight_decay = 0.9};
    optim_step(m.params, cfg);
    CHECK(m.params.at("embed.window").value.data == before.data);  // no grad, no decay
    CHECK(m.params.at("patch.w").value.data != before.data);       // decayed
  }
}

TEST_CASE("resolution adaptation changes only the embedding") {
  std::mt19937_64 rng(23);

  SUBCASE("same-grid adaptation is a no-op") {
    Model<double> m = build_model<double>(tiny_spec(), 31);
    GridD image = random_image(rng, m.spec);
    Tape<double> t1;
    TapeBinding<double> b1(t1, m.params);
    auto before = t1.val(classify_logits(t1, b1, m, image)).data;
    adapt_resolution(m, m.spec.input_grid);
    Tape<double> t2;
    TapeBinding<double> b2(t2, m.params);
    auto after = t2.val(classify_logits(t2, b2, m, image)).data;
    CHECK(before == after);
  }

  SUBCASE("abswin adaptation keeps window blocks intact and old-size outputs bitwise") {
    Model<double> m = build_model<double>(tiny_spec(), 37);
    GridD image = random_image(rng, m.spec);
    Tape<double> t1;
    TapeBinding<double> b1(t1, m.params);
    auto before = t1.val(classify_logits(t1, b1, m, image)).data;

    adapt_resolution(m, 12);
    Grid mat = materialize_embedding(m, 12);
    Grid glob = bicubic_resize(
        [&] {
          const auto& g = m.params.at("embed.global").value;
          Grid out(g.height, g.width, g.channels);
          for (std::size_t i = 0; i < g.data.size(); ++i) out.data[i] = static_cast<float>(g.data[i]);
          return out;
        }(),
        12, 12);
    const auto& win = m.params.at("embed.window").value;
    for (int by = 0; by < 12; by += 4)
      for (int bx = 0; bx < 12; bx += 4)
        for (int y = 0; y < 4; ++y)
          for (int x = 0; x < 4; ++x)
            for (int c = 0; c < 16; ++c) {
              const double got = static_cast<double>(mat.at(by + y, bx + x, c)) - glob.at(by + y, bx + x, c);
              CHECK(std::fabs(got - win.at(y, x, c)) < 1e-6);
            }

    // the embedding parameters were untouched: old-resolution forward matches
    Model<double> back = m;
    back.spec.input_grid = 8;
    Tape<double> t2;
    TapeBinding<double> b2(t2, back.params);
    auto after = t2.val(classify_logits(t2, b2, back, image)).data;
    CHECK(before == after);
  }

  SUBCASE("naive adaptation of a tiled embedding lowers window similarity") {
    ModelSpec s = tiny_spec();
    s.embed_mode = EmbedMode::naive;
    Model<double> m = build_model<double>(s, 41);
    // overwrite with a perfectly tiled embedding
    auto& e = m.params.at("embed.grid").value;
    std::mt19937_64 r2(43);
    std::normal_distribution<double> d(0.0, 0.02);
    GridD window(4, 4, 16);
    for (double& v : window.data) v = d(r2);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        for (int c = 0; c < 16; ++c) e.at(y, x, c) = window.at(y % 4, x % 4, c);
    CHECK(window_similarity(materialize_embedding(m, 8), 4) == 1.0);

    adapt_resolution(m, 10);
    CHECK(m.params.at("embed.grid").value.height == 10);
    CHECK(window_similarity(materialize_embedding(m, 10), 4) < 1.0);
  }

  SUBCASE("shrinking is rejected") {
    Model<double> m = build_model<double>(tiny_spec(), 47);
    CHECK_THROWS_AS(adapt_resolution(m, 4), std::invalid_argument);
  }
}

TEST_CASE("reset_position_embedding reinitializes only the embedding") {
  Model<double> m = build_model<double>(grad_spec(HeadKind::classify), 53);
  GridD old_embed = m.params.at("embed.window").value;
  GridD old_patch = m.params.at("patch.w").value;
  reset_position_embedding(m, 777);
  CHECK(m.params.at("embed.window").value.data != old_embed.data);
  CHECK(m.params.at("patch.w").value.data == old_patch.data);

  // after resetting a naive embedding, window similarity returns to the
  // near-zero random-init statistic
  ModelSpec s = tiny_spec();
  s.stage_dims = {64};
  s.embed_mode = EmbedMode::naive;
  Model<double> big = build_model<double>(s, 55);
  auto& e = big.params.at("embed.grid").value;
  for (int y = 0; y < 8; ++y)  // start from a perfectly tiled state
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 64; ++c) e.at(y, x, c) = e.at(y % 4, x % 4, c);
  CHECK(window_similarity(materialize_embedding(big, 8), 4) == 1.0);
  for (int seed = 0; seed < 5; ++seed) {
    reset_position_embedding(big, 888 + seed);
    CHECK(std::fabs(window_similarity(materialize_embedding(big, 8), 4)) < 0.3);
  }
}

TEST_CASE("mae objective") {
  ModelSpec s = grad_spec(HeadKind::mae);
  Model<double> m = build_model<double>(s, 61);
  std::mt19937_64 rng(67);
  GridD image = random_image(rng, s);

  SUBCASE("mask ratio zero keeps every unit and defines loss 0") {
    std::vector<int> keep{0, 1, 2, 3};
    Tape<double> tape;
    TapeBinding<double> bind(tape, m.params);
    auto nodes = mae_loss(tape, bind, m, image, keep);
    CHECK(tape.val(nodes.loss).data[0] == 0.0);
  }

  SUBCASE("empty keep set is rejected") {
    Tape<double> tape;
    TapeBinding<double> bind(tape, m.params);
    CHECK_THROWS_AS(mae_loss(tape, bind, m, image, {}), std::invalid_argument);
  }

  SUBCASE("masked content never reaches the encoder") {
    const std::vector<int> keep{1, 2};  // units 0 and 3 are masked
    Tape<double> t1;
    TapeBinding<double> b1(t1, m.params);
    auto n1 = mae_loss(t1, b1, m, image, keep);

    // scribble over a masked unit's pixels; pass the original image as target
    GridD scribbled = image;
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x)
        for (int c = 0; c < s.in_channels; ++c) scribbled.at(y, x, c) = 123.0;
    Tape<double> t2;
    TapeBinding<double> b2(t2, m.params);
    auto n2 = mae_loss(t2, b2, m, scribbled, keep, &image);
    CHECK(t1.val(n1.loss).data[0] == t2.val(n2.loss).data[0]);
    CHECK(t1.val(n1.reconstruction).data == t2.val(n2.reconstruction).data);

    // gradients w.r.t. masked-window pixels are exactly zero
    t1.backward(n1.loss);
    const auto& gimg = t1.grad(n1.image);
    double kept_mag = 0.0;
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x)
        for (int c = 0; c < s.in_channels; ++c) {
          const bool in_masked_unit = (y < 2 && x < 2) || (y >= 2 && x >= 2);
          if (in_masked_unit) {
            CHECK(gimg.at(y, x, c) == 0.0);
          } else {
            kept_mag += std::fabs(gimg.at(y, x, c));
          }
        }
    CHECK(kept_mag > 0.0);
  }

  SUBCASE("a single sample is overfittable") {
    Model<double> om = build_model<double>(s, 71);
    std::vector<int> keep{0, 3};
    OptimConfig cfg{.kind = OptKind::adamw, .lr = 5e-3};
    double last = 1e9;
    for (int step = 0; step < 200; ++step) {
      Tape<double> tape;
      TapeBinding<double> bind(tape, om.params);
      auto nodes = mae_loss(tape, bind, om, image, keep);
      last = tape.val(nodes.loss).data[0];
      tape.backward(nodes.loss);
      bind.accumulate_grads();
      optim_step(om.params, cfg);
    }
    CHECK(last < 1e-2);
  }
}

TEST_CASE("checkpoints round-trip the full model") {
  ModelSpec s = grad_spec(HeadKind::mae);
  Model<double> m = build_model<double>(s, 73);
  std::mt19937_64 rng(79);
  GridD image = random_image(rng, s);

  CheckpointMeta meta;
  meta.seed = 4242;
  meta.extra["task"] = "mae";
  const std::string path = "model_ckpt_test.awck";
  save_checkpoint(path, m, meta);

  LoadedCheckpoint ck = load_checkpoint(path);
  CHECK(ck.meta.seed == 4242);
  CHECK(ck.meta.extra.at("task") == "mae");
  CHECK(ck.spec.input_grid == s.input_grid);
  CHECK(ck.embed.kind == EmbedKind::abswin);

  Model<double> r = model_from_checkpoint<double>(ck);
  for (const auto& name : m.params.names()) {
    CHECK(r.params.at(name).value.data == m.params.at(name).value.data);
  }

  // byte-identical on re-save
  const std::string path2 = "model_ckpt_test2.awck";
  save_checkpoint(path2, r, meta);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);

  // transfer into a classification model: encoder carries over, head is new
  ModelSpec cs = grad_spec(HeadKind::classify);
  Model<double> c = build_model<double>(cs, 99);
  int copied = copy_matching_params(ck, c);
  CHECK(copied > 10);
  CHECK(c.params.at("enc.s0.b0.attn.wq").value.data == m.params.at("enc.s0.b0.attn.wq").value.data);

  std::remove(path.c_str());
  std::remove(path2.c_str());
}
