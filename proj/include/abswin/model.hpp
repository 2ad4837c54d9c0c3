#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "abswin/posembed.hpp"
#include "abswin/tape.hpp"

namespace abswin {

enum class EmbedMode { naive, abswin };
enum class HeadKind { classify, mae };

inline const char* to_string(EmbedMode m) {
  return m == EmbedMode::naive ? "naive" : "abswin";
}
inline EmbedMode embed_mode_from_string(const std::string& s) {
  if (s == "naive") return EmbedMode::naive;
  if (s == "abswin") return EmbedMode::abswin;
  throw std::invalid_argument("unknown embed mode: " + s);
}

// Hiera-lite: a patchify stem, multi-stage transformer with per-stage window
// or global attention, 2x2 max pooling between stages, and either a
// classification head or a masked-reconstruction decoder.
struct ModelSpec {
  int input_grid = 16;  // tokens per side
  int patch_size = 1;
  int in_channels = 3;
  std::vector<int> stage_depths{2, 2};
  std::vector<int> stage_dims{32, 64};
  std::vector<int> stage_window_sizes{4, 0};  // tokens per side; 0 = global
  std::vector<int> global_layer_indices{};    // absolute block ids forced global
  std::vector<int> relpos_layer_indices{};
  EmbedMode embed_mode = EmbedMode::abswin;
  int window_size = 4;  // mask-unit side at input resolution
  int global_size = 4;  // side of the abswin global part
  HeadKind head = HeadKind::classify;
  int num_classes = 4;
  double mask_ratio = 0.6;
  int heads = 4;
  double mlp_ratio = 4.0;
  int decoder_dim = 32;
  int decoder_depth = 2;

  int num_stages() const { return static_cast<int>(stage_depths.size()); }
  int total_layers() const {
    int n = 0;
    for (int d : stage_depths) n += d;
    return n;
  }
  int pool_factor() const { return 1 << (num_stages() - 1); }
  // token grid side at the start of stage s
  int stage_grid(int s) const { return input_grid >> s; }

  void validate() const {
    if (input_grid < 1 || patch_size < 1 || in_channels < 1) {
      throw std::invalid_argument("ModelSpec: bad input geometry");
    }
    if (stage_depths.empty() || stage_depths.size() != stage_dims.size() ||
        stage_depths.size() != stage_window_sizes.size()) {
      throw std::invalid_argument("ModelSpec: stage lists must be non-empty and same length");
    }
    for (std::size_t s = 1; s < stage_dims.size(); ++s) {
      if (stage_dims[s] < stage_dims[s - 1]) {
        throw std::invalid_argument("ModelSpec: stage dims must be non-decreasing");
      }
    }
    for (int g : global_layer_indices) {
      if (g < 0 || g >= total_layers()) {
        throw std::invalid_argument("ModelSpec: global layer index out of range");
      }
    }
    if (window_size < 1 || input_grid % window_size != 0) {
      throw std::invalid_argument("ModelSpec: window must divide the pretraining grid");
    }
    for (int d : stage_dims) {
      if (d % heads != 0) throw std::invalid_argument("ModelSpec: dims must divide heads");
    }
    if (decoder_dim % heads != 0) {
      throw std::invalid_argument("ModelSpec: decoder dim must divide heads");
    }
    if (mask_ratio < 0.0 || mask_ratio >= 1.0) {
      throw std::invalid_argument("ModelSpec: mask ratio must be in [0, 1)");
    }
  }
};

template <typename T>
struct Param {
  BasicGrid<T> value;
  BasicGrid<T> grad;
  BasicGrid<T> m, v;    // adamw moments
  BasicGrid<T> mom;     // sgd momentum
  bool no_decay = false;
  int depth = 0;        // block index for layer-wise lr decay; 0 = stem/embedding
};

// Named parameters with paired gradient buffers and a step counter. Gradients
// must be repopulated between optimizer steps.
template <typename T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, BasicGrid<T> init, bool no_decay = false,
                int depth = 0) {
    if (map_.count(name)) throw std::invalid_argument("ParamStore: duplicate " + name);
    Param<T> p;
    p.grad = BasicGrid<T>(init.height, init.width, init.channels);
    p.value = std::move(init);
    p.no_decay = no_decay;
    p.depth = depth;
    order_.push_back(name);
    return map_.emplace(name, std::move(p)).first->second;
  }

  bool has(const std::string& name) const { return map_.count(name) != 0; }
  Param<T>& at(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::invalid_argument("ParamStore: unknown " + name);
    return it->second;
  }
  const Param<T>& at(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::invalid_argument("ParamStore: unknown " + name);
    return it->second;
  }
  const std::vector<std::string>& names() const { return order_; }

  void zero_grads() {
    for (auto& [name, p] : map_) {
      std::fill(p.grad.data.begin(), p.grad.data.end(), T(0));
    }
  }

  // Replaces a parameter value (e.g. a resized embedding); optimizer state is
  // re-created at the new shape.
  void replace_value(const std::string& name, BasicGrid<T> value) {
    Param<T>& p = at(name);
    p.grad = BasicGrid<T>(value.height, value.width, value.channels);
    p.m = {};
    p.v = {};
    p.mom = {};
    p.value = std::move(value);
  }

  std::size_t total_parameters() const {
    std::size_t n = 0;
    for (const auto& [name, p] : map_) n += p.value.size();
    return n;
  }

  std::int64_t step_count = 0;
  bool grads_ready = false;

 private:
  std::vector<std::string> order_;
  std::map<std::string, Param<T>> map_;
};

struct EncoderLayer {
  std::string prefix;
  int stage = 0;
  int dim = 0;
  int hidden = 0;
  int window = 0;  // 0 = global
  bool relpos = false;
  int relpos_side = 0;
  int depth = 0;  // absolute block index + 1 (0 is the stem)
};

template <typename T>
struct Model {
  ModelSpec spec;
  ParamStore<T> params;
  std::vector<EncoderLayer> encoder;
  std::vector<EncoderLayer> decoder;
  std::uint64_t init_seed = 0;
};

namespace detail {

template <typename T>
void trunc_normal_fill(BasicGrid<T>& g, std::mt19937_64& rng, double stddev = 0.02) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (T& v : g.data) {
    double x = dist(rng);
    while (std::fabs(x) > 2.0 * stddev) x = dist(rng);
    v = static_cast<T>(x);
  }
}

}  // namespace detail

template <typename T>
void init_position_embedding(Model<T>& m, std::mt19937_64& rng) {
  const int dim0 = m.spec.stage_dims[0];
  if (m.spec.embed_mode == EmbedMode::naive) {
    BasicGrid<T> e(m.spec.input_grid, m.spec.input_grid, dim0);
    detail::trunc_normal_fill(e, rng);
    if (m.params.has("embed.grid")) {
      m.params.replace_value("embed.grid", std::move(e));
    } else {
      m.params.add("embed.grid", std::move(e), /*no_decay=*/true, /*depth=*/0);
    }
  } else {
    BasicGrid<T> w(m.spec.window_size, m.spec.window_size, dim0);
    BasicGrid<T> g(m.spec.global_size, m.spec.global_size, dim0);
    detail::trunc_normal_fill(w, rng);
    detail::trunc_normal_fill(g, rng);
    if (m.params.has("embed.window")) {
      m.params.replace_value("embed.window", std::move(w));
      m.params.replace_value("embed.global", std::move(g));
    } else {
      m.params.add("embed.window", std::move(w), true, 0);
      m.params.add("embed.global", std::move(g), true, 0);
    }
  }
}

template <typename T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model<T> m;
  m.spec = spec;
  m.init_seed = seed;
  std::mt19937_64 rng(seed);

  auto weight = [&rng](int rows, int cols) {
    BasicGrid<T> w(rows, cols, 1);
    detail::trunc_normal_fill(w, rng);
    return w;
  };
  auto zeros = [](int len) { return BasicGrid<T>(1, len, 1); };
  auto ones = [](int len) {
    BasicGrid<T> g(1, len, 1);
    std::fill(g.data.begin(), g.data.end(), T(1));
    return g;
  };

  const int dim0 = spec.stage_dims[0];
  const int patch_in = spec.patch_size * spec.patch_size * spec.in_channels;
  m.params.add("patch.w", weight(patch_in, dim0), false, 0);
  m.params.add("patch.b", zeros(dim0), true, 0);
  init_position_embedding(m, rng);

  auto add_block = [&](std::vector<EncoderLayer>& list, const std::string& prefix,
                       int stage, int dim, int window, bool relpos, int relpos_side,
                       int depth) {
    EncoderLayer l;
    l.prefix = prefix;
    l.stage = stage;
    l.dim = dim;
    l.hidden = static_cast<int>(dim * spec.mlp_ratio);
    l.window = window;
    l.relpos = relpos;
    l.relpos_side = relpos_side;
    l.depth = depth;
    m.params.add(prefix + "ln1.g", ones(dim), true, depth);
    m.params.add(prefix + "ln1.b", zeros(dim), true, depth);
    m.params.add(prefix + "attn.wq", weight(dim, dim), false, depth);
    m.params.add(prefix + "attn.wk", weight(dim, dim), false, depth);
    m.params.add(prefix + "attn.wv", weight(dim, dim), false, depth);
    m.params.add(prefix + "attn.wo", weight(dim, dim), false, depth);
    m.params.add(prefix + "attn.bq", zeros(dim), true, depth);
    m.params.add(prefix + "attn.bk", zeros(dim), true, depth);
    m.params.add(prefix + "attn.bv", zeros(dim), true, depth);
    m.params.add(prefix + "attn.bo", zeros(dim), true, depth);
    if (relpos) {
      const int hd = dim / spec.heads;
      m.params.add(prefix + "attn.rel_row", BasicGrid<T>(2 * relpos_side - 1, hd, 1), true, depth);
      m.params.add(prefix + "attn.rel_col", BasicGrid<T>(2 * relpos_side - 1, hd, 1), true, depth);
    }
    m.params.add(prefix + "ln2.g", ones(dim), true, depth);
    m.params.add(prefix + "ln2.b", zeros(dim), true, depth);
    m.params.add(prefix + "mlp.w1", weight(dim, l.hidden), false, depth);
    m.params.add(prefix + "mlp.b1", zeros(l.hidden), true, depth);
    m.params.add(prefix + "mlp.w2", weight(l.hidden, dim), false, depth);
    m.params.add(prefix + "mlp.b2", zeros(dim), true, depth);
    list.push_back(l);
  };

  int layer_id = 0;
  for (int s = 0; s < spec.num_stages(); ++s) {
    for (int b = 0; b < spec.stage_depths[s]; ++b, ++layer_id) {
      int window = spec.stage_window_sizes[s];
      for (int g : spec.global_layer_indices) {
        if (g == layer_id) window = 0;
      }
      bool relpos = false;
      for (int r : spec.relpos_layer_indices) {
        if (r == layer_id) relpos = true;
      }
      const int side = window > 0 ? window : spec.stage_grid(s);
      const std::string prefix =
          "enc.s" + std::to_string(s) + ".b" + std::to_string(b) + ".";
      add_block(m.encoder, prefix, s, spec.stage_dims[s], window, relpos, side,
                layer_id + 1);
    }
    if (s + 1 < spec.num_stages()) {
      const std::string prefix = "trans.s" + std::to_string(s) + ".";
      m.params.add(prefix + "w", weight(spec.stage_dims[s], spec.stage_dims[s + 1]),
                   false, layer_id);
      m.params.add(prefix + "b", zeros(spec.stage_dims[s + 1]), true, layer_id);
    }
  }

  const int dim_last = spec.stage_dims.back();
  if (spec.head == HeadKind::classify) {
    m.params.add("head.ln.g", ones(dim_last), true, layer_id + 1);
    m.params.add("head.ln.b", zeros(dim_last), true, layer_id + 1);
    m.params.add("head.w", weight(dim_last, spec.num_classes), false, layer_id + 1);
    m.params.add("head.b", zeros(spec.num_classes), true, layer_id + 1);
  } else {
    const int dec = spec.decoder_dim;
    const int pooled = spec.input_grid / spec.pool_factor();
    m.params.add("dec.proj.w", weight(dim_last, dec), false, layer_id + 1);
    m.params.add("dec.proj.b", zeros(dec), true, layer_id + 1);
    BasicGrid<T> mask_token(1, 1, dec);
    detail::trunc_normal_fill(mask_token, rng);
    m.params.add("dec.mask_token", std::move(mask_token), true, layer_id + 1);
    BasicGrid<T> dec_embed(pooled, pooled, dec);
    detail::trunc_normal_fill(dec_embed, rng);
    m.params.add("dec.embed", std::move(dec_embed), true, layer_id + 1);
    for (int b = 0; b < spec.decoder_depth; ++b) {
      add_block(m.decoder, "dec.b" + std::to_string(b) + ".", 0, dec, 0, false,
                pooled, layer_id + 1);
    }
    m.params.add("dec.ln.g", ones(dec), true, layer_id + 1);
    m.params.add("dec.ln.b", zeros(dec), true, layer_id + 1);
    const int out = spec.pool_factor() * spec.pool_factor() * spec.patch_size *
                    spec.patch_size * spec.in_channels;
    m.params.add("dec.head.w", weight(dec, out), false, layer_id + 1);
    m.params.add("dec.head.b", zeros(out), true, layer_id + 1);
  }
  return m;
}

// Registers parameters as tape inputs (one node per parameter per tape) and
// flows gradients back into the store after Tape::backward.
template <typename T>
class TapeBinding {
 public:
  TapeBinding(Tape<T>& tape, ParamStore<T>& store) : tape_(tape), store_(store) {}

  int operator()(const std::string& name) {
    auto it = ids_.find(name);
    if (it != ids_.end()) return it->second;
    int id = tape_.input(store_.at(name).value);
    ids_.emplace(name, id);
    return id;
  }

  void accumulate_grads() {
    for (const auto& [name, id] : ids_) {
      Param<T>& p = store_.at(name);
      const BasicGrid<T>& g = tape_.grad(id);
      for (std::size_t i = 0; i < g.data.size(); ++i) p.grad.data[i] += g.data[i];
    }
    store_.grads_ready = true;
  }

 private:
  Tape<T>& tape_;
  ParamStore<T>& store_;
  std::map<std::string, int> ids_;
};

// Position embedding node materialized at (grid x grid) tokens.
template <typename T>
int position_embedding_node(Tape<T>& tape, TapeBinding<T>& bind, const Model<T>& m,
                            int grid) {
  if (m.spec.embed_mode == EmbedMode::naive) {
    int e = bind("embed.grid");
    const auto& v = tape.val(e);
    if (v.height != grid || v.width != grid) {
      throw std::invalid_argument("position embedding does not match the token grid");
    }
    return e;
  }
  int win = tape.tile_crop(bind("embed.window"), grid, grid);
  int glob = tape.bicubic(bind("embed.global"), grid, grid);
  return tape.add(win, glob);
}

template <typename T>
int transformer_block(Tape<T>& tape, TapeBinding<T>& bind, const EncoderLayer& l,
                      int x, int heads) {
  AttentionLayerConfig cfg;
  cfg.dim = l.dim;
  cfg.heads = heads;
  if (l.window > 0) cfg.window_size = l.window;
  cfg.use_relpos = l.relpos;

  typename Tape<T>::AttnParamIds ids;
  ids.wq = bind(l.prefix + "attn.wq");
  ids.wk = bind(l.prefix + "attn.wk");
  ids.wv = bind(l.prefix + "attn.wv");
  ids.wo = bind(l.prefix + "attn.wo");
  ids.bq = bind(l.prefix + "attn.bq");
  ids.bk = bind(l.prefix + "attn.bk");
  ids.bv = bind(l.prefix + "attn.bv");
  ids.bo = bind(l.prefix + "attn.bo");
  if (l.relpos) {
    ids.relpos_row = bind(l.prefix + "attn.rel_row");
    ids.relpos_col = bind(l.prefix + "attn.rel_col");
    ids.relpos_side = l.relpos_side;
  }

  int h = tape.layernorm(x, bind(l.prefix + "ln1.g"), bind(l.prefix + "ln1.b"));
  x = tape.add(x, tape.attention(h, ids, cfg));
  h = tape.layernorm(x, bind(l.prefix + "ln2.g"), bind(l.prefix + "ln2.b"));
  int mid = tape.gelu(tape.matmul_tokens(h, bind(l.prefix + "mlp.w1"), bind(l.prefix + "mlp.b1")));
  return tape.add(x, tape.matmul_tokens(mid, bind(l.prefix + "mlp.w2"), bind(l.prefix + "mlp.b2")));
}

// Patchify, add the position embedding, optionally drop masked units, then
// run the staged encoder. Returns the final token node.
template <typename T>
int encode(Tape<T>& tape, TapeBinding<T>& bind, const Model<T>& m,
           const BasicGrid<T>& image, const std::vector<int>* keep,
           int* image_node = nullptr) {
  const ModelSpec& spec = m.spec;
  const int side = spec.input_grid * spec.patch_size;
  if (image.height != side || image.width != side || image.channels != spec.in_channels) {
    throw std::invalid_argument("encode: image does not match spec geometry");
  }
  int x = tape.input(image);
  if (image_node) *image_node = x;
  if (spec.patch_size > 1) x = tape.space_to_depth(x, spec.patch_size);
  x = tape.matmul_tokens(x, bind("patch.w"), bind("patch.b"));
  x = tape.add(x, position_embedding_node(tape, bind, m, spec.input_grid));
  if (keep) {
    x = tape.gather_units(x, *keep, spec.window_size);
  }

  std::size_t li = 0;
  for (int s = 0; s < spec.num_stages(); ++s) {
    for (int b = 0; b < spec.stage_depths[s]; ++b, ++li) {
      x = transformer_block(tape, bind, m.encoder[li], x, spec.heads);
    }
    if (s + 1 < spec.num_stages()) {
      x = tape.pool2x2_max(x);
      const std::string prefix = "trans.s" + std::to_string(s) + ".";
      x = tape.matmul_tokens(x, bind(prefix + "w"), bind(prefix + "b"));
    }
  }
  return x;
}

// Mean-pooled classification logits over the final stage.
template <typename T>
int classify_logits(Tape<T>& tape, TapeBinding<T>& bind, const Model<T>& m,
                    const BasicGrid<T>& image) {
  if (m.spec.head != HeadKind::classify) {
    throw std::invalid_argument("classify_logits: model has no classification head");
  }
  int x = encode(tape, bind, m, image, nullptr);
  x = tape.mean_tokens(x);
  x = tape.layernorm(x, bind("head.ln.g"), bind("head.ln.b"));
  return tape.matmul_tokens(x, bind("head.w"), bind("head.b"));
}

template <typename T>
int classify_loss(Tape<T>& tape, TapeBinding<T>& bind, const Model<T>& m,
                  const BasicGrid<T>& image, int label) {
  return tape.softmax_xent(classify_logits(tape, bind, m, image), label);
}

template <typename T>
struct MaeNodes {
  int loss = -1;
  int reconstruction = -1;  // decoder output over the full pooled grid
  int image = -1;           // the tape input node holding the image
};

// Masked-autoencoder objective: encode kept mask units only, decode the full
// pooled grid with a learned mask token, and take the MSE over masked
// patches. The regression target is a detached copy of `target_image`
// (defaults to the input image).
template <typename T>
MaeNodes<T> mae_loss(Tape<T>& tape, TapeBinding<T>& bind, const Model<T>& m,
                     const BasicGrid<T>& image, const std::vector<int>& keep,
                     const BasicGrid<T>* target_image = nullptr) {
  const ModelSpec& spec = m.spec;
  if (spec.head != HeadKind::mae) {
    throw std::invalid_argument("mae_loss: model has no mae head");
  }
  const int units = spec.input_grid / spec.window_size;
  if (keep.empty() || static_cast<int>(keep.size()) > units * units) {
    throw std::invalid_argument("mae_loss: keep set must be non-empty");
  }
  for (int u : keep) {
    if (u < 0 || u >= units * units) throw std::invalid_argument("mae_loss: bad unit id");
  }

  MaeNodes<T> out;
  int x = encode(tape, bind, m, image, &keep, &out.image);

  // project to decoder width and scatter into the full pooled grid
  x = tape.matmul_tokens(x, bind("dec.proj.w"), bind("dec.proj.b"));
  const int pool = spec.pool_factor();
  const int dec_unit = spec.window_size / pool;
  if (dec_unit < 1) throw std::invalid_argument("mae_loss: window pooled away entirely");
  x = tape.scatter_units(x, keep, dec_unit, units, units, bind("dec.mask_token"));
  x = tape.add(x, bind("dec.embed"));
  for (const EncoderLayer& l : m.decoder) {
    x = transformer_block(tape, bind, l, x, spec.heads);
  }
  x = tape.layernorm(x, bind("dec.ln.g"), bind("dec.ln.b"));
  int pred = tape.matmul_tokens(x, bind("dec.head.w"), bind("dec.head.b"));

  // reconstruction target: pixels rearranged to one vector per decoder token
  const BasicGrid<T>& tgt_src = target_image ? *target_image : image;
  Tape<T> scratch;
  int t = scratch.input(tgt_src);
  BasicGrid<T> target = scratch.val(scratch.space_to_depth(t, pool * spec.patch_size));

  // masked decoder tokens only
  const int dec_grid = spec.input_grid / pool;
  std::vector<std::uint8_t> masked(static_cast<std::size_t>(dec_grid) * dec_grid, 1);
  for (int u : keep) {
    const int uy = u / units, ux = u % units;
    for (int y = 0; y < dec_unit; ++y)
      for (int xx = 0; xx < dec_unit; ++xx)
        masked[static_cast<std::size_t>(uy * dec_unit + y) * dec_grid + ux * dec_unit + xx] = 0;
  }

  out.reconstruction = pred;
  out.loss = tape.mse_selected(pred, std::move(target), std::move(masked));
  return out;
}

// Uniform window-level mask: keeps units - round(mask_ratio * units) units.
inline std::vector<int> sample_keep_units(int units_total, double mask_ratio,
                                          std::mt19937_64& rng) {
  const int masked = std::min(units_total - 1,
                              static_cast<int>(std::lround(mask_ratio * units_total)));
  std::vector<int> ids(static_cast<std::size_t>(units_total));
  for (int i = 0; i < units_total; ++i) ids[i] = i;
  for (int i = units_total - 1; i > 0; --i) {
    std::uniform_int_distribution<int> d(0, i);
    std::swap(ids[i], ids[d(rng)]);
  }
  ids.resize(static_cast<std::size_t>(units_total - masked));
  std::sort(ids.begin(), ids.end());
  return ids;
}

// --- optimizers -------------------------------------------------------------

enum class OptKind { sgd, adamw };

struct OptimConfig {
  OptKind kind = OptKind::adamw;
  double lr = 1e-3;
  double momentum = 0.9;     // sgd
  double beta1 = 0.9;        // adamw
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double layer_decay = 1.0;  // per-depth multiplicative lr attenuation
  int max_depth = 0;         // depth of the head; 0 disables the schedule
};

template <typename T>
void optim_step(ParamStore<T>& store, const OptimConfig& cfg) {
  if (!store.grads_ready) {
    throw std::runtime_error("optim_step: gradients are stale; run backward first");
  }
  store.step_count += 1;
  const std::int64_t t = store.step_count;
  for (const std::string& name : store.names()) {
    Param<T>& p = store.at(name);
    double lr = cfg.lr;
    if (cfg.layer_decay != 1.0 && cfg.max_depth > 0) {
      lr *= std::pow(cfg.layer_decay, std::max(0, cfg.max_depth - p.depth));
    }
    if (cfg.kind == OptKind::sgd) {
      if (p.mom.size() != p.value.size()) {
        p.mom = BasicGrid<T>(p.value.height, p.value.width, p.value.channels);
      }
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        p.mom.data[i] = static_cast<T>(cfg.momentum * p.mom.data[i] + p.grad.data[i]);
        p.value.data[i] -= static_cast<T>(lr * p.mom.data[i]);
      }
    } else {
      if (p.m.size() != p.value.size()) {
        p.m = BasicGrid<T>(p.value.height, p.value.width, p.value.channels);
        p.v = BasicGrid<T>(p.value.height, p.value.width, p.value.channels);
      }
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad.data[i];
        p.m.data[i] = static_cast<T>(cfg.beta1 * p.m.data[i] + (1.0 - cfg.beta1) * g);
        p.v.data[i] = static_cast<T>(cfg.beta2 * p.v.data[i] + (1.0 - cfg.beta2) * g * g);
        const double mhat = p.m.data[i] / bc1;
        const double vhat = p.v.data[i] / bc2;
        double upd = lr * mhat / (std::sqrt(vhat) + cfg.eps);
        if (!p.no_decay && cfg.weight_decay > 0.0) {
          upd += lr * cfg.weight_decay * p.value.data[i];
        }
        p.value.data[i] -= static_cast<T>(upd);
      }
    }
  }
  store.grads_ready = false;
  store.zero_grads();
}

// --- resolution adaptation and embedding reset ------------------------------

// Changes only the position embedding: naive embeddings are bicubically
// resized once and become the new parameter; abswin parameters are untouched
// because materialization happens per forward at whatever grid is active.
template <typename T>
void adapt_resolution(Model<T>& m, int new_grid) {
  if (new_grid < m.spec.input_grid) {
    throw std::invalid_argument("adapt_resolution: shrinking is not supported");
  }
  if (m.spec.embed_mode == EmbedMode::naive && new_grid != m.spec.input_grid) {
    const BasicGrid<T>& old = m.params.at("embed.grid").value;
    m.params.replace_value("embed.grid", bicubic_resize(old, new_grid, new_grid));
  }
  m.spec.input_grid = new_grid;
}

template <typename T>
void reset_position_embedding(Model<T>& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  init_position_embedding(m, rng);
}

// Materializes the current position embedding as a float grid for analysis.
template <typename T>
Grid materialize_embedding(const Model<T>& m, int grid) {
  auto to_float = [](const BasicGrid<T>& g) {
    Grid out(g.height, g.width, g.channels);
    for (std::size_t i = 0; i < g.data.size(); ++i)
      out.data[i] = static_cast<float>(g.data[i]);
    return out;
  };
  if (m.spec.embed_mode == EmbedMode::naive) {
    NaiveEmbed e{to_float(m.params.at("embed.grid").value)};
    return resize_naive(e, grid, grid);
  }
  AbsWinEmbed e;
  e.window_size = m.spec.window_size;
  e.window = to_float(m.params.at("embed.window").value);
  e.global = to_float(m.params.at("embed.global").value);
  return materialize_abswin(e, grid, grid);
}

// --- checkpoints -------------------------------------------------------------

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::map<std::string, std::string> extra;
};

struct LoadedCheckpoint {
  ModelSpec spec;
  CheckpointMeta meta;
  std::vector<std::pair<std::string, GridD>> tensors;  // float64 payloads
  EmbedFile embed;                                     // interchange copy
};

void save_checkpoint_raw(const std::string& path, const ModelSpec& spec,
                         const CheckpointMeta& meta,
                         const std::vector<std::pair<std::string, GridD>>& tensors,
                         const EmbedFile& embed);
LoadedCheckpoint load_checkpoint(const std::string& path);

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& m,
                     const CheckpointMeta& meta) {
  std::vector<std::pair<std::string, GridD>> tensors;
  tensors.reserve(m.params.names().size());
  for (const std::string& name : m.params.names()) {
    const BasicGrid<T>& v = m.params.at(name).value;
    GridD d(v.height, v.width, v.channels);
    for (std::size_t i = 0; i < v.data.size(); ++i) d.data[i] = static_cast<double>(v.data[i]);
    tensors.emplace_back(name, std::move(d));
  }
  EmbedFile embed;
  if (m.spec.embed_mode == EmbedMode::naive) {
    embed.kind = EmbedKind::naive;
    embed.naive.grid = materialize_embedding(m, m.spec.input_grid);
  } else {
    embed.kind = EmbedKind::abswin;
    embed.abswin.window_size = m.spec.window_size;
    auto to_float = [](const BasicGrid<T>& g) {
      Grid out(g.height, g.width, g.channels);
      for (std::size_t i = 0; i < g.data.size(); ++i)
        out.data[i] = static_cast<float>(g.data[i]);
      return out;
    };
    embed.abswin.window = to_float(m.params.at("embed.window").value);
    embed.abswin.global = to_float(m.params.at("embed.global").value);
  }
  save_checkpoint_raw(path, m.spec, meta, tensors, embed);
}

// Rebuilds the exact model stored in a checkpoint.
template <typename T>
Model<T> model_from_checkpoint(const LoadedCheckpoint& ck, std::uint64_t seed = 1) {
  Model<T> m = build_model<T>(ck.spec, seed);
  for (const auto& [name, tensor] : ck.tensors) {
    if (!m.params.has(name)) {
      throw std::runtime_error("checkpoint has unknown tensor " + name);
    }
    Param<T>& p = m.params.at(name);
    if (!(p.value.height == tensor.height && p.value.width == tensor.width &&
          p.value.channels == tensor.channels)) {
      BasicGrid<T> fresh(tensor.height, tensor.width, tensor.channels);
      m.params.replace_value(name, std::move(fresh));
    }
    BasicGrid<T>& dst = m.params.at(name).value;
    for (std::size_t i = 0; i < tensor.data.size(); ++i)
      dst.data[i] = static_cast<T>(tensor.data[i]);
  }
  return m;
}

// Copies tensors whose name and shape match into an existing model (transfer
// into a different head); returns how many were copied.
template <typename T>
int copy_matching_params(const LoadedCheckpoint& ck, Model<T>& m) {
  int copied = 0;
  for (const auto& [name, tensor] : ck.tensors) {
    if (!m.params.has(name)) continue;
    BasicGrid<T>& dst = m.params.at(name).value;
    if (dst.height != tensor.height || dst.width != tensor.width ||
        dst.channels != tensor.channels) {
      continue;
    }
    for (std::size_t i = 0; i < tensor.data.size(); ++i)
      dst.data[i] = static_cast<T>(tensor.data[i]);
    ++copied;
  }
  return copied;
}

}  // namespace abswin
