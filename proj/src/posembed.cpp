#include "abswin/posembed.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace abswin {

Grid materialize_abswin(const AbsWinEmbed& e, int out_h, int out_w) {
  validate_abswin(e);
  if (out_h < 1 || out_w < 1) {
    throw std::invalid_argument("materialize_abswin: output dims must be >= 1");
  }
  const int w = e.window_size;
  const int reps_h = (out_h + w - 1) / w;
  const int reps_w = (out_w + w - 1) / w;
  Grid tiled = crop(tile(e.window, reps_h, reps_w), 0, 0, out_h, out_w);
  Grid global = bicubic_resize(e.global, out_h, out_w);
  for (std::size_t i = 0; i < tiled.data.size(); ++i) {
    tiled.data[i] += global.data[i];
  }
  return tiled;
}

Grid resize_naive(const NaiveEmbed& e, int out_h, int out_w) {
  return bicubic_resize(e.grid, out_h, out_w);
}

Grid resize_abswin(const AbsWinEmbed& e, int out_h, int out_w) {
  return materialize_abswin(e, out_h, out_w);
}

Grid detection_tile(const Grid& pretrained, int out_h, int out_w) {
  if (pretrained.empty()) {
    throw std::invalid_argument("detection_tile: empty pretrained embedding");
  }
  if (out_h < 1 || out_w < 1) {
    throw std::invalid_argument("detection_tile: output dims must be >= 1");
  }
  const int reps_h = (out_h + pretrained.height - 1) / pretrained.height;
  const int reps_w = (out_w + pretrained.width - 1) / pretrained.width;
  return crop(tile(pretrained, reps_h, reps_w), 0, 0, out_h, out_w);
}

Grid recursive_abswin(const AbsWinEmbed& base, int base_res, int out_h, int out_w) {
  if (base_res < 1 || base_res % base.window_size != 0) {
    throw std::invalid_argument("recursive_abswin: base_res must be a multiple of the window size");
  }
  Grid inner = materialize_abswin(base, base_res, base_res);
  return detection_tile(inner, out_h, out_w);
}

double window_similarity(const Grid& embed, int window_size) {
  if (window_size < 1 || window_size > embed.height || window_size > embed.width) {
    throw std::invalid_argument("window_similarity: window larger than grid");
  }
  // Complete windows only; partial boundary windows are excluded.
  const int ny = embed.height / window_size;
  const int nx = embed.width / window_size;
  const int n = ny * nx;
  if (n == 1) return 1.0;

  std::vector<Grid> windows;
  windows.reserve(static_cast<std::size_t>(n));
  for (int wy = 0; wy < ny; ++wy) {
    for (int wx = 0; wx < nx; ++wx) {
      windows.push_back(crop(embed, wy * window_size, wx * window_size, window_size, window_size));
    }
  }
  double sum = 0.0;
  int pairs = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      sum += cosine_similarity(windows[i], windows[j]);
      ++pairs;
    }
  }
  return sum / pairs;
}

Grid token_similarity_maps(const Grid& part) {
  if (part.height != part.width) {
    throw std::invalid_argument("token_similarity_maps: part must be square");
  }
  const int s2 = part.height * part.width;
  Grid out(s2, s2, 1);
  for (int i = 0; i < s2; ++i) {
    std::span<const float> a{part.data.data() + static_cast<std::size_t>(i) * part.channels,
                             static_cast<std::size_t>(part.channels)};
    for (int j = 0; j < s2; ++j) {
      std::span<const float> b{part.data.data() + static_cast<std::size_t>(j) * part.channels,
                               static_cast<std::size_t>(part.channels)};
      out.at(i, j, 0) = static_cast<float>(cosine_similarity(a, b));
    }
  }
  return out;
}

// --- container i/o ---------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'A', 'W', 'P', 'E'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& os, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(os, u);
}

float get_f32(std::istream& is) {
  std::uint32_t u = get_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

void put_payload(std::ostream& os, const Grid& g) {
  for (float v : g.data) put_f32(os, v);
}

void get_payload(std::istream& is, Grid& g) {
  for (float& v : g.data) v = get_f32(is);
}

void write_header(std::ostream& os, EmbedKind kind, int h, int w, int c,
                  int window_size, int global_size) {
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(kind));
  put_u32(os, static_cast<std::uint32_t>(h));
  put_u32(os, static_cast<std::uint32_t>(w));
  put_u32(os, static_cast<std::uint32_t>(c));
  put_u32(os, static_cast<std::uint32_t>(window_size));
  put_u32(os, static_cast<std::uint32_t>(global_size));
}

}  // namespace

void save_embed(std::ostream& os, const NaiveEmbed& e) {
  write_header(os, EmbedKind::naive, e.grid.height, e.grid.width, e.grid.channels, 0, 0);
  put_payload(os, e.grid);
  if (!os) throw std::runtime_error("save_embed: write failed");
}

void save_embed(std::ostream& os, const AbsWinEmbed& e) {
  validate_abswin(e);
  write_header(os, EmbedKind::abswin, e.window.height, e.window.width,
               e.window.channels, e.window_size, e.global.height);
  put_payload(os, e.window);
  put_payload(os, e.global);
  if (!os) throw std::runtime_error("save_embed: write failed");
}

void save_embed(std::ostream& os, const EmbedFile& e) {
  if (e.kind == EmbedKind::naive) {
    save_embed(os, e.naive);
  } else {
    save_embed(os, e.abswin);
  }
}

void save_embed(const std::string& path, const NaiveEmbed& e) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_embed: cannot open " + path);
  save_embed(os, e);
}

void save_embed(const std::string& path, const AbsWinEmbed& e) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_embed: cannot open " + path);
  save_embed(os, e);
}

void save_embed(const std::string& path, const EmbedFile& e) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_embed: cannot open " + path);
  save_embed(os, e);
}

EmbedFile load_embed(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("load_embed: bad magic");
  }
  std::uint32_t version = get_u32(is);
  if (version != kVersion) {
    throw std::runtime_error("load_embed: unsupported version");
  }
  std::uint32_t kind = get_u32(is);
  int h = static_cast<int>(get_u32(is));
  int w = static_cast<int>(get_u32(is));
  int c = static_cast<int>(get_u32(is));
  int window_size = static_cast<int>(get_u32(is));
  int global_size = static_cast<int>(get_u32(is));

  EmbedFile out;
  if (kind == static_cast<std::uint32_t>(EmbedKind::naive)) {
    out.kind = EmbedKind::naive;
    out.naive.grid = Grid(h, w, c);
    get_payload(is, out.naive.grid);
  } else if (kind == static_cast<std::uint32_t>(EmbedKind::abswin)) {
    out.kind = EmbedKind::abswin;
    out.abswin.window_size = window_size;
    out.abswin.window = Grid(h, w, c);
    out.abswin.global = Grid(global_size, global_size, c);
    get_payload(is, out.abswin.window);
    get_payload(is, out.abswin.global);
    validate_abswin(out.abswin);
  } else {
    throw std::runtime_error("load_embed: unknown embedding kind");
  }
  if (!is) throw std::runtime_error("load_embed: truncated embedding payload");
  return out;
}

EmbedFile load_embed(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_embed: cannot open " + path);
  return load_embed(is);
}

}  // namespace abswin
