#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace abswin {

// Dense H x W x C grid, row-major (y, x, c). Channel values of one token are
// contiguous. Float storage is the library-facing type; the training engine
// instantiates the same ops with double storage.
template <typename T>
struct BasicGrid {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<T> data;

  BasicGrid() = default;
  BasicGrid(int h, int w, int c, T fill = T(0))
      : height(h), width(w), channels(c) {
    if (h < 0 || w < 0 || c < 0) {
      throw std::invalid_argument("BasicGrid: negative dimension");
    }
    data.assign(static_cast<std::size_t>(h) * w * c, fill);
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  int tokens() const { return height * width; }

  T& at(int y, int x, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  const T& at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }

  // Pointer to the channel vector of token (y, x).
  T* token_ptr(int y, int x) {
    return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
  const T* token_ptr(int y, int x) const {
    return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }

  bool same_shape(const BasicGrid& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  std::span<const T> flat() const { return {data.data(), data.size()}; }
  std::span<T> flat() { return {data.data(), data.size()}; }
};

using Grid = BasicGrid<float>;
using GridD = BasicGrid<double>;

// Window tiling of a token grid. pad_bottom/pad_right extend the grid to the
// next multiple of window_size; padded cells are zero-filled on partition and
// discarded on unpartition.
struct WindowLayout {
  int window_size = 0;
  int grid_height = 0;
  int grid_width = 0;
  int pad_bottom = 0;
  int pad_right = 0;

  int padded_height() const { return grid_height + pad_bottom; }
  int padded_width() const { return grid_width + pad_right; }
  int windows_y() const { return padded_height() / window_size; }
  int windows_x() const { return padded_width() / window_size; }
  int window_count() const { return windows_y() * windows_x(); }
};

inline WindowLayout make_window_layout(int grid_h, int grid_w, int window_size) {
  if (window_size < 1 || grid_h < 1 || grid_w < 1) {
    throw std::invalid_argument("make_window_layout: sizes must be >= 1");
  }
  WindowLayout l;
  l.window_size = window_size;
  l.grid_height = grid_h;
  l.grid_width = grid_w;
  l.pad_bottom = (window_size - grid_h % window_size) % window_size;
  l.pad_right = (window_size - grid_w % window_size) % window_size;
  return l;
}

// Cubic convolution kernel with sharpness a = -0.75.
inline double cubic_weight(double x) {
  constexpr double a = -0.75;
  double ax = std::fabs(x);
  if (ax <= 1.0) {
    return ((a + 2.0) * ax - (a + 3.0)) * ax * ax + 1.0;
  }
  if (ax < 2.0) {
    return (((ax - 5.0) * ax + 8.0) * ax - 4.0) * a;
  }
  return 0.0;
}

// One output coordinate of a 1-D bicubic pass: four source indices (already
// clamped to the border) and their kernel weights.
struct CubicTap {
  int idx[4];
  double w[4];
};

// Taps for resizing a length-src axis to length-dst, half-pixel-center
// coordinate mapping.
inline std::vector<CubicTap> cubic_taps(int src, int dst) {
  std::vector<CubicTap> taps(static_cast<std::size_t>(dst));
  const double scale = static_cast<double>(src) / dst;
  for (int o = 0; o < dst; ++o) {
    double s = (o + 0.5) * scale - 0.5;
    double base = std::floor(s);
    double f = s - base;
    int i = static_cast<int>(base);
    CubicTap& t = taps[o];
    for (int k = 0; k < 4; ++k) {
      int j = i - 1 + k;
      t.idx[k] = j < 0 ? 0 : (j >= src ? src - 1 : j);
      t.w[k] = cubic_weight(f - (k - 1));
    }
  }
  return taps;
}

// Bicubic resampling with clamp-to-edge borders. Separable two-pass,
// double-precision intermediates, storage rounded once at the end.
template <typename T>
BasicGrid<T> bicubic_resize(const BasicGrid<T>& src, int out_h, int out_w) {
  if (src.empty() || src.height < 1 || src.width < 1) {
    throw std::invalid_argument("bicubic_resize: empty source grid");
  }
  if (out_h < 1 || out_w < 1) {
    throw std::invalid_argument("bicubic_resize: output dims must be >= 1");
  }
  const int c = src.channels;
  const std::vector<CubicTap> tx = cubic_taps(src.width, out_w);
  const std::vector<CubicTap> ty = cubic_taps(src.height, out_h);

  // Horizontal pass: src.height x out_w, kept in double.
  std::vector<double> inter(static_cast<std::size_t>(src.height) * out_w * c);
  for (int y = 0; y < src.height; ++y) {
    for (int ox = 0; ox < out_w; ++ox) {
      const CubicTap& t = tx[ox];
      double* dst = inter.data() + (static_cast<std::size_t>(y) * out_w + ox) * c;
      const T* s0 = src.token_ptr(y, t.idx[0]);
      const T* s1 = src.token_ptr(y, t.idx[1]);
      const T* s2 = src.token_ptr(y, t.idx[2]);
      const T* s3 = src.token_ptr(y, t.idx[3]);
      for (int ch = 0; ch < c; ++ch) {
        dst[ch] = t.w[0] * s0[ch] + t.w[1] * s1[ch] + t.w[2] * s2[ch] +
                  t.w[3] * s3[ch];
      }
    }
  }

  BasicGrid<T> out(out_h, out_w, c);
  for (int oy = 0; oy < out_h; ++oy) {
    const CubicTap& t = ty[oy];
    const double* r0 = inter.data() + static_cast<std::size_t>(t.idx[0]) * out_w * c;
    const double* r1 = inter.data() + static_cast<std::size_t>(t.idx[1]) * out_w * c;
    const double* r2 = inter.data() + static_cast<std::size_t>(t.idx[2]) * out_w * c;
    const double* r3 = inter.data() + static_cast<std::size_t>(t.idx[3]) * out_w * c;
    T* dst = out.token_ptr(oy, 0);
    const std::size_t row = static_cast<std::size_t>(out_w) * c;
    for (std::size_t k = 0; k < row; ++k) {
      dst[k] = static_cast<T>(t.w[0] * r0[k] + t.w[1] * r1[k] + t.w[2] * r2[k] +
                              t.w[3] * r3[k]);
    }
  }
  return out;
}

// Repeat src reps_h x reps_w times. Every H x W block equals src bitwise.
template <typename T>
BasicGrid<T> tile(const BasicGrid<T>& src, int reps_h, int reps_w) {
  if (reps_h < 1 || reps_w < 1) {
    throw std::invalid_argument("tile: repetition counts must be >= 1");
  }
  BasicGrid<T> out(src.height * reps_h, src.width * reps_w, src.channels);
  const std::size_t row = static_cast<std::size_t>(src.width) * src.channels;
  for (int by = 0; by < reps_h; ++by) {
    for (int y = 0; y < src.height; ++y) {
      const T* s = src.token_ptr(y, 0);
      for (int bx = 0; bx < reps_w; ++bx) {
        T* d = out.token_ptr(by * src.height + y, bx * src.width);
        std::copy(s, s + row, d);
      }
    }
  }
  return out;
}

template <typename T>
BasicGrid<T> crop(const BasicGrid<T>& src, int row0, int col0, int h, int w) {
  if (row0 < 0 || col0 < 0 || h < 1 || w < 1 || row0 + h > src.height ||
      col0 + w > src.width) {
    throw std::invalid_argument("crop: rectangle out of bounds");
  }
  BasicGrid<T> out(h, w, src.channels);
  const std::size_t row = static_cast<std::size_t>(w) * src.channels;
  for (int y = 0; y < h; ++y) {
    const T* s = src.token_ptr(row0 + y, col0);
    std::copy(s, s + row, out.token_ptr(y, 0));
  }
  return out;
}

// Split into window_size x window_size tiles in row-major window order,
// zero-filling the bottom/right padding demanded by the layout.
template <typename T>
std::vector<BasicGrid<T>> window_partition(const BasicGrid<T>& src,
                                           const WindowLayout& layout) {
  if (layout.grid_height != src.height || layout.grid_width != src.width) {
    throw std::invalid_argument("window_partition: layout does not match grid");
  }
  if (layout.window_size < 1 ||
      layout.padded_height() % layout.window_size != 0 ||
      layout.padded_width() % layout.window_size != 0 ||
      layout.pad_bottom < 0 || layout.pad_bottom >= layout.window_size ||
      layout.pad_right < 0 || layout.pad_right >= layout.window_size) {
    throw std::invalid_argument("window_partition: inconsistent layout");
  }
  const int ws = layout.window_size;
  std::vector<BasicGrid<T>> windows;
  windows.reserve(static_cast<std::size_t>(layout.window_count()));
  for (int wy = 0; wy < layout.windows_y(); ++wy) {
    for (int wx = 0; wx < layout.windows_x(); ++wx) {
      BasicGrid<T> win(ws, ws, src.channels);
      for (int y = 0; y < ws; ++y) {
        int sy = wy * ws + y;
        if (sy >= src.height) break;  // rows below stay zero
        for (int x = 0; x < ws; ++x) {
          int sx = wx * ws + x;
          if (sx >= src.width) break;
          const T* s = src.token_ptr(sy, sx);
          std::copy(s, s + src.channels, win.token_ptr(y, x));
        }
      }
      windows.push_back(std::move(win));
    }
  }
  return windows;
}

// Inverse of window_partition; padding is cropped away.
template <typename T>
BasicGrid<T> window_unpartition(const std::vector<BasicGrid<T>>& windows,
                                const WindowLayout& layout) {
  if (windows.empty() ||
      static_cast<int>(windows.size()) != layout.window_count()) {
    throw std::invalid_argument("window_unpartition: window count mismatch");
  }
  const int ws = layout.window_size;
  const int c = windows.front().channels;
  for (const auto& w : windows) {
    if (w.height != ws || w.width != ws || w.channels != c) {
      throw std::invalid_argument("window_unpartition: window shape mismatch");
    }
  }
  BasicGrid<T> out(layout.grid_height, layout.grid_width, c);
  for (int wy = 0; wy < layout.windows_y(); ++wy) {
    for (int wx = 0; wx < layout.windows_x(); ++wx) {
      const BasicGrid<T>& win = windows[wy * layout.windows_x() + wx];
      for (int y = 0; y < ws; ++y) {
        int dy = wy * ws + y;
        if (dy >= out.height) break;
        for (int x = 0; x < ws; ++x) {
          int dx = wx * ws + x;
          if (dx >= out.width) break;
          const T* s = win.token_ptr(y, x);
          std::copy(s, s + c, out.token_ptr(dy, dx));
        }
      }
    }
  }
  return out;
}

// Cosine of two flattened views; 0 when either norm is zero. Bitwise-equal
// nonzero inputs (e.g. windows of a perfectly tiled embedding) report 1.0
// exactly.
template <typename T>
double cosine_similarity(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("cosine_similarity: length mismatch");
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  bool identical = true;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
    identical = identical && a[i] == b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  if (identical) return 1.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

template <typename T>
double cosine_similarity(const BasicGrid<T>& a, const BasicGrid<T>& b) {
  return cosine_similarity(a.flat(), b.flat());
}

template <typename T>
bool all_finite(const BasicGrid<T>& g) {
  for (T v : g.data) {
    if (!std::isfinite(static_cast<double>(v))) return false;
  }
  return true;
}

}  // namespace abswin
