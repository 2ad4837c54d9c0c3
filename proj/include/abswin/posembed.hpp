#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "abswin/grid.hpp"

namespace abswin {

// Plain learned absolute embedding, one vector per token of the training-time
// grid. Resizing it bicubically is the buggy baseline this project dissects.
struct NaiveEmbed {
  Grid grid;
};

// Two-part embedding: a window-sized part that is tiled, plus a low-resolution
// global part that is interpolated. Materialization adds the two at the target
// token-grid size; the window part is never resampled.
struct AbsWinEmbed {
  Grid window;  // window_size x window_size x C
  Grid global;  // g x g x C
  int window_size = 0;
};

inline void validate_abswin(const AbsWinEmbed& e) {
  if (e.window.height != e.window_size || e.window.width != e.window_size) {
    throw std::invalid_argument("AbsWinEmbed: window part must be square with side window_size");
  }
  if (e.global.height != e.global.width) {
    throw std::invalid_argument("AbsWinEmbed: global part must be square");
  }
  if (e.window.channels != e.global.channels) {
    throw std::invalid_argument("AbsWinEmbed: window/global channel mismatch");
  }
}

// tile(window) cropped to (out_h, out_w) plus bicubic(global) at the same size.
Grid materialize_abswin(const AbsWinEmbed& e, int out_h, int out_w);

// The naive baseline: plain bicubic resize of the full embedding.
Grid resize_naive(const NaiveEmbed& e, int out_h, int out_w);

// Resize under the two-part scheme: identical to materializing at the new
// size. Kept as a named operation because it is the drop-in replacement for
// resize_naive.
Grid resize_abswin(const AbsWinEmbed& e, int out_h, int out_w);

// Detection-time fix: tile a pretrained p x p embedding to cover the target
// grid, cropping the partial right/bottom tiles.
Grid detection_tile(const Grid& pretrained, int out_h, int out_w);

// Two-level construction: materialize `base` at base_res (its pretraining
// grid), then tile that inner embedding across the detection grid.
Grid recursive_abswin(const AbsWinEmbed& base, int base_res, int out_h, int out_w);

// Mean pairwise cosine similarity over all complete window_size blocks of the
// embedding. 1.0 for a perfectly tiled embedding or a single window.
double window_similarity(const Grid& embed, int window_size);

// s^2 x s^2 matrix (as a 1-channel grid) of token-vs-token channel cosines.
Grid token_similarity_maps(const Grid& part);

// --- binary embedding container ------------------------------------------
// Layout: magic "AWPE", u32 version, u32 kind, u32 height, u32 width,
// u32 channels, u32 window_size, u32 global_size, then the float32 payload(s)
// little-endian: the naive grid, or the window part followed by the global
// part. For abswin, height == width == window_size.

enum class EmbedKind : std::uint32_t { naive = 0, abswin = 1 };

struct EmbedFile {
  EmbedKind kind = EmbedKind::naive;
  NaiveEmbed naive;
  AbsWinEmbed abswin;
};

void save_embed(std::ostream& os, const NaiveEmbed& e);
void save_embed(std::ostream& os, const AbsWinEmbed& e);
void save_embed(std::ostream& os, const EmbedFile& e);
void save_embed(const std::string& path, const NaiveEmbed& e);
void save_embed(const std::string& path, const AbsWinEmbed& e);
void save_embed(const std::string& path, const EmbedFile& e);
EmbedFile load_embed(std::istream& is);
EmbedFile load_embed(const std::string& path);

}  // namespace abswin
