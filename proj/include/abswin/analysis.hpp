#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "abswin/model.hpp"
#include "abswin/posembed.hpp"

namespace abswin {

struct SimilarityPoint {
  std::int64_t step = 0;
  double window_similarity = 0.0;
};

// Window-similarity curve over a training run (the Fig.-2-style diagnostic).
struct SimilarityReport {
  std::string run_id;
  std::string embed_mode;  // naive | abswin
  std::string task;        // mae | supervised
  std::uint64_t seed = 0;
  std::vector<SimilarityPoint> series;

  void add(std::int64_t step, double value) {
    if (!series.empty() && step <= series.back().step) {
      throw std::invalid_argument("SimilarityReport: steps must be strictly increasing");
    }
    if (value < -1.0 || value > 1.0) {
      throw std::invalid_argument("SimilarityReport: similarity outside [-1, 1]");
    }
    series.push_back({step, value});
  }
};

// Samples window_similarity of the materialized embedding every
// every_n_steps optimizer steps (plus whatever steps observe() is handed,
// typically 0 and the final step).
class SimilarityTracker {
 public:
  SimilarityTracker(int every_n_steps, int window_size)
      : every_(every_n_steps), window_(window_size) {}

  template <typename T>
  void observe(std::int64_t step, const Model<T>& m, bool force = false) {
    if (!force && every_ > 0 && step % every_ != 0) return;
    if (!report.series.empty() && report.series.back().step >= step) return;
    Grid embed = materialize_embedding(m, m.spec.input_grid);
    report.add(step, window_similarity(embed, window_));
  }

  SimilarityReport report;

 private:
  int every_;
  int window_;
};

// CSV columns: step, window_similarity, embed_mode, task, seed. A leading
// comment row carries the config hash and seed.
void write_similarity_csv(const std::string& path, const SimilarityReport& report,
                          std::uint64_t config_hash);
SimilarityReport read_similarity_csv(const std::string& path);

// Min-max-normalized channel as a binary PGM (P5); a constant channel maps to
// mid-gray 127. The comment line carries config hash and seed.
void export_channel_image(const Grid& embed, int channel, const std::string& path,
                          std::uint64_t config_hash, std::uint64_t seed);

// Token-to-token cosine matrix of a square embedding part as CSV (row i =
// similarities of token i).
void export_token_maps(const Grid& part, const std::string& path,
                       std::uint64_t config_hash, std::uint64_t seed);

}  // namespace abswin
