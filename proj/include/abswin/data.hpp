#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "abswin/grid.hpp"

namespace abswin {

// Synthetic experiment data. The position probe places a fixed marker pattern
// at one random token over an i.i.d.-noise background; the label is the r x r
// region the marker falls in, so the task is solvable only through positional
// information. The MAE corpus adds smooth random sinusoid fields so masked
// windows are predictable from kept ones.
struct DatasetConfig {
  int samples = 2048;
  int grid = 16;  // tokens per side
  int channels = 3;
  double noise_stddev = 0.1;
  double marker_amplitude = 2.0;
  int label_regions = 2;  // r: K = r * r classes (2 -> quadrants)
  int field_components = 3;
  double field_amplitude = 1.0;
  std::uint64_t seed = 0;

  int num_classes() const { return label_regions * label_regions; }
};

struct Sample {
  Grid image;
  int label = 0;
};

Sample make_posprobe_sample(const DatasetConfig& cfg, std::mt19937_64& rng);
Sample make_field_sample(const DatasetConfig& cfg, std::mt19937_64& rng);

// Pre-generated dataset with a deterministic 80/20 train/eval split by index.
class Dataset {
 public:
  enum class Kind { posprobe, fields };

  Dataset(Kind kind, const DatasetConfig& cfg);

  const Sample& train(int i) const { return samples_[static_cast<std::size_t>(i % train_count_)]; }
  const Sample& eval(int i) const {
    return samples_[static_cast<std::size_t>(train_count_ + i % eval_count())];
  }
  int train_count() const { return train_count_; }
  int eval_count() const { return static_cast<int>(samples_.size()) - train_count_; }
  const DatasetConfig& config() const { return cfg_; }

 private:
  DatasetConfig cfg_;
  std::vector<Sample> samples_;
  int train_count_ = 0;
};

}  // namespace abswin
