#include "abswin/data.hpp"

#include <cmath>

namespace abswin {

namespace {

void add_noise(Grid& img, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, stddev);
  for (float& v : img.data) v += static_cast<float>(noise(rng));
}

// Marker content is identical at every position: alternating-sign amplitude
// across channels.
int place_marker(Grid& img, double amplitude, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pos(0, img.tokens() - 1);
  const int token = pos(rng);
  const int y = token / img.width, x = token % img.width;
  for (int c = 0; c < img.channels; ++c) {
    img.at(y, x, c) = static_cast<float>((c % 2 == 0 ? 1.0 : -1.0) * amplitude);
  }
  return token;
}

int region_label(int token, int grid, int regions) {
  const int y = token / grid, x = token % grid;
  const int ry = y * regions / grid, rx = x * regions / grid;
  return ry * regions + rx;
}

}  // namespace

Sample make_posprobe_sample(const DatasetConfig& cfg, std::mt19937_64& rng) {
  Sample s;
  s.image = Grid(cfg.grid, cfg.grid, cfg.channels);
  add_noise(s.image, cfg.noise_stddev, rng);
  const int token = place_marker(s.image, cfg.marker_amplitude, rng);
  s.label = region_label(token, cfg.grid, cfg.label_regions);
  return s;
}

Sample make_field_sample(const DatasetConfig& cfg, std::mt19937_64& rng) {
  Sample s;
  s.image = Grid(cfg.grid, cfg.grid, cfg.channels);

  std::uniform_int_distribution<int> freq(1, 3);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * 3.14159265358979323846);
  std::normal_distribution<double> weight(0.0, cfg.field_amplitude /
                                                   std::sqrt(static_cast<double>(
                                                       std::max(1, cfg.field_components))));
  for (int k = 0; k < cfg.field_components; ++k) {
    const double fu = freq(rng), fv = freq(rng), ph = phase(rng);
    std::vector<double> wc(static_cast<std::size_t>(cfg.channels));
    for (double& w : wc) w = weight(rng);
    for (int y = 0; y < cfg.grid; ++y) {
      for (int x = 0; x < cfg.grid; ++x) {
        const double v =
            std::sin(2.0 * 3.14159265358979323846 * (fu * x + fv * y) / cfg.grid + ph);
        for (int c = 0; c < cfg.channels; ++c) {
          s.image.at(y, x, c) += static_cast<float>(wc[static_cast<std::size_t>(c)] * v);
        }
      }
    }
  }
  add_noise(s.image, cfg.noise_stddev, rng);
  const int token = place_marker(s.image, cfg.marker_amplitude, rng);
  s.label = region_label(token, cfg.grid, cfg.label_regions);
  return s;
}

Dataset::Dataset(Kind kind, const DatasetConfig& cfg) : cfg_(cfg) {
  if (cfg.samples < 5 || cfg.grid < 1) {
    throw std::invalid_argument("Dataset: too few samples or empty grid");
  }
  std::mt19937_64 rng(cfg.seed);
  samples_.reserve(static_cast<std::size_t>(cfg.samples));
  for (int i = 0; i < cfg.samples; ++i) {
    samples_.push_back(kind == Kind::posprobe ? make_posprobe_sample(cfg, rng)
                                              : make_field_sample(cfg, rng));
  }
  train_count_ = cfg.samples * 4 / 5;
}

}  // namespace abswin
