#include "abswin/analysis.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace abswin {

namespace {

std::string hash_comment(std::uint64_t config_hash, std::uint64_t seed) {
  char buf[80];
  std::snprintf(buf, sizeof(buf), "# config_hash=%016" PRIx64 " seed=%" PRIu64,
                config_hash, seed);
  return buf;
}

}  // namespace

void write_similarity_csv(const std::string& path, const SimilarityReport& report,
                          std::uint64_t config_hash) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_similarity_csv: cannot open " + path);
  os << hash_comment(config_hash, report.seed) << "\n";
  os << "step,window_similarity,embed_mode,task,seed\n";
  char buf[64];
  for (const SimilarityPoint& p : report.series) {
    std::snprintf(buf, sizeof(buf), "%.12g", p.window_similarity);
    os << p.step << ',' << buf << ',' << report.embed_mode << ',' << report.task
       << ',' << report.seed << "\n";
  }
  if (!os) throw std::runtime_error("write_similarity_csv: write failed for " + path);
}

SimilarityReport read_similarity_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_similarity_csv: cannot open " + path);
  SimilarityReport r;
  std::string line;
  bool header_seen = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line.rfind("step,", 0) != 0) {
        throw std::runtime_error("read_similarity_csv: missing header in " + path);
      }
      header_seen = true;
      continue;
    }
    std::istringstream ss(line);
    std::string field;
    SimilarityPoint p;
    std::getline(ss, field, ',');
    p.step = std::stoll(field);
    std::getline(ss, field, ',');
    p.window_similarity = std::stod(field);
    std::getline(ss, r.embed_mode, ',');
    std::getline(ss, r.task, ',');
    std::getline(ss, field, ',');
    r.seed = std::stoull(field);
    r.add(p.step, p.window_similarity);
  }
  return r;
}

void export_channel_image(const Grid& embed, int channel, const std::string& path,
                          std::uint64_t config_hash, std::uint64_t seed) {
  if (channel < 0 || channel >= embed.channels) {
    throw std::invalid_argument("export_channel_image: bad channel index");
  }
  float lo = embed.at(0, 0, channel), hi = lo;
  for (int y = 0; y < embed.height; ++y)
    for (int x = 0; x < embed.width; ++x) {
      const float v = embed.at(y, x, channel);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("export_channel_image: cannot open " + path);
  os << "P5\n"
     << hash_comment(config_hash, seed) << "\n"
     << embed.width << ' ' << embed.height << "\n255\n";
  for (int y = 0; y < embed.height; ++y)
    for (int x = 0; x < embed.width; ++x) {
      unsigned char byte = 127;
      if (hi > lo) {
        const double t = (embed.at(y, x, channel) - lo) / (static_cast<double>(hi) - lo);
        byte = static_cast<unsigned char>(std::lround(255.0 * t));
      }
      os.put(static_cast<char>(byte));
    }
  if (!os) throw std::runtime_error("export_channel_image: write failed for " + path);
}

void export_token_maps(const Grid& part, const std::string& path,
                       std::uint64_t config_hash, std::uint64_t seed) {
  Grid sim = token_similarity_maps(part);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("export_token_maps: cannot open " + path);
  os << hash_comment(config_hash, seed) << "\n";
  char buf[64];
  for (int i = 0; i < sim.height; ++i) {
    for (int j = 0; j < sim.width; ++j) {
      std::snprintf(buf, sizeof(buf), "%.9g", sim.at(i, j, 0));
      os << buf << (j + 1 < sim.width ? "," : "\n");
    }
  }
  if (!os) throw std::runtime_error("export_token_maps: write failed for " + path);
}

}  // namespace abswin
