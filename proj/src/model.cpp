#include "abswin/model.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace abswin {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'A', 'W', 'C', 'K'};
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

void put_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}

json spec_to_json(const ModelSpec& s) {
  json j;
  j["input_grid"] = s.input_grid;
  j["patch_size"] = s.patch_size;
  j["in_channels"] = s.in_channels;
  j["stage_depths"] = s.stage_depths;
  j["stage_dims"] = s.stage_dims;
  j["stage_window_sizes"] = s.stage_window_sizes;
  j["global_layer_indices"] = s.global_layer_indices;
  j["relpos_layer_indices"] = s.relpos_layer_indices;
  j["embed_mode"] = to_string(s.embed_mode);
  j["window_size"] = s.window_size;
  j["global_size"] = s.global_size;
  j["head"] = s.head == HeadKind::classify ? "classify" : "mae";
  j["num_classes"] = s.num_classes;
  j["mask_ratio"] = s.mask_ratio;
  j["heads"] = s.heads;
  j["mlp_ratio"] = s.mlp_ratio;
  j["decoder_dim"] = s.decoder_dim;
  j["decoder_depth"] = s.decoder_depth;
  return j;
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  s.input_grid = j.at("input_grid").get<int>();
  s.patch_size = j.at("patch_size").get<int>();
  s.in_channels = j.at("in_channels").get<int>();
  s.stage_depths = j.at("stage_depths").get<std::vector<int>>();
  s.stage_dims = j.at("stage_dims").get<std::vector<int>>();
  s.stage_window_sizes = j.at("stage_window_sizes").get<std::vector<int>>();
  s.global_layer_indices = j.at("global_layer_indices").get<std::vector<int>>();
  s.relpos_layer_indices = j.at("relpos_layer_indices").get<std::vector<int>>();
  s.embed_mode = embed_mode_from_string(j.at("embed_mode").get<std::string>());
  s.window_size = j.at("window_size").get<int>();
  s.global_size = j.at("global_size").get<int>();
  s.head = j.at("head").get<std::string>() == "classify" ? HeadKind::classify : HeadKind::mae;
  s.num_classes = j.at("num_classes").get<int>();
  s.mask_ratio = j.at("mask_ratio").get<double>();
  s.heads = j.at("heads").get<int>();
  s.mlp_ratio = j.at("mlp_ratio").get<double>();
  s.decoder_dim = j.at("decoder_dim").get<int>();
  s.decoder_depth = j.at("decoder_depth").get<int>();
  return s;
}

}  // namespace

void save_checkpoint_raw(const std::string& path, const ModelSpec& spec,
                         const CheckpointMeta& meta,
                         const std::vector<std::pair<std::string, GridD>>& tensors,
                         const EmbedFile& embed) {
  std::ostringstream embed_blob(std::ios::binary);
  save_embed(embed_blob, embed);
  const std::string embed_bytes = embed_blob.str();

  json manifest;
  manifest["spec"] = spec_to_json(spec);
  manifest["seed"] = meta.seed;
  manifest["extra"] = meta.extra;
  manifest["embed_offset"] = 0;
  manifest["embed_size"] = embed_bytes.size();

  std::size_t offset = embed_bytes.size();
  json tlist = json::array();
  for (const auto& [name, g] : tensors) {
    json t;
    t["name"] = name;
    t["shape"] = {g.height, g.width, g.channels};
    t["offset"] = offset;
    tlist.push_back(t);
    offset += g.size() * 8;
  }
  manifest["tensors"] = tlist;
  const std::string mbytes = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(mbytes.size()));
  os.write(mbytes.data(), static_cast<std::streamsize>(mbytes.size()));
  os.write(embed_bytes.data(), static_cast<std::streamsize>(embed_bytes.size()));
  for (const auto& [name, g] : tensors) {
    for (double v : g.data) put_f64(os, v);
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  }
  const std::uint32_t version = get_u32(is);
  if (version != kVersion) {
    throw std::runtime_error("load_checkpoint: unsupported version in " + path);
  }
  const std::uint32_t mlen = get_u32(is);
  std::string mbytes(mlen, '\0');
  is.read(mbytes.data(), mlen);
  if (!is) throw std::runtime_error("load_checkpoint: truncated manifest in " + path);
  json manifest = json::parse(mbytes);

  LoadedCheckpoint ck;
  ck.spec = spec_from_json(manifest.at("spec"));
  ck.meta.seed = manifest.at("seed").get<std::uint64_t>();
  ck.meta.extra = manifest.at("extra").get<std::map<std::string, std::string>>();

  ck.embed = load_embed(is);

  for (const json& t : manifest.at("tensors")) {
    const auto shape = t.at("shape").get<std::vector<int>>();
    GridD g(shape.at(0), shape.at(1), shape.at(2));
    for (double& v : g.data) v = get_f64(is);
    ck.tensors.emplace_back(t.at("name").get<std::string>(), std::move(g));
  }
  if (!is) throw std::runtime_error("load_checkpoint: truncated payload in " + path);
  return ck;
}

}  // namespace abswin
