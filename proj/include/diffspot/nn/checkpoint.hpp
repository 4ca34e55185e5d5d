#ifndef DIFFSPOT_NN_CHECKPOINT_HPP_
#define DIFFSPOT_NN_CHECKPOINT_HPP_

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffspot/arch.hpp"
#include "diffspot/nn/tensor.hpp"

namespace diffspot::nn {

// Single-file checkpoint: 8-byte magic, little-endian u64 manifest length,
// JSON manifest (arch + tensor names/shapes in storage order), then the raw
// float32 data of every tensor back to back.
inline constexpr char kCheckpointMagic[8] = {'D', 'S', 'P', 'O',
                                             'T', 'C', 'K', '1'};

inline nlohmann::ordered_json arch_to_json(const ArchConfig& c) {
  return {{"concat_index", c.concat_index},
          {"width_factor", width_fraction_string(c.width_factor)},
          {"input_scale", c.input_scale}};
}

inline ArchConfig arch_from_json(const nlohmann::ordered_json& j) {
  ArchConfig c;
  c.concat_index = j.at("concat_index").get<int>();
  c.width_factor = parse_width_fraction(j.at("width_factor").get<std::string>());
  c.input_scale = j.value("input_scale", 600);
  c.validate();
  return c;
}

template <typename T>
void save_checkpoint(const std::string& path, const ArchConfig& arch,
                     const std::vector<ParamPtr<T>>& params,
                     const nlohmann::ordered_json& extra = {}) {
  nlohmann::ordered_json manifest;
  manifest["arch"] = arch_to_json(arch);
  manifest["dtype"] = "float32";
  auto tensors = nlohmann::ordered_json::array();
  for (const auto& p : params)
    tensors.push_back({{"name", p->name}, {"shape", p->value.shape}});
  manifest["tensors"] = tensors;
  if (!extra.is_null() && !extra.empty()) manifest["extra"] = extra;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::string m = manifest.dump();
  const std::uint64_t len = m.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((len >> (8 * i)) & 0xff);
  out.write(lenbuf, 8);
  out.write(m.data(), static_cast<std::streamsize>(m.size()));
  std::vector<float> buf;
  for (const auto& p : params) {
    buf.resize(p->value.numel());
    for (std::size_t i = 0; i < buf.size(); ++i)
      buf[i] = static_cast<float>(p->value.data[i]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw IoError("short write on checkpoint: " + path);
}

struct CheckpointHeader {
  ArchConfig arch;
  nlohmann::ordered_json manifest;
  std::streampos data_start;
};

inline CheckpointHeader read_checkpoint_header(std::ifstream& in,
                                               const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw IoError("not a checkpoint file: " + path);
  char lenbuf[8];
  in.read(lenbuf, 8);
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i)
    len |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i]))
           << (8 * i);
  std::string m(len, '\0');
  in.read(m.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint manifest: " + path);
  CheckpointHeader h;
  h.manifest = nlohmann::ordered_json::parse(m);
  h.arch = arch_from_json(h.manifest.at("arch"));
  h.data_start = in.tellg();
  return h;
}

inline ArchConfig peek_checkpoint_arch(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path);
  return read_checkpoint_header(in, path).arch;
}

// Loads into an existing parameter list; names and shapes must match the
// file exactly (same storage order).
template <typename T>
ArchConfig load_checkpoint(const std::string& path,
                           const std::vector<ParamPtr<T>>& params,
                           nlohmann::ordered_json* extra_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path);
  const CheckpointHeader h = read_checkpoint_header(in, path);
  const auto& tensors = h.manifest.at("tensors");
  if (tensors.size() != params.size())
    throw ShapeMismatch("checkpoint stores " + std::to_string(tensors.size()) +
                        " tensors, model has " + std::to_string(params.size()));
  std::vector<float> buf;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = tensors[i].at("name").get<std::string>();
    const auto shape = tensors[i].at("shape").get<std::vector<int>>();
    if (name != params[i]->name)
      throw ShapeMismatch("checkpoint tensor '" + name + "' does not match '" +
                          params[i]->name + "'");
    if (shape != params[i]->value.shape)
      throw ShapeMismatch("shape of '" + name + "' differs from the model");
    buf.resize(params[i]->value.numel());
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw IoError("truncated checkpoint data: " + path);
    for (std::size_t k = 0; k < buf.size(); ++k)
      params[i]->value.data[k] = static_cast<T>(buf[k]);
  }
  if (extra_out) *extra_out = h.manifest.value("extra", nlohmann::ordered_json{});
  return h.arch;
}

// Overrides only the parameters whose names appear in the file (used for
// loading externally pretrained pre-merge weights); every matched name must
// agree in shape.
template <typename T>
int load_checkpoint_subset(const std::string& path,
                           const std::vector<ParamPtr<T>>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint: " + path);
  const CheckpointHeader h = read_checkpoint_header(in, path);
  int loaded = 0;
  std::vector<float> buf;
  for (const auto& entry : h.manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int>>();
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    buf.resize(n);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(n * sizeof(float)));
    if (!in) throw IoError("truncated checkpoint data: " + path);
    for (const auto& p : params) {
      if (p->name != name) continue;
      if (p->value.shape != shape)
        throw ShapeMismatch("pretrained tensor '" + name +
                            "' does not fit this width/merge configuration");
      for (std::size_t k = 0; k < n; ++k) p->value.data[k] = static_cast<T>(buf[k]);
      ++loaded;
    }
  }
  return loaded;
}

}  // namespace diffspot::nn

#endif  // DIFFSPOT_NN_CHECKPOINT_HPP_
