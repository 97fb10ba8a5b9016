#pragma once

// Checkpoints: <dir>/model.json (manifest) + <dir>/model.bin (raw tensors).
//
// The manifest lists every tensor in blob order with its shape, dtype and
// byte offset. The blob is little-endian binary64, independent of host order.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "transolver/error.hpp"
#include "transolver/model.hpp"

namespace transolver {

inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {

inline void put_f64_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double get_f64_le(const std::string& in, std::size_t offset) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  os.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!os) throw std::runtime_error("write failed for '" + path.string() + "'");
}

// Appends a tensor to the blob and records it in the manifest table.
inline void pack_tensor(nlohmann::ordered_json& table, std::string& blob, const std::string& name,
                        const Matrix<double>& t) {
  table[name] = {{"shape", {t.rows(), t.cols()}}, {"dtype", "f64"}, {"byte_offset", blob.size()}};
  for (double v : t.data()) put_f64_le(blob, v);
}

inline Matrix<double> unpack_tensor(const nlohmann::ordered_json& table, const std::string& blob,
                                    const std::string& name) {
  if (!table.contains(name)) throw FormatError("tensor '" + name + "' missing from manifest", 0, 0);
  const auto& e = table.at(name);
  if (e.at("dtype").get<std::string>() != "f64") throw FormatError("tensor '" + name + "' is not f64", 0, 0);
  const auto rows = e.at("shape").at(0).get<std::size_t>();
  const auto cols = e.at("shape").at(1).get<std::size_t>();
  const auto off = e.at("byte_offset").get<std::size_t>();
  if (off + rows * cols * 8 > blob.size())
    throw FormatError("tensor '" + name + "' extends past the end of the blob", 0, off);
  Matrix<double> t(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = get_f64_le(blob, off + 8 * i);
  return t;
}

}  // namespace detail

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  return {{"layers", c.layers},         {"heads", c.heads},     {"channels", c.channels},
          {"slices", c.slices},         {"in_dim", c.in_dim},   {"out_dim", c.out_dim},
          {"ffn_hidden", c.ffn_hidden}, {"mode", to_string(c.mode)}, {"tile_size", c.tile_size},
          {"bias", c.bias}};
}

inline ModelConfig config_from_json(const nlohmann::ordered_json& j) {
  ModelConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.slices = j.at("slices").get<std::size_t>();
  c.in_dim = j.at("in_dim").get<std::size_t>();
  c.out_dim = j.at("out_dim").get<std::size_t>();
  c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
  c.mode = parse_attn_mode(j.at("mode").get<std::string>());
  c.tile_size = j.at("tile_size").get<std::size_t>();
  c.bias = j.at("bias").get<bool>();
  c.validate();
  return c;
}

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
};

inline void save_checkpoint(const std::filesystem::path& dir, const ModelConfig& cfg, const ModelParams& p) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["config"] = config_to_json(cfg);
  manifest["blob"] = "model.bin";
  nlohmann::ordered_json table = nlohmann::ordered_json::object();
  std::string blob;
  p.for_each_stored_tensor([&](const std::string& name, const Matrix<double>& t, bool) {
    detail::pack_tensor(table, blob, name, t);
  });
  manifest["tensors"] = std::move(table);
  detail::write_file(dir / "model.bin", blob);
  detail::write_file(dir / "model.json", manifest.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::ordered_json::parse(detail::read_file(dir / "model.json"));
  if (manifest.at("format_version").get<int>() != kCheckpointFormatVersion)
    throw FormatError("unsupported checkpoint format version", 0, 0);
  Checkpoint ck;
  ck.config = config_from_json(manifest.at("config"));
  const std::string blob = detail::read_file(dir / manifest.at("blob").get<std::string>());
  const auto& table = manifest.at("tensors");
  // Shape template from the config; the coordinate dimension comes from the stored normalizer.
  const std::size_t coord_dims = table.at("normalizer.lo").at("shape").at(1).get<std::size_t>();
  ck.params = ModelParams::init(ck.config, 0, coord_dims);
  ck.params.for_each_stored_tensor([&](const std::string& name, Matrix<double>& t, bool) {
    Matrix<double> loaded = detail::unpack_tensor(table, blob, name);
    if (loaded.rows() != t.rows() || loaded.cols() != t.cols())
      throw FormatError("tensor '" + name + "' has shape " + loaded.shape_str() + ", config implies " +
                            t.shape_str(),
                        0, 0);
    t = std::move(loaded);
  });
  return ck;
}

}  // namespace transolver
