#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gmpstar/encoder.hpp"
#include "gmpstar/pruning.hpp"
#include "json.hpp"

namespace gmpstar {

struct CheckpointMetadata {
  std::string recipe_hash;
  std::uint64_t step = 0;
  double achieved_sparsity = 0.0;
  std::optional<double> validation_accuracy;
  nlohmann::json extra = nlohmann::json::object();

  bool operator==(const CheckpointMetadata&) const = default;
};

/// A model configuration, its named parameters, optional masks and run metadata.
///
/// On disk a checkpoint is a directory:
///   manifest.json  format tag, config, metadata, and per-tensor
///                  {name, shape, dtype, offset, count} into tensors.bin
///   tensors.bin    raw little-endian float64 values, tensors back to back
///   masks.json     (only with masks) per-mask {name, shape, offset, bits}
///                  into masks.bin
///   masks.bin      bit-packed keep flags, 1 = kept, least significant bit
///                  first, each mask starting on a byte boundary
struct Checkpoint {
  static constexpr const char* kFormat = "gmpstar-checkpoint";
  static constexpr int kVersion = 1;

  TinyEncoderConfig config;
  ParameterSet params;
  std::optional<MaskSet> masks;
  CheckpointMetadata metadata;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void append_f64_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>(bits & 0xffu));
    bits >>= 8;
  }
}

inline double read_f64_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("short write to " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline nlohmann::json metadata_to_json(const CheckpointMetadata& m) {
  nlohmann::json j{{"recipe_hash", m.recipe_hash}, {"step", m.step}, {"achieved_sparsity", m.achieved_sparsity}};
  j["validation_accuracy"] = m.validation_accuracy ? nlohmann::json(*m.validation_accuracy) : nlohmann::json(nullptr);
  j["extra"] = m.extra;
  return j;
}

inline CheckpointMetadata metadata_from_json(const nlohmann::json& j) {
  CheckpointMetadata m;
  j.at("recipe_hash").get_to(m.recipe_hash);
  j.at("step").get_to(m.step);
  j.at("achieved_sparsity").get_to(m.achieved_sparsity);
  if (!j.at("validation_accuracy").is_null()) m.validation_accuracy = j.at("validation_accuracy").get<double>();
  m.extra = j.at("extra");
  return m;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  std::string data;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : ckpt.params) {
    tensors.push_back({{"name", e.name},
                       {"shape", e.tensor.shape()},
                       {"dtype", "float64"},
                       {"offset", data.size()},
                       {"count", e.tensor.size()}});
    for (double v : e.tensor.values()) detail::append_f64_le(data, v);
  }

  nlohmann::json manifest{{"format", Checkpoint::kFormat},
                          {"version", Checkpoint::kVersion},
                          {"config", ckpt.config},
                          {"data_file", "tensors.bin"},
                          {"tensors", tensors},
                          {"metadata", detail::metadata_to_json(ckpt.metadata)},
                          {"masks_file", ckpt.masks ? nlohmann::json("masks.json") : nlohmann::json(nullptr)}};
  detail::write_file(dir / "tensors.bin", data);

  if (ckpt.masks) {
    std::string bits;
    nlohmann::json index = nlohmann::json::array();
    for (const auto& m : *ckpt.masks) {
      if (!ckpt.params.find(m.name)) throw CheckpointError("mask '" + m.name + "' has no matching parameter");
      index.push_back({{"name", m.name}, {"shape", m.shape}, {"offset", bits.size()}, {"bits", m.keep.size()}});
      const std::size_t start = bits.size();
      bits.resize(start + (m.keep.size() + 7) / 8, '\0');
      for (std::size_t j = 0; j < m.keep.size(); ++j) {
        if (m.keep[j]) bits[start + j / 8] = static_cast<char>(bits[start + j / 8] | (1u << (j % 8)));
      }
    }
    nlohmann::json masks_doc{{"bit_order", "lsb-first"}, {"data_file", "masks.bin"}, {"masks", index}};
    detail::write_file(dir / "masks.bin", bits);
    detail::write_file(dir / "masks.json", masks_doc.dump(2) + "\n");
  } else {
    fs::remove(dir / "masks.bin");
    fs::remove(dir / "masks.json");
  }
  detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  if (manifest.value("format", "") != Checkpoint::kFormat || manifest.value("version", 0) != Checkpoint::kVersion) {
    throw CheckpointError(dir.string() + " is not a version " + std::to_string(Checkpoint::kVersion) + " checkpoint");
  }
  Checkpoint ckpt;
  ckpt.config = manifest.at("config").get<TinyEncoderConfig>();
  ckpt.metadata = detail::metadata_from_json(manifest.at("metadata"));

  const std::string data = detail::read_file(dir / manifest.at("data_file").get<std::string>());
  const auto* bytes = reinterpret_cast<const unsigned char*>(data.data());
  for (const auto& t : manifest.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    if (t.at("dtype") != "float64") throw CheckpointError("tensor '" + name + "' has unsupported dtype");
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::size_t>();
    const auto count = t.at("count").get<std::size_t>();
    if (count != numel(shape) || offset + count * 8 > data.size()) {
      throw CheckpointError("tensor '" + name + "' does not fit the data file");
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = detail::read_f64_le(bytes + offset + i * 8);
    ckpt.params.add(name, Tensor(shape, std::move(values), true));
  }
  TinyEncoder check(ckpt.config, ckpt.params);  // validates names and shapes

  if (!manifest.at("masks_file").is_null()) {
    const auto doc = nlohmann::json::parse(detail::read_file(dir / manifest.at("masks_file").get<std::string>()));
    const std::string bits = detail::read_file(dir / doc.at("data_file").get<std::string>());
    std::vector<TensorMask> masks;
    for (const auto& m : doc.at("masks")) {
      TensorMask mask;
      mask.name = m.at("name").get<std::string>();
      mask.shape = m.at("shape").get<Shape>();
      const auto offset = m.at("offset").get<std::size_t>();
      const auto count = m.at("bits").get<std::size_t>();
      const Tensor* param = ckpt.params.find(mask.name);
      if (!param) throw CheckpointError("mask '" + mask.name + "' refers to no parameter");
      if (param->shape() != mask.shape || count != numel(mask.shape)) {
        throw CheckpointError("mask '" + mask.name + "' does not match its parameter shape");
      }
      if (offset + (count + 7) / 8 > bits.size()) throw CheckpointError("mask '" + mask.name + "' overruns masks.bin");
      mask.keep.resize(count);
      for (std::size_t j = 0; j < count; ++j) {
        mask.keep[j] = (static_cast<unsigned char>(bits[offset + j / 8]) >> (j % 8)) & 1u;
      }
      masks.push_back(std::move(mask));
    }
    ckpt.masks = MaskSet(std::move(masks));
  }
  return ckpt;
}

}  // namespace gmpstar
