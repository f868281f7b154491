#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dge/optimizer.hpp"
#include "dge/tensor.hpp"

namespace dge {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian");

inline constexpr char kBlobMagic[4] = {'D', 'G', 'E', '1'};

template <class T>
constexpr const char* dtype_name();
template <>
constexpr const char* dtype_name<float>() {
  return "f32";
}
template <>
constexpr const char* dtype_name<double>() {
  return "f64";
}

// Writes <json_path> (manifest: name -> shape/dtype/offset, plus arch) and
// <bin_path> ("DGE1" magic followed by raw values at the listed offsets).
template <class T>
void save_checkpoint(const std::string& json_path, const std::string& bin_path,
                     const std::vector<Param<T>>& params,
                     const nlohmann::ordered_json& arch) {
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw std::runtime_error("checkpoint: cannot write " + bin_path);
  bin.write(kBlobMagic, 4);

  nlohmann::ordered_json manifest;
  manifest["format"] = "dge-checkpoint";
  manifest["version"] = 1;
  manifest["dtype"] = dtype_name<T>();
  manifest["arch"] = arch;
  nlohmann::ordered_json tensors;
  std::uint64_t offset = 4;
  for (const auto& p : params) {
    const auto& v = p.tensor.value();
    bin.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(T)));
    nlohmann::ordered_json entry;
    entry["shape"] = p.tensor.shape();
    entry["dtype"] = dtype_name<T>();
    entry["offset"] = offset;
    tensors[p.name] = entry;
    offset += v.size() * sizeof(T);
  }
  manifest["tensors"] = tensors;
  bin.close();
  if (!bin) throw std::runtime_error("checkpoint: write failed for " + bin_path);

  std::ofstream js(json_path, std::ios::trunc);
  if (!js) throw std::runtime_error("checkpoint: cannot write " + json_path);
  js << manifest.dump(2) << "\n";
  js.close();
  if (!js) throw std::runtime_error("checkpoint: write failed for " + json_path);
}

// Fills the given parameters in place. Every parameter must appear in the
// manifest with matching shape and dtype, and vice versa. Returns the arch
// block for the caller to validate.
template <class T>
nlohmann::ordered_json load_checkpoint(const std::string& json_path,
                                       const std::string& bin_path,
                                       std::vector<Param<T>>& params) {
  std::ifstream js(json_path);
  if (!js) throw std::runtime_error("checkpoint: cannot read " + json_path);
  nlohmann::ordered_json manifest;
  js >> manifest;
  if (manifest.value("format", "") != std::string("dge-checkpoint"))
    throw std::runtime_error("checkpoint: " + json_path +
                             " is not a checkpoint manifest");
  const std::string dtype = manifest.value("dtype", "");
  if (dtype != dtype_name<T>())
    throw std::runtime_error("checkpoint: dtype " + dtype +
                             " does not match requested " + dtype_name<T>());
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != params.size())
    throw std::runtime_error("checkpoint: manifest lists " +
                             std::to_string(tensors.size()) +
                             " tensors, model has " +
                             std::to_string(params.size()));

  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw std::runtime_error("checkpoint: cannot read " + bin_path);
  char magic[4];
  bin.read(magic, 4);
  if (!bin || std::string(magic, 4) != std::string(kBlobMagic, 4))
    throw std::runtime_error("checkpoint: " + bin_path + " has no DGE1 magic");

  for (auto& p : params) {
    if (!tensors.contains(p.name))
      throw std::runtime_error("checkpoint: manifest is missing " + p.name);
    const auto& entry = tensors.at(p.name);
    const std::vector<std::size_t> shape = entry.at("shape");
    if (shape != p.tensor.shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + p.name);
    if (entry.at("dtype") != std::string(dtype_name<T>()))
      throw std::runtime_error("checkpoint: dtype mismatch for " + p.name);
    const std::uint64_t offset = entry.at("offset");
    auto& v = p.tensor.raw_value();
    bin.seekg(static_cast<std::streamoff>(offset));
    bin.read(reinterpret_cast<char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(T)));
    if (!bin)
      throw std::runtime_error("checkpoint: blob truncated reading " + p.name);
  }
  return manifest.value("arch", nlohmann::ordered_json::object());
}

}  // namespace dge
