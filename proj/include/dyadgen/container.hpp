#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dyadgen/tensor.hpp"

namespace dyadgen::io {

// On-disk container: a directory with manifest.json plus one raw
// little-endian binary file per array. Datasets use f32/u8 payloads;
// checkpoints use f64 so optimizer resume is exact.

inline constexpr int kContainerVersion = 1;

void write_f32(const std::filesystem::path& path, const Tensor& t);
void write_f64(const std::filesystem::path& path, const Tensor& t);
void write_u8(const std::filesystem::path& path, const std::vector<uint8_t>& v);
Tensor read_f32(const std::filesystem::path& path, const std::vector<int>& shape);
Tensor read_f64(const std::filesystem::path& path, const std::vector<int>& shape);
std::vector<uint8_t> read_u8(const std::filesystem::path& path, size_t count);

uint64_t fnv1a_bytes(const void* data, size_t len,
                     uint64_t h = 0xcbf29ce484222325ULL);
uint64_t fnv1a_file(const std::filesystem::path& path);
std::string hex64(uint64_t v);

void write_manifest(const std::filesystem::path& dir, const nlohmann::json& manifest);
nlohmann::json read_manifest(const std::filesystem::path& dir);

// Requires `manifest[key]` to exist; FormatError names the missing field.
const nlohmann::json& require(const nlohmann::json& j, const std::string& key);

// ---- checkpoint container ----

struct Checkpoint {
  std::map<std::string, Tensor> arrays;  // weights and optimizer state, f64
  nlohmann::json meta;                   // epoch, loss trace, seeds, checksum...
};

void save_checkpoint(const std::filesystem::path& dir,
                     const std::map<std::string, Tensor>& arrays,
                     const nlohmann::json& meta);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace dyadgen::io
