#include "dyadgen/container.hpp"

#include <cstring>
#include <fstream>

namespace dyadgen::io {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_bytes(const fs::path& path, const void* data, size_t len) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for write: " + path.string());
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
  if (!f) throw FormatError("write failed: " + path.string());
}

std::vector<char> read_bytes(const fs::path& path, size_t expect) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw FormatError("cannot open: " + path.string());
  size_t len = static_cast<size_t>(f.tellg());
  if (len != expect)
    throw FormatError("size mismatch for " + path.string() + ": expected " +
                      std::to_string(expect) + " bytes, found " + std::to_string(len));
  std::vector<char> buf(len);
  f.seekg(0);
  f.read(buf.data(), static_cast<std::streamsize>(len));
  if (!f) throw FormatError("read failed: " + path.string());
  return buf;
}

}  // namespace

void write_f32(const fs::path& path, const Tensor& t) {
  std::vector<float> buf(t.numel());
  for (long long i = 0; i < t.numel(); ++i) buf[i] = static_cast<float>(t[i]);
  write_bytes(path, buf.data(), buf.size() * sizeof(float));
}

void write_f64(const fs::path& path, const Tensor& t) {
  write_bytes(path, t.data(), static_cast<size_t>(t.numel()) * sizeof(double));
}

void write_u8(const fs::path& path, const std::vector<uint8_t>& v) {
  write_bytes(path, v.data(), v.size());
}

Tensor read_f32(const fs::path& path, const std::vector<int>& shape) {
  long long n = Tensor::numel_of(shape);
  auto bytes = read_bytes(path, static_cast<size_t>(n) * sizeof(float));
  Tensor t(shape);
  const float* p = reinterpret_cast<const float*>(bytes.data());
  for (long long i = 0; i < n; ++i) t[i] = static_cast<double>(p[i]);
  return t;
}

Tensor read_f64(const fs::path& path, const std::vector<int>& shape) {
  long long n = Tensor::numel_of(shape);
  auto bytes = read_bytes(path, static_cast<size_t>(n) * sizeof(double));
  Tensor t(shape);
  std::memcpy(t.data(), bytes.data(), static_cast<size_t>(n) * sizeof(double));
  return t;
}

std::vector<uint8_t> read_u8(const fs::path& path, size_t count) {
  auto bytes = read_bytes(path, count);
  return std::vector<uint8_t>(bytes.begin(), bytes.end());
}

uint64_t fnv1a_bytes(const void* data, size_t len, uint64_t h) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t fnv1a_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open: " + path.string());
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (f) {
    f.read(buf, sizeof(buf));
    h = fnv1a_bytes(buf, static_cast<size_t>(f.gcount()), h);
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_manifest(const fs::path& dir, const json& manifest) {
  fs::create_directories(dir);
  std::ofstream f(dir / "manifest.json");
  if (!f) throw FormatError("cannot write manifest in " + dir.string());
  f << manifest.dump(2) << "\n";
}

json read_manifest(const fs::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw FormatError("missing manifest.json in " + dir.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw FormatError("corrupt manifest.json in " + dir.string() + ": " + e.what());
  }
  return j;
}

const json& require(const json& j, const std::string& key) {
  if (!j.contains(key)) throw FormatError("manifest missing field \"" + key + "\"");
  return j.at(key);
}

void save_checkpoint(const fs::path& dir, const std::map<std::string, Tensor>& arrays,
                     const json& meta) {
  fs::create_directories(dir);
  json m;
  m["version"] = kContainerVersion;
  m["kind"] = "checkpoint";
  m["meta"] = meta;
  json arr = json::array();
  uint64_t checksum = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : arrays) {
    std::string file = name + ".f64";
    write_f64(dir / file, t);
    json e;
    e["name"] = name;
    e["dtype"] = "f64";
    e["shape"] = t.shape();
    e["file"] = file;
    arr.push_back(e);
    checksum = fnv1a_bytes(name.data(), name.size(), checksum);
    checksum = fnv1a_bytes(t.data(), sizeof(double) * t.numel(), checksum);
  }
  m["arrays"] = arr;
  m["content_checksum"] = hex64(checksum);
  write_manifest(dir, m);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  json m = read_manifest(dir);
  if (require(m, "version").get<int>() != kContainerVersion)
    throw FormatError("unsupported version in checkpoint " + dir.string());
  if (require(m, "kind").get<std::string>() != "checkpoint")
    throw FormatError("manifest field \"kind\" is not \"checkpoint\"");
  Checkpoint ck;
  ck.meta = require(m, "meta");
  uint64_t checksum = 0xcbf29ce484222325ULL;
  for (const auto& e : require(m, "arrays")) {
    std::string name = require(e, "name").get<std::string>();
    std::string dtype = require(e, "dtype").get<std::string>();
    if (dtype != "f64")
      throw FormatError("checkpoint array \"" + name + "\": unsupported dtype " + dtype);
    std::vector<int> shape = require(e, "shape").get<std::vector<int>>();
    Tensor t = read_f64(dir / require(e, "file").get<std::string>(), shape);
    checksum = fnv1a_bytes(name.data(), name.size(), checksum);
    checksum = fnv1a_bytes(t.data(), sizeof(double) * t.numel(), checksum);
    ck.arrays.emplace(std::move(name), std::move(t));
  }
  if (m.contains("content_checksum") &&
      m["content_checksum"].get<std::string>() != hex64(checksum))
    throw FormatError("checkpoint content_checksum mismatch in " + dir.string());
  return ck;
}

}  // namespace dyadgen::io
