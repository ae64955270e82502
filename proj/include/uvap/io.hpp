#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "uvap/rng.hpp"
#include "uvap/tensor.hpp"

namespace uvap::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

// All binary payloads are raw 32-bit little-endian IEEE-754, packed explicitly
// so the format does not depend on host endianness.

inline void pack_f32le(float v, unsigned char out[4]) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  out[0] = static_cast<unsigned char>(bits & 0xff);
  out[1] = static_cast<unsigned char>((bits >> 8) & 0xff);
  out[2] = static_cast<unsigned char>((bits >> 16) & 0xff);
  out[3] = static_cast<unsigned char>((bits >> 24) & 0xff);
}

inline float unpack_f32le(const unsigned char in[4]) {
  uint32_t bits = static_cast<uint32_t>(in[0]) | (static_cast<uint32_t>(in[1]) << 8) |
                  (static_cast<uint32_t>(in[2]) << 16) | (static_cast<uint32_t>(in[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

inline std::vector<unsigned char> doubles_to_f32le(const std::vector<double>& xs) {
  std::vector<unsigned char> out(xs.size() * 4);
  for (size_t i = 0; i < xs.size(); ++i) pack_f32le(static_cast<float>(xs[i]), &out[i * 4]);
  return out;
}

inline std::vector<double> f32le_to_doubles(const unsigned char* p, size_t count) {
  std::vector<double> out(count);
  for (size_t i = 0; i < count; ++i) out[i] = static_cast<double>(unpack_f32le(p + i * 4));
  return out;
}

inline std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path.string());
  in.seekg(0, std::ios::end);
  auto n = static_cast<size_t>(in.tellg());
  in.seekg(0);
  std::vector<unsigned char> buf(n);
  if (n > 0) in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("failed reading file: " + path.string());
  return buf;
}

// Atomic write: temp file in the same directory, then rename.
inline void write_file_atomic(const fs::path& path, const void* data, size_t n) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + tmp.string());
    if (n > 0) out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!out) throw std::runtime_error("failed writing: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline void write_file_atomic(const fs::path& path, const std::vector<unsigned char>& buf) {
  write_file_atomic(path, buf.data(), buf.size());
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

inline uint64_t file_hash(const fs::path& path) {
  auto buf = read_file(path);
  return fnv1a64(buf.data(), buf.size());
}

inline std::string hash_hex(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// Checkpoint container: 8-byte magic, u32 LE header length, JSON header,
// concatenated f32le payloads in header order.
// ---------------------------------------------------------------------------

struct NamedBlob {
  std::string name;
  std::vector<int> shape;
  std::vector<double> data;
};

inline void write_checkpoint(const fs::path& path, const char magic[8], json header,
                             const std::vector<NamedBlob>& blobs) {
  json entries = json::array();
  for (const auto& b : blobs) {
    json e;
    e["name"] = b.name;
    e["shape"] = b.shape;
    entries.push_back(e);
  }
  header["entries"] = entries;
  std::string hs = header.dump();
  std::vector<unsigned char> buf;
  buf.reserve(12 + hs.size());
  buf.insert(buf.end(), magic, magic + 8);
  uint32_t hl = static_cast<uint32_t>(hs.size());
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>((hl >> (8 * i)) & 0xff));
  buf.insert(buf.end(), hs.begin(), hs.end());
  for (const auto& b : blobs) {
    auto payload = doubles_to_f32le(b.data);
    buf.insert(buf.end(), payload.begin(), payload.end());
  }
  write_file_atomic(path, buf);
}

struct Checkpoint {
  json header;
  std::vector<NamedBlob> blobs;
};

inline Checkpoint read_checkpoint(const fs::path& path, const char magic[8]) {
  auto buf = read_file(path);
  if (buf.size() < 12 || std::memcmp(buf.data(), magic, 8) != 0)
    throw std::runtime_error("checkpoint " + path.string() + ": bad magic");
  uint32_t hl = 0;
  for (int i = 0; i < 4; ++i) hl |= static_cast<uint32_t>(buf[8 + i]) << (8 * i);
  if (buf.size() < 12 + static_cast<size_t>(hl))
    throw std::runtime_error("checkpoint " + path.string() + ": truncated header");
  json header;
  try {
    header = json::parse(buf.begin() + 12, buf.begin() + 12 + hl);
  } catch (const std::exception& e) {
    throw std::runtime_error("checkpoint " + path.string() + ": invalid header JSON: " + e.what());
  }
  if (!header.contains("entries") || !header["entries"].is_array())
    throw std::runtime_error("checkpoint " + path.string() + ": header missing field 'entries'");
  Checkpoint ck;
  size_t off = 12 + hl;
  for (const auto& e : header["entries"]) {
    if (!e.contains("name") || !e.contains("shape"))
      throw std::runtime_error("checkpoint " + path.string() +
                               ": entry missing field 'name' or 'shape'");
    NamedBlob b;
    b.name = e["name"].get<std::string>();
    b.shape = e["shape"].get<std::vector<int>>();
    size_t count = static_cast<size_t>(Tensor::numel_of(b.shape));
    if (off + count * 4 > buf.size())
      throw std::runtime_error("checkpoint " + path.string() + ": truncated payload for '" +
                               b.name + "'");
    b.data = f32le_to_doubles(buf.data() + off, count);
    off += count * 4;
    ck.blobs.push_back(std::move(b));
  }
  if (off != buf.size())
    throw std::runtime_error("checkpoint " + path.string() + ": trailing bytes after payload");
  ck.header = std::move(header);
  return ck;
}

}  // namespace uvap::io
