#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmalign/core/nn.hpp"

namespace dmalign {

using json = nlohmann::json;

/// Stable 64-bit hash of a JSON value (keys are sorted by nlohmann::json).
inline std::uint64_t json_hash(const json& j) {
  const std::string s = j.dump();
  return fnv1a(s.data(), s.size());
}

// Checkpoint layout: "DMALCKPT", u32 version, u64 header length, JSON header,
// then every tensor listed in header["tensors"] as raw little-endian float32.

struct Checkpoint {
  json meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  [[nodiscard]] const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return &t;
    }
    return nullptr;
  }
};

inline constexpr char kCheckpointMagic[8] = {'D', 'M', 'A', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  json header = ck.meta;
  json list = json::array();
  for (const auto& [name, t] : ck.tensors) {
    const Shape s = t.shape();
    list.push_back({{"name", name}, {"shape", {s.n, s.c, s.h, s.w}}});
  }
  header["tensors"] = list;
  const std::string hs = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint32_t ver = kCheckpointVersion;
    out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    const std::uint64_t len = hs.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : ck.tensors) {
      out.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    if (!out) throw IoError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  std::uint32_t ver = 0;
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || ver != kCheckpointVersion || len > (1ULL << 30)) {
    throw IoError("unsupported checkpoint header in " + path.string());
  }
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header in " + path.string());
  Checkpoint ck;
  try {
    ck.meta = json::parse(hs);
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  for (const auto& entry : ck.meta.at("tensors")) {
    const auto sh = entry.at("shape");
    Tensor t(Shape{sh[0].get<int>(), sh[1].get<int>(), sh[2].get<int>(), sh[3].get<int>()});
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw IoError("truncated tensor data in " + path.string());
    ck.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  ck.meta.erase("tensors");
  return ck;
}

/// Packs a parameter set (prefixed names) into a checkpoint.
inline void append_parameters(Checkpoint& ck, const nn::ParameterSet& ps, const std::string& prefix) {
  for (std::size_t i = 0; i < ps.size(); ++i) ck.tensors.emplace_back(prefix + ps.name(i), ps[i].value());
}

/// Loads every parameter of `ps` from the checkpoint; all must be present.
inline void load_parameters(const Checkpoint& ck, nn::ParameterSet& ps, const std::string& prefix) {
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Tensor* t = ck.find(prefix + ps.name(i));
    if (!t) throw IoError("checkpoint is missing parameter " + prefix + ps.name(i));
    ps.assign(ps.name(i), *t);
  }
}

}  // namespace dmalign
