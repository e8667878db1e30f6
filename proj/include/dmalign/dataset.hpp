#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "dmalign/scene_sim.hpp"

// On-disk dataset layout:
//   <root>/generator.json          generator config echo, hash, base seed, count
//   <root>/manifest.jsonl          one JSON record per sample
//   <root>/<id>/{i1,i2,igt}.png    8-bit RGB
//   <root>/<id>/{mask,occ}.png     8-bit gray, 0/255
//   <root>/<id>/{flow,flow_bwd}.flo

namespace dmalign::scene {

namespace fs = std::filesystem;

struct SampleRecord {
  std::string id;
  Subset subset = Subset::ScSf;
  std::uint64_t seed = 0;
  std::string generator_version;
  std::string config_hash;
  double camera_mag = 0.0;
  double fg_mag = 0.0;
  nlohmann::json paths;
};

inline std::string sample_id(std::size_t index) {
  std::string s = std::to_string(index);
  return std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s;
}

inline nlohmann::json record_json(const AlignmentTriplet& tr, const std::string& config_hash) {
  return {{"id", tr.id},
          {"subset", to_string(tr.subset)},
          {"seed", tr.seed},
          {"generator_version", kGeneratorVersion},
          {"config_hash", config_hash},
          {"camera_mag", tr.camera_mag},
          {"fg_mag", tr.fg_mag},
          {"paths",
           {{"i1", tr.id + "/i1.png"},
            {"i2", tr.id + "/i2.png"},
            {"igt", tr.id + "/igt.png"},
            {"mask", tr.id + "/mask.png"},
            {"occ", tr.id + "/occ.png"},
            {"flow", tr.id + "/flow.flo"},
            {"flow_bwd", tr.id + "/flow_bwd.flo"}}}};
}

inline void write_sample(const fs::path& root, const AlignmentTriplet& tr) {
  const fs::path dir = root / tr.id;
  fs::create_directories(dir);
  write_png(dir / "i1.png", tr.i1);
  write_png(dir / "i2.png", tr.i2);
  write_png(dir / "igt.png", tr.igt);
  write_png(dir / "mask.png", tr.mask_gt);
  write_png(dir / "occ.png", tr.occ_gt);
  write_flo(dir / "flow.flo", tr.flow_gt);
  write_flo(dir / "flow_bwd.flo", tr.flow_bwd);
}

/// Writes samples plus manifest; returns the manifest records.
inline std::vector<nlohmann::json> write_dataset(const std::vector<AlignmentTriplet>& triplets,
                                                 const fs::path& root, const GeneratorConfig& cfg,
                                                 std::uint64_t base_seed) {
  fs::create_directories(root);
  const std::string hash = hex64(cfg.hash());
  std::vector<nlohmann::json> records;
  std::ofstream man(root / "manifest.jsonl");
  if (!man) throw IoError("cannot write manifest in " + root.string());
  for (const auto& tr : triplets) {
    write_sample(root, tr);
    records.push_back(record_json(tr, hash));
    man << records.back().dump() << "\n";
  }
  std::ofstream gen(root / "generator.json");
  gen << nlohmann::json{{"config", cfg.to_json()},
                        {"config_hash", hash},
                        {"base_seed", base_seed},
                        {"count", triplets.size()},
                        {"generator_version", kGeneratorVersion}}
             .dump(2)
      << "\n";
  if (!man || !gen) throw IoError("short write in " + root.string());
  return records;
}

/// Generates `count` samples with per-sample seeds derive_seed(base_seed, i)
/// and streams them to disk.
inline void generate_dataset(const GeneratorConfig& cfg, std::size_t count, std::uint64_t base_seed,
                             const fs::path& root,
                             const std::function<void(std::size_t)>& progress = {}) {
  cfg.validate();
  fs::create_directories(root);
  const std::string hash = hex64(cfg.hash());
  std::ofstream man(root / "manifest.jsonl");
  if (!man) throw IoError("cannot write manifest in " + root.string());
  for (std::size_t i = 0; i < count; ++i) {
    AlignmentTriplet tr = generate_triplet(cfg, derive_seed(base_seed, i));
    tr.id = sample_id(i);
    write_sample(root, tr);
    man << record_json(tr, hash).dump() << "\n";
    if (progress) progress(i);
  }
  std::ofstream gen(root / "generator.json");
  gen << nlohmann::json{{"config", cfg.to_json()},
                        {"config_hash", hash},
                        {"base_seed", base_seed},
                        {"count", count},
                        {"generator_version", kGeneratorVersion}}
             .dump(2)
      << "\n";
  if (!man || !gen) throw IoError("short write in " + root.string());
}

/// Lazily loaded dataset view over a manifest.
class Dataset {
 public:
  explicit Dataset(fs::path root) : root_(std::move(root)) {
    std::ifstream gen(root_ / "generator.json");
    if (!gen) throw IoError("dataset " + root_.string() + ": missing generator.json");
    try {
      gen_ = nlohmann::json::parse(gen);
      config_ = GeneratorConfig::from_json(gen_.at("config"));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("dataset " + root_.string() + ": corrupt generator.json: " + e.what());
    }
    std::ifstream man(root_ / "manifest.jsonl");
    if (!man) throw IoError("dataset " + root_.string() + ": missing manifest.jsonl");
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(man, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        SampleRecord r;
        r.id = j.at("id").get<std::string>();
        r.subset = subset_from_string(j.at("subset").get<std::string>());
        r.seed = j.at("seed").get<std::uint64_t>();
        r.generator_version = j.at("generator_version").get<std::string>();
        r.config_hash = j.at("config_hash").get<std::string>();
        r.camera_mag = j.value("camera_mag", 0.0);
        r.fg_mag = j.value("fg_mag", 0.0);
        r.paths = j.at("paths");
        records_.push_back(std::move(r));
      } catch (const nlohmann::json::exception& e) {
        throw IoError("dataset " + root_.string() + ": corrupt manifest line " + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  [[nodiscard]] std::size_t size() const { return records_.size(); }
  [[nodiscard]] const SampleRecord& record(std::size_t i) const { return records_.at(i); }
  [[nodiscard]] const GeneratorConfig& config() const { return config_; }
  [[nodiscard]] std::string config_hash() const { return gen_.at("config_hash").get<std::string>(); }
  [[nodiscard]] const fs::path& root() const { return root_; }
  [[nodiscard]] int width() const { return config_.width; }
  [[nodiscard]] int height() const { return config_.height; }

  [[nodiscard]] AlignmentTriplet load(std::size_t i) const {
    const SampleRecord& r = record(i);
    auto path = [&](const char* key) { return root_ / r.paths.at(key).get<std::string>(); };
    AlignmentTriplet tr;
    try {
      tr.id = r.id;
      tr.seed = r.seed;
      tr.subset = r.subset;
      tr.camera_mag = r.camera_mag;
      tr.fg_mag = r.fg_mag;
      tr.i1 = read_png(path("i1"), 3);
      tr.i2 = read_png(path("i2"), 3);
      tr.igt = read_png(path("igt"), 3);
      tr.mask_gt = read_png(path("mask"), 1);
      tr.occ_gt = read_png(path("occ"), 1);
      tr.flow_gt = read_flo(path("flow"));
      tr.flow_bwd = read_flo(path("flow_bwd"));
    } catch (const std::exception& e) {
      throw IoError("sample " + r.id + ": " + e.what());
    }
    return tr;
  }

 private:
  fs::path root_;
  nlohmann::json gen_;
  GeneratorConfig config_;
  std::vector<SampleRecord> records_;
};

inline std::vector<AlignmentTriplet> read_dataset(const fs::path& root) {
  Dataset ds(root);
  std::vector<AlignmentTriplet> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) out.push_back(ds.load(i));
  return out;
}

}  // namespace dmalign::scene
