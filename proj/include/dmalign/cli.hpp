#pragma once

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dmalign/dmalign.hpp"

namespace dmalign::cli {

namespace fs = std::filesystem;

/// Relative output paths are resolved against DMALIGN_OUTPUT_ROOT when set.
inline fs::path output_path(const std::string& p) {
  const fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("DMALIGN_OUTPUT_ROOT"); root && *root) return fs::path(root) / path;
  return path;
}

inline json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("config " + path + " is not valid JSON: " + e.what());
  }
}

inline void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

inline void require_file(const std::string& path, const char* what) {
  if (!fs::exists(path)) throw IoError(std::string(what) + " not found: " + path);
}

/// Side-by-side panel: I1 | I2 | prediction | I_gt | predicted mask | M_gt.
inline Image8 mask_panel(const scene::AlignmentTriplet& tr, const Image8& pred, const Tensor& mask) {
  const int w = tr.i1.width;
  const int h = tr.i1.height;
  Image8 panel(6 * w, h, 3);
  const Image8 m_pred = mask_to_image8(mask);
  auto blit = [&](const Image8& img, int slot) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) panel.at(slot * w + x, y, c) = img.at(x, y, img.channels == 1 ? 0 : c);
  };
  blit(tr.i1, 0);
  blit(tr.i2, 1);
  blit(pred, 2);
  blit(tr.igt, 3);
  blit(m_pred, 4);
  blit(tr.mask_gt, 5);
  return panel;
}

inline void cmd_gen_data(const std::string& config, const std::string& out, std::size_t count, std::uint64_t seed) {
  scene::GeneratorConfig cfg;
  if (!config.empty()) cfg = scene::GeneratorConfig::from_json(read_json_file(config));
  cfg.validate();
  const fs::path root = output_path(out);
  scene::generate_dataset(cfg, count, seed, root);
  std::cout << "wrote " << count << " samples to " << root.string() << "\n";
}

inline int cmd_train_codec(const std::string& data_dir, const std::string& out, const std::string& config) {
  json j = config.empty() ? json::object() : read_json_file(config);
  const codec::CodecConfig cc = codec::CodecConfig::from_json(j.value("codec", json::object()));
  const codec::CodecTrainConfig tc = codec::CodecTrainConfig::from_json(j.value("train", json::object()));
  const scene::Dataset data(data_dir);
  codec::Codec c(cc, tc.seed);
  const fs::path path = output_path(out);
  const fs::path report_path = path.string() + ".report.json";
  const json echo{{"codec", cc.to_json()}, {"train", tc.to_json()}, {"data", data_dir}, {"data_config_hash", data.config_hash()}};
  try {
    const auto rep = codec::train_codec(c, data, tc, [](const std::string& s) { std::cout << s << "\n" << std::flush; });
    c.save(path, {{"report", {{"final_psnr", rep.final_psnr}, {"steps", rep.steps}}}, {"data_config_hash", data.config_hash()}});
    write_json_file(report_path, {{"config", echo}, {"report", rep.to_json()}});
    std::cout << "codec holdout PSNR " << rep.final_psnr << " dB, saved " << path.string() << "\n";
    return 0;
  } catch (const TrainingError& e) {
    write_json_file(report_path, {{"config", echo}, {"error", e.what()}});
    throw;
  }
}

inline void cmd_train(const std::string& data_dir, const std::string& codec_path, const std::string& config,
                      const std::string& out, bool no_dmp, const std::string& param, const std::string& val_dir) {
  require_file(codec_path, "codec checkpoint");
  train::FitConfig fc = config.empty() ? train::FitConfig{} : train::FitConfig::from_json(read_json_file(config));
  if (no_dmp) fc.model.use_dmp = false;
  if (!param.empty()) fc.model.param = denoiser::parameterization_from_string(param);
  const scene::Dataset data(data_dir);
  std::optional<scene::Dataset> val;
  if (!val_dir.empty()) {
    val.emplace(val_dir);
    if (val->config_hash() != data.config_hash()) throw ConfigError("validation data was generated with a different config");
  }
  codec::Codec c = codec::Codec::load(codec_path);
  if (!c.frozen()) throw ConfigError("codec checkpoint " + codec_path + " is not frozen; run train-codec to completion first");
  AlignerModel model(std::move(c), fc.model);
  const fs::path dir = output_path(out);
  const auto rep = train::fit(model, data, fc, dir, val ? &*val : nullptr,
                              [](const std::string& s) { std::cout << s << "\n" << std::flush; });
  std::cout << "trained " << fc.steps << " steps in " << rep.seconds << " s, saved " << dir.string() << "\n";
}

inline void cmd_align(const std::string& ckpt, const std::string& i1_path, const std::string& i2_path, const std::string& out,
                      int steps, std::uint64_t seed, double eta) {
  require_file(i1_path, "image");
  require_file(i2_path, "image");
  const AlignerModel model = AlignerModel::load(ckpt);
  const Image8 i1 = read_png(i1_path, 3);
  const Image8 i2 = read_png(i2_path, 3);
  if (i1.width != i2.width || i1.height != i2.height) throw ShapeError("input images differ in size");
  const auto r = sampler::align(model, to_tensor(i1, Range::Signed), to_tensor(i2, Range::Signed), {steps, eta}, seed);
  std::vector<double> sigmas;
  for (const auto& [t, t_prev] : diffusion::stride_schedule(model.schedule().T, steps)) {
    sigmas.push_back(sampler::ddim_sigma(model.schedule(), t, t_prev, eta));
  }
  const fs::path dir = output_path(out);
  fs::create_directories(dir);
  write_png(dir / "aligned.png", to_image8(r.image, Range::Signed));
  write_png(dir / "mask.png", mask_to_image8(r.mask));
  write_json_file(dir / "align.json", {{"seed", seed},
                                       {"stride", steps},
                                       {"T", model.schedule().T},
                                       {"eta", eta},
                                       {"sigma", sigmas},
                                       {"runtime_ms", r.runtime_ms},
                                       {"denoiser_calls", r.denoiser_calls},
                                       {"i1", i1_path},
                                       {"i2", i2_path},
                                       {"ckpt", ckpt}});
  std::cout << "aligned in " << r.runtime_ms << " ms with " << r.denoiser_calls << " denoiser calls\n";
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string baseline;
  std::string name;
  bool occlusion_masked = false;
  bool save_images = false;
  int steps = 20;
  std::uint64_t seed = 0;
  std::size_t limit = 0;
  std::size_t panels = 8;
};

inline eval::EvalReport cmd_eval(const EvalArgs& a) {
  const scene::Dataset data(a.data);
  const fs::path dir = output_path(a.out);
  fs::create_directories(dir);
  const std::size_t n = a.limit ? std::min(a.limit, data.size()) : data.size();
  eval::EvalOptions opt;
  opt.occlusion_masked = a.occlusion_masked;
  std::vector<eval::MethodOutput> outputs;
  std::string method = a.name;
  json extra = json::object();

  if (!a.baseline.empty()) {
    if (a.baseline != "gt-flow-warp" && a.baseline != "identity") {
      throw ConfigError("unknown baseline '" + a.baseline + "' (expected gt-flow-warp or identity)");
    }
    if (method.empty()) method = a.baseline;
    for (std::size_t i = 0; i < n; ++i) {
      const auto tr = data.load(i);
      outputs.push_back({tr.id, a.baseline == "identity" ? eval::identity_baseline(tr) : eval::gt_flow_warp_baseline(tr)});
      if (a.save_images) write_png(dir / "pred" / (tr.id + ".png"), outputs.back().image);
    }
  } else {
    if (a.ckpt.empty()) throw ConfigError("eval needs --ckpt or --baseline");
    const AlignerModel model = AlignerModel::load(a.ckpt);
    const Checkpoint meta = read_checkpoint(fs::is_directory(a.ckpt) ? fs::path(a.ckpt) / "model.ckpt" : fs::path(a.ckpt));
    const std::string trained_on = meta.meta.value("data_config_hash", std::string());
    if (!trained_on.empty() && trained_on != data.config_hash()) {
      throw ConfigError("checkpoint was trained on generator config " + trained_on + " but " + a.data + " was generated with " +
                        data.config_hash() + "; regenerate the data with the training config");
    }
    if (method.empty()) method = model.config().use_dmp ? "aligner" : "aligner-no-dmp";
    double iou_img = 0.0;
    double iou_lat = 0.0;
    json per_sample_iou = json::object();
    for (std::size_t i = 0; i < n; ++i) {
      const auto tr = data.load(i);
      const auto r = sampler::align(model, to_tensor(tr.i1, Range::Signed), to_tensor(tr.i2, Range::Signed), {a.steps, 0.0},
                                    derive_seed(a.seed, i));
      outputs.push_back({tr.id, to_image8(r.image, Range::Signed)});
      const Tensor m_gt = image8_to_mask(tr.mask_gt);
      const double iu = eval::iou(dmp::binarize(r.mask), m_gt);
      const double il = eval::iou(dmp::binarize(r.mask_latent), dmp::downsample_mask(m_gt, model.factor()));
      per_sample_iou[tr.id] = iu;
      iou_img += iu;
      iou_lat += il;
      if (a.save_images) {
        write_png(dir / "pred" / (tr.id + ".png"), outputs.back().image);
        write_png(dir / "pred" / (tr.id + "_mask.png"), mask_to_image8(r.mask));
      }
      if (i < a.panels) write_png(dir / "panels" / (tr.id + ".png"), mask_panel(tr, outputs.back().image, r.mask));
    }
    if (model.config().use_dmp && n > 0) {
      extra["mask_iou"] = iou_img / static_cast<double>(n);
      extra["mask_iou_latent"] = iou_lat / static_cast<double>(n);
      extra["mask_iou_per_sample"] = per_sample_iou;
    }
    extra["stride"] = a.steps;
    extra["seed"] = a.seed;
  }
  eval::EvalReport rep = eval::evaluate(method, outputs, data, opt);
  if (n < data.size()) {
    // samples beyond --limit were not requested; keep them out of the missing list
    rep.missing.clear();
  }
  rep.extra = extra;
  eval::emit_plots({rep}, dir);
  write_json_file(dir / "eval_config.json", {{"ckpt", a.ckpt},
                                             {"data", a.data},
                                             {"baseline", a.baseline},
                                             {"occlusion_masked", a.occlusion_masked},
                                             {"steps", a.steps},
                                             {"seed", a.seed},
                                             {"limit", a.limit}});
  std::cout << eval::markdown_table({rep});
  if (!rep.missing.empty()) {
    std::cerr << rep.missing.size() << " samples have no output\n";
  }
  return rep;
}

/// Entry point shared by the executable and in-process tests.
inline int run(int argc, char** argv) {
  CLI::App app{"Diffusion-based image alignment toolkit"};
  app.require_subcommand(1);

  std::string gd_config, gd_out;
  std::size_t gd_count = 0;
  std::uint64_t gd_seed = 0;
  auto* gd = app.add_subcommand("gen-data", "Generate a synthetic alignment dataset");
  gd->add_option("--config", gd_config, "Generator config (JSON)")->check(CLI::ExistingFile);
  gd->add_option("--out", gd_out, "Output directory")->required();
  gd->add_option("--count", gd_count, "Number of samples")->required();
  gd->add_option("--seed", gd_seed, "Base seed")->required();

  std::string tc_data, tc_out, tc_config;
  auto* tc = app.add_subcommand("train-codec", "Train and freeze the latent codec");
  tc->add_option("--data", tc_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  tc->add_option("--out", tc_out, "Output checkpoint path")->required();
  tc->add_option("--config", tc_config, "Codec config (JSON)")->check(CLI::ExistingFile);

  std::string tr_data, tr_codec, tr_config, tr_out, tr_param, tr_val;
  bool tr_no_dmp = false;
  auto* trc = app.add_subcommand("train", "Train the denoiser and mask predictor");
  trc->add_option("--data", tr_data, "Training dataset directory")->required()->check(CLI::ExistingDirectory);
  trc->add_option("--codec", tr_codec, "Frozen codec checkpoint")->required();
  trc->add_option("--config", tr_config, "Training config (JSON)")->check(CLI::ExistingFile);
  trc->add_option("--out", tr_out, "Output directory")->required();
  trc->add_flag("--no-dmp", tr_no_dmp, "Disable the mask branch");
  trc->add_option("--param", tr_param, "pred_x0 or pred_eps")->check(CLI::IsMember({"pred_x0", "pred_eps"}));
  trc->add_option("--val-data", tr_val, "Validation dataset directory")->check(CLI::ExistingDirectory);

  std::string al_ckpt, al_i1, al_i2, al_out;
  int al_steps = 20;
  std::uint64_t al_seed = 0;
  double al_eta = 0.0;
  auto* al = app.add_subcommand("align", "Align I2 to the viewpoint of I1");
  al->add_option("--ckpt", al_ckpt, "Trained model directory")->required()->check(CLI::ExistingPath);
  al->add_option("--i1", al_i1, "Reference image (PNG)")->required();
  al->add_option("--i2", al_i2, "Image to align (PNG)")->required();
  al->add_option("--out", al_out, "Output directory")->required();
  al->add_option("--steps", al_steps, "Sampler stride");
  al->add_option("--seed", al_seed, "Noise seed");
  al->add_option("--eta", al_eta, "Stochasticity of the reverse steps (0 is deterministic)")->check(CLI::Range(0.0, 1.0));

  EvalArgs ev;
  auto* eva = app.add_subcommand("eval", "Evaluate a model or baseline on a dataset");
  eva->add_option("--ckpt", ev.ckpt, "Trained model directory")->check(CLI::ExistingPath);
  eva->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  eva->add_option("--out", ev.out, "Output directory")->required();
  eva->add_option("--baseline", ev.baseline, "gt-flow-warp or identity")->check(CLI::IsMember({"gt-flow-warp", "identity"}));
  eva->add_flag("--occlusion-masked", ev.occlusion_masked, "Also report occlusion-masked scores");
  eva->add_flag("--save-images", ev.save_images, "Write every prediction");
  eva->add_option("--name", ev.name, "Method name in the report");
  eva->add_option("--steps", ev.steps, "Sampler stride");
  eva->add_option("--seed", ev.seed, "Base noise seed");
  eva->add_option("--limit", ev.limit, "Evaluate only the first N samples");
  eva->add_option("--panels", ev.panels, "Number of mask panels to write");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gd) cmd_gen_data(gd_config, gd_out, gd_count, gd_seed);
    if (*tc) return cmd_train_codec(tc_data, tc_out, tc_config);
    if (*trc) cmd_train(tr_data, tr_codec, tr_config, tr_out, tr_no_dmp, tr_param, tr_val);
    if (*al) cmd_align(al_ckpt, al_i1, al_i2, al_out, al_steps, al_seed, al_eta);
    if (*eva) {
      const auto rep = cmd_eval(ev);
      if (!rep.missing.empty()) return 3;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace dmalign::cli
