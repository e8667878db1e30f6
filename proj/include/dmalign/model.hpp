#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "dmalign/denoiser.hpp"
#include "dmalign/dmp.hpp"
#include "dmalign/latent_codec.hpp"

namespace dmalign {

namespace fs = std::filesystem;

struct LossConfig {
  double gamma = 0.7;
  double lambda1 = 2.0;
  double lambda2 = 0.1;
  int dilation_r = 2;
  bool rms = true;  // false: plain L2 norm (root of the sum of squares)

  void validate() const {
    if (gamma < 0.0 || gamma > 1.0) throw ConfigError("gamma must lie in [0, 1]");
    if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("loss weights must be non-negative");
    if (dilation_r < 0) throw ConfigError("dilation_r must be non-negative");
  }
  [[nodiscard]] json to_json() const {
    return {{"gamma", gamma}, {"lambda1", lambda1}, {"lambda2", lambda2}, {"dilation_r", dilation_r}, {"norm", rms ? "rms" : "l2"}};
  }
  static LossConfig from_json(const json& j) {
    LossConfig c;
    c.gamma = j.value("gamma", c.gamma);
    c.lambda1 = j.value("lambda1", c.lambda1);
    c.lambda2 = j.value("lambda2", c.lambda2);
    c.dilation_r = j.value("dilation_r", c.dilation_r);
    const std::string norm = j.value("norm", std::string("rms"));
    if (norm != "rms" && norm != "l2") throw ConfigError("loss norm must be 'rms' or 'l2'");
    c.rms = norm == "rms";
    c.validate();
    return c;
  }
};

struct ModelConfig {
  denoiser::UNetConfig unet;
  dmp::PredictorConfig predictor;
  bool use_dmp = true;
  denoiser::Parameterization param = denoiser::Parameterization::PredX0;
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  LossConfig loss;
  std::uint64_t seed = 1;

  [[nodiscard]] diffusion::NoiseSchedule schedule() const { return diffusion::make_schedule(T, "linear", beta_start, beta_end); }

  [[nodiscard]] json to_json() const {
    return {{"unet", unet.to_json()},
            {"predictor", predictor.to_json()},
            {"dmp", use_dmp},
            {"param", denoiser::to_string(param)},
            {"schedule", schedule().to_json()},
            {"loss", loss.to_json()},
            {"seed", seed}};
  }
  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    if (j.contains("unet")) c.unet = denoiser::UNetConfig::from_json(j.at("unet"));
    if (j.contains("predictor")) c.predictor = dmp::PredictorConfig::from_json(j.at("predictor"));
    c.use_dmp = j.value("dmp", c.use_dmp);
    c.param = denoiser::parameterization_from_string(j.value("param", denoiser::to_string(c.param)));
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      c.T = s.value("T", c.T);
      c.beta_start = s.value("beta_start", c.beta_start);
      c.beta_end = s.value("beta_end", c.beta_end);
    }
    if (j.contains("loss")) c.loss = LossConfig::from_json(j.at("loss"));
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

/// Frozen codec plus the trainable denoiser and mask predictor.
class AlignerModel {
 public:
  AlignerModel(codec::Codec codec, ModelConfig cfg)
      : codec_(std::move(codec)), cfg_(std::move(cfg)), schedule_(cfg_.schedule()) {
    cfg_.loss.validate();
    if (!codec_.frozen()) throw ContractError("the codec must be frozen before building the aligner");
    cfg_.unet.latent_channels = codec_.config().latent_channels;
    cfg_.unet.cond_channels = 3 * codec_.config().latent_channels;
    Rng rng(cfg_.seed);
    unet_ = std::make_unique<denoiser::UNet>(params_, cfg_.unet, rng);
    if (cfg_.use_dmp) predictor_ = dmp::MaskPredictor(params_, "mask", cfg_.predictor, rng);
  }

  [[nodiscard]] const ModelConfig& config() const { return cfg_; }
  [[nodiscard]] const codec::Codec& codec() const { return codec_; }
  [[nodiscard]] const denoiser::UNet& unet() const { return *unet_; }
  [[nodiscard]] const dmp::MaskPredictor& predictor() const {
    if (!cfg_.use_dmp) throw ContractError("model was built without the mask branch");
    return predictor_;
  }
  [[nodiscard]] const diffusion::NoiseSchedule& schedule() const { return schedule_; }
  nn::ParameterSet& params() { return params_; }
  [[nodiscard]] const nn::ParameterSet& params() const { return params_; }
  [[nodiscard]] int factor() const { return codec_.config().factor; }

  /// Writes model.ckpt and codec.ckpt into `dir`.
  void save(const fs::path& dir, const json& extra = json::object()) const {
    fs::create_directories(dir);
    codec_.save(dir / "codec.ckpt");
    write_checkpoint(dir / "model.ckpt", checkpoint(extra));
  }

  [[nodiscard]] Checkpoint checkpoint(const json& extra = json::object()) const {
    Checkpoint ck;
    ck.meta = {{"kind", "aligner"},
               {"config", cfg_.to_json()},
               {"param", denoiser::to_string(cfg_.param)},
               {"schedule", schedule_.to_json()},
               {"schedule_fingerprint", schedule_.fingerprint()},
               {"codec_checksum", hex64(codec_.checksum())},
               {"checksum", hex64(params_.checksum())}};
    for (auto it = extra.begin(); it != extra.end(); ++it) ck.meta[it.key()] = it.value();
    append_parameters(ck, params_, "");
    return ck;
  }

  /// Loads `dir/model.ckpt` with the codec stored next to it. When `expected`
  /// is given, a checkpoint trained under another parameterization is refused.
  static AlignerModel load(const fs::path& dir, std::optional<denoiser::Parameterization> expected = std::nullopt) {
    const fs::path model_path = fs::is_directory(dir) ? dir / "model.ckpt" : dir;
    const fs::path codec_path = model_path.parent_path() / "codec.ckpt";
    const Checkpoint ck = read_checkpoint(model_path);
    return from_checkpoint(ck, codec::Codec::load(codec_path), expected);
  }

  static AlignerModel from_checkpoint(const Checkpoint& ck, codec::Codec codec,
                                      std::optional<denoiser::Parameterization> expected = std::nullopt) {
    if (ck.meta.value("kind", std::string()) != "aligner") throw IoError("checkpoint is not an aligner model");
    const ModelConfig cfg = ModelConfig::from_json(ck.meta.at("config"));
    const auto tag = denoiser::parameterization_from_string(ck.meta.at("param").get<std::string>());
    if (expected && *expected != tag) {
      throw ConfigError("checkpoint parameterization is " + denoiser::to_string(tag) + ", expected " +
                        denoiser::to_string(*expected));
    }
    if (ck.meta.at("schedule_fingerprint").get<std::string>() != cfg.schedule().fingerprint()) {
      throw ConfigError("checkpoint schedule fingerprint does not match its config");
    }
    if (ck.meta.at("codec_checksum").get<std::string>() != hex64(codec.checksum())) {
      throw ConfigError("codec checkpoint does not match the one the model was trained with");
    }
    AlignerModel m(std::move(codec), cfg);
    load_parameters(ck, m.params_, "");
    return m;
  }

 private:
  codec::Codec codec_;
  ModelConfig cfg_;
  diffusion::NoiseSchedule schedule_;
  nn::ParameterSet params_;
  std::unique_ptr<denoiser::UNet> unet_;
  dmp::MaskPredictor predictor_;
};

}  // namespace dmalign
