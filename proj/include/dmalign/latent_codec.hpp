#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "dmalign/core/checkpoint.hpp"
#include "dmalign/dataset.hpp"

namespace dmalign::codec {

namespace fs = std::filesystem;

struct CodecConfig {
  int factor = 4;    // spatial downsampling, a power of two
  int latent_channels = 4;
  int width = 16;      // channels at full resolution
  int width_low = 32;  // channels at the downsampled levels

  [[nodiscard]] int levels() const {
    int l = 0;
    for (int f = factor; f > 1; f >>= 1) ++l;
    return l;
  }
  void validate() const {
    if (factor < 1 || (factor & (factor - 1)) != 0) throw ConfigError("codec factor must be a power of two");
    if (latent_channels < 1 || width < 1 || width_low < 1) throw ConfigError("codec widths must be positive");
  }
  [[nodiscard]] json to_json() const {
    return {{"factor", factor}, {"latent_channels", latent_channels}, {"width", width}, {"width_low", width_low}};
  }
  static CodecConfig from_json(const json& j) {
    CodecConfig c;
    c.factor = j.value("factor", c.factor);
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.width = j.value("width", c.width);
    c.width_low = j.value("width_low", c.width_low);
    c.validate();
    return c;
  }
};

/// Convolutional autoencoder. Images are (N,3,H,W) in [-1,1]; latents are
/// (N,c,H/f,W/f), tanh-bounded.
class Codec {
 public:
  explicit Codec(CodecConfig cfg = {}, std::uint64_t seed = 1) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int L = cfg_.levels();
    auto width_at = [&](int level) { return level == 0 ? cfg_.width : cfg_.width_low; };

    enc_in_ = nn::Conv2d(enc_, "enc.in", 3, width_at(0), 3, rng);
    for (int l = 0; l < L; ++l) {
      enc_blocks_.emplace_back(enc_, "enc.block" + std::to_string(l), width_at(l), width_at(l), 0, rng);
      enc_down_.emplace_back(enc_, "enc.down" + std::to_string(l), width_at(l), width_at(l + 1), 3, rng, 2);
    }
    enc_mid_ = nn::ResBlock(enc_, "enc.mid", width_at(L), width_at(L), 0, rng);
    enc_norm_ = nn::GroupNorm(enc_, "enc.norm", width_at(L));
    enc_out_ = nn::Conv2d(enc_, "enc.out", width_at(L), cfg_.latent_channels, 3, rng);

    dec_in_ = nn::Conv2d(dec_, "dec.in", cfg_.latent_channels, width_at(L), 3, rng);
    dec_mid_ = nn::ResBlock(dec_, "dec.mid", width_at(L), width_at(L), 0, rng);
    for (int l = L; l > 0; --l) {
      dec_up_.emplace_back(dec_, "dec.up" + std::to_string(l), width_at(l), width_at(l - 1), 3, rng);
      dec_blocks_.emplace_back(dec_, "dec.block" + std::to_string(l), width_at(l - 1), width_at(l - 1), 0, rng);
    }
    dec_norm_ = nn::GroupNorm(dec_, "dec.norm", width_at(0));
    dec_out_ = nn::Conv2d(dec_, "dec.out", width_at(0), 3, 3, rng);
  }

  [[nodiscard]] const CodecConfig& config() const { return cfg_; }
  nn::ParameterSet& encoder_params() { return enc_; }
  nn::ParameterSet& decoder_params() { return dec_; }
  [[nodiscard]] const nn::ParameterSet& encoder_params() const { return enc_; }
  [[nodiscard]] const nn::ParameterSet& decoder_params() const { return dec_; }

  [[nodiscard]] bool frozen() const { return frozen_; }
  void freeze() {
    frozen_ = true;
    enc_.set_trainable(false);
    dec_.set_trainable(false);
  }

  [[nodiscard]] std::uint64_t checksum() const {
    const std::uint64_t h = enc_.checksum();
    const std::uint64_t d = dec_.checksum();
    return fnv1a(&d, sizeof(d), h);
  }

  [[nodiscard]] Var encode(const Var& image) const {
    const Shape s = image.shape();
    if (s.c != 3) throw ShapeError("encode expects 3-channel images, got " + s.str());
    if (s.h % cfg_.factor || s.w % cfg_.factor) {
      throw ShapeError("image " + std::to_string(s.w) + "x" + std::to_string(s.h) + " is not divisible by codec factor " +
                       std::to_string(cfg_.factor));
    }
    Var h = enc_in_(image);
    for (std::size_t l = 0; l < enc_blocks_.size(); ++l) h = enc_down_[l](enc_blocks_[l](h));
    h = enc_mid_(h);
    return ops::tanh(enc_out_(ops::silu(enc_norm_(h))));
  }

  /// Decoder output before clamping; used by the reconstruction objective.
  [[nodiscard]] Var decode_raw(const Var& latent) const {
    if (latent.shape().c != cfg_.latent_channels) {
      throw ShapeError("decode expects " + std::to_string(cfg_.latent_channels) + " latent channels, got " +
                       latent.shape().str());
    }
    Var h = dec_mid_(dec_in_(latent));
    for (std::size_t l = 0; l < dec_up_.size(); ++l) h = dec_blocks_[l](dec_up_[l](ops::upsample_nearest2x(h)));
    return dec_out_(ops::silu(dec_norm_(h)));
  }

  /// Image in [-1,1], differentiable in the latent.
  [[nodiscard]] Var decode(const Var& latent) const { return ops::clamp(decode_raw(latent), -1.0f, 1.0f); }

  [[nodiscard]] Tensor encode(const Tensor& image) const {
    NoGradGuard ng;
    return encode(Var(image)).value();
  }
  [[nodiscard]] Tensor decode(const Tensor& latent) const {
    NoGradGuard ng;
    return decode(Var(latent)).value();
  }

  [[nodiscard]] Checkpoint to_checkpoint(const json& extra = json::object()) const {
    Checkpoint ck;
    ck.meta = {{"kind", "codec"}, {"config", cfg_.to_json()}, {"frozen", frozen_}, {"checksum", hex64(checksum())}};
    for (auto it = extra.begin(); it != extra.end(); ++it) ck.meta[it.key()] = it.value();
    append_parameters(ck, enc_, "");
    append_parameters(ck, dec_, "");
    return ck;
  }

  static Codec from_checkpoint(const Checkpoint& ck) {
    if (ck.meta.value("kind", std::string()) != "codec") throw IoError("checkpoint is not a codec");
    Codec c(CodecConfig::from_json(ck.meta.at("config")));
    load_parameters(ck, c.enc_, "");
    load_parameters(ck, c.dec_, "");
    if (ck.meta.value("frozen", false)) c.freeze();
    if (ck.meta.contains("checksum") && ck.meta.at("checksum").get<std::string>() != hex64(c.checksum())) {
      throw IoError("codec checkpoint checksum mismatch");
    }
    return c;
  }

  void save(const fs::path& path, const json& extra = json::object()) const { write_checkpoint(path, to_checkpoint(extra)); }
  static Codec load(const fs::path& path) { return from_checkpoint(read_checkpoint(path)); }

 private:
  CodecConfig cfg_;
  nn::ParameterSet enc_;
  nn::ParameterSet dec_;
  nn::Conv2d enc_in_;
  std::vector<nn::ResBlock> enc_blocks_;
  std::vector<nn::Conv2d> enc_down_;
  nn::ResBlock enc_mid_;
  nn::GroupNorm enc_norm_;
  nn::Conv2d enc_out_;
  nn::Conv2d dec_in_;
  nn::ResBlock dec_mid_;
  std::vector<nn::Conv2d> dec_up_;
  std::vector<nn::ResBlock> dec_blocks_;
  nn::GroupNorm dec_norm_;
  nn::Conv2d dec_out_;
  bool frozen_ = false;
};

// ------------------------------------------------------------------ training

struct CodecTrainConfig {
  int steps = 1500;
  int batch = 8;
  float lr = 1e-3f;
  float tv_weight = 1e-4f;
  double psnr_gate = 28.0;
  int max_rounds = 3;  // extra step budgets tried before declaring failure
  std::size_t holdout = 32;  // frames reserved for the reconstruction gate
  std::uint64_t seed = 1;
  int log_every = 50;

  [[nodiscard]] json to_json() const {
    return {{"steps", steps}, {"batch", batch}, {"lr", lr}, {"tv_weight", tv_weight}, {"psnr_gate", psnr_gate},
            {"max_rounds", max_rounds}, {"holdout", holdout}, {"seed", seed}, {"log_every", log_every}};
  }
  static CodecTrainConfig from_json(const json& j) {
    CodecTrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.lr = j.value("lr", c.lr);
    c.tv_weight = j.value("tv_weight", c.tv_weight);
    c.psnr_gate = j.value("psnr_gate", c.psnr_gate);
    c.max_rounds = j.value("max_rounds", c.max_rounds);
    c.holdout = j.value("holdout", c.holdout);
    c.seed = j.value("seed", c.seed);
    c.log_every = j.value("log_every", c.log_every);
    return c;
  }
};

struct CodecReport {
  std::vector<double> loss;         // per step
  std::vector<double> holdout_psnr;  // per round
  double final_psnr = 0.0;
  int steps = 0;
  bool passed = false;

  [[nodiscard]] json to_json() const {
    return {{"loss", loss}, {"holdout_psnr", holdout_psnr}, {"final_psnr", final_psnr}, {"steps", steps}, {"passed", passed}};
  }
};

/// Mean reconstruction PSNR (on [0,1] scale) over a set of (1,3,H,W) frames in [-1,1].
inline double reconstruction_psnr(const Codec& codec, const std::vector<Tensor>& frames) {
  double acc = 0.0;
  for (const auto& f : frames) {
    const Tensor r = codec.decode(codec.encode(f));
    double se = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double d = 0.5 * (static_cast<double>(r[i]) - f[i]);
      se += d * d;
    }
    const double mse = se / static_cast<double>(f.size());
    acc += mse <= 0.0 ? 99.0 : std::min(99.0, 10.0 * std::log10(1.0 / mse));
  }
  return acc / static_cast<double>(frames.size());
}

/// Trains on all three frames of every sample; the last `holdout` samples'
/// frames gate the result. Throws TrainingError when the gate is missed.
inline CodecReport train_codec(Codec& codec, const scene::Dataset& data, const CodecTrainConfig& cfg,
                               const std::function<void(const std::string&)>& log = {}) {
  if (data.size() == 0) throw ConfigError("train_codec: dataset is empty");
  if (codec.frozen()) throw ContractError("train_codec: codec is frozen");
  const std::size_t hold = std::min(cfg.holdout, data.size() / 4);
  const std::size_t n_train = data.size() - hold;
  std::vector<Tensor> train_frames;
  std::vector<Tensor> hold_frames;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto tr = data.load(i);
    auto& dst = i < n_train ? train_frames : hold_frames;
    for (const Image8* img : {&tr.i1, &tr.i2, &tr.igt}) dst.push_back(to_tensor(*img, Range::Signed));
  }
  if (hold_frames.empty()) hold_frames = {train_frames.begin(), train_frames.begin() + std::min<std::size_t>(train_frames.size(), 8)};

  CodecReport rep;
  nn::ParameterSet& enc = codec.encoder_params();
  nn::ParameterSet& dec = codec.decoder_params();
  Rng rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, train_frames.size() - 1);
  std::bernoulli_distribution flip(0.5);

  for (int round = 0; round < cfg.max_rounds; ++round) {
    nn::AdamConfig ac;
    ac.lr = cfg.lr * (round == 0 ? 1.0f : 0.5f);
    ac.total_steps = cfg.steps;
    nn::Adam opt_enc(enc, ac);
    nn::Adam opt_dec(dec, ac);
    for (int step = 0; step < cfg.steps; ++step) {
      std::vector<Tensor> items;
      for (int b = 0; b < cfg.batch; ++b) {
        const Tensor& f = train_frames[pick(rng)];
        items.push_back(flip(rng) ? flip_horizontal(f) : f);
      }
      const Var x(stack_batch(items));
      enc.zero_grad();
      dec.zero_grad();
      const Var recon = codec.decode_raw(codec.encode(x));
      Var loss = ops::mse(recon, x);
      if (cfg.tv_weight > 0.0f) loss = ops::add(loss, ops::scale(ops::total_variation(recon), cfg.tv_weight));
      const float lv = loss.value().item();
      if (!std::isfinite(lv)) throw TrainingError("codec loss is not finite at step " + std::to_string(rep.steps));
      backward(loss);
      opt_enc.step();
      opt_dec.step();
      rep.loss.push_back(lv);
      ++rep.steps;
      if (log && cfg.log_every > 0 && step % cfg.log_every == 0) {
        log("codec step " + std::to_string(rep.steps) + " loss " + std::to_string(lv));
      }
    }
    rep.final_psnr = reconstruction_psnr(codec, hold_frames);
    rep.holdout_psnr.push_back(rep.final_psnr);
    if (log) log("codec round " + std::to_string(round) + " holdout PSNR " + std::to_string(rep.final_psnr));
    if (rep.final_psnr >= cfg.psnr_gate) {
      rep.passed = true;
      break;
    }
  }
  if (!rep.passed) {
    throw TrainingError("codec reconstruction PSNR " + std::to_string(rep.final_psnr) + " dB is below the " +
                        std::to_string(cfg.psnr_gate) + " dB gate after " + std::to_string(rep.steps) + " steps");
  }
  codec.freeze();
  return rep;
}

}  // namespace dmalign::codec
