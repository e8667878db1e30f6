#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dmalign/eval.hpp"
#include "dmalign/sampler.hpp"

namespace dmalign::train {

namespace fs = std::filesystem;

// --------------------------------------------------------------------- losses

/// (1-g) ||(1-M) d|| + g ||M d|| with d = I_gt - I_pred, computed per sample
/// and averaged over the batch. The norm is RMS over the sample's elements or
/// the plain L2 norm. M is a weight, not differentiated through.
inline Var denoising_loss(const Tensor& i_gt, const Var& i_pred, const Tensor& m_hat, double gamma, bool rms = true) {
  i_gt.require_same(i_pred.value(), "denoising_loss");
  const Shape s = i_gt.shape();
  const Shape ms = m_hat.shape();
  if (ms.n != s.n || ms.c != 1 || ms.h != s.h || ms.w != s.w) {
    throw ShapeError("denoising_loss: mask " + ms.str() + " does not match images " + s.str());
  }
  const std::size_t per = static_cast<std::size_t>(s.c) * s.plane();
  std::vector<double> bg(static_cast<std::size_t>(s.n));
  std::vector<double> fg(static_cast<std::size_t>(s.n));
  const Tensor& p = i_pred.value();
  double total = 0.0;
  for (int n = 0; n < s.n; ++n) {
    double sb = 0.0;
    double sf = 0.0;
    for (int c = 0; c < s.c; ++c)
      for (std::size_t k = 0; k < s.plane(); ++k) {
        const double m = m_hat.plane(n, 0)[k];
        const double d = static_cast<double>(i_gt.plane(n, c)[k]) - p.plane(n, c)[k];
        sb += (1.0 - m) * (1.0 - m) * d * d;
        sf += m * m * d * d;
      }
    const double denom = rms ? static_cast<double>(per) : 1.0;
    bg[static_cast<std::size_t>(n)] = std::sqrt(sb / denom);
    fg[static_cast<std::size_t>(n)] = std::sqrt(sf / denom);
    total += (1.0 - gamma) * bg[static_cast<std::size_t>(n)] + gamma * fg[static_cast<std::size_t>(n)];
  }
  total /= s.n;
  return make_op(Tensor::scalar(static_cast<float>(total)), {i_pred},
                 [i_gt, i_pred, m_hat, gamma, rms, bg, fg, per](Node& self) {
                   const Shape s = i_gt.shape();
                   const double g = self.grad.item() / s.n;
                   const double denom = rms ? static_cast<double>(per) : 1.0;
                   const Tensor& p = i_pred.value();
                   Tensor& gp = i_pred.node().grad_buffer();
                   for (int n = 0; n < s.n; ++n) {
                     const double nb = bg[static_cast<std::size_t>(n)];
                     const double nf = fg[static_cast<std::size_t>(n)];
                     // d||w d|| / d d = w^2 d / (denom ||w d||); zero at a zero residual
                     const double kb = nb > 0.0 ? (1.0 - gamma) / (denom * nb) : 0.0;
                     const double kf = nf > 0.0 ? gamma / (denom * nf) : 0.0;
                     for (int c = 0; c < s.c; ++c)
                       for (std::size_t k = 0; k < s.plane(); ++k) {
                         const double m = m_hat.plane(n, 0)[k];
                         const double d = static_cast<double>(i_gt.plane(n, c)[k]) - p.plane(n, c)[k];
                         const double dl_dd = (kb * (1.0 - m) * (1.0 - m) + kf * m * m) * d;
                         gp.plane(n, c)[k] -= static_cast<float>(g * dl_dd);
                       }
                   }
                 });
}

inline constexpr double kMaskEps = 1e-6;

/// Mean binary cross-entropy between a {0,1} target and a prediction clamped
/// to [eps, 1-eps].
inline Var mask_loss(const Tensor& m_gt, const Var& m_hat) {
  m_gt.require_same(m_hat.value(), "mask_loss");
  const Tensor& p = m_hat.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double q = std::clamp(static_cast<double>(p[i]), kMaskEps, 1.0 - kMaskEps);
    acc -= m_gt[i] * std::log(q) + (1.0 - m_gt[i]) * std::log(1.0 - q);
  }
  const double n = static_cast<double>(p.size());
  return make_op(Tensor::scalar(static_cast<float>(acc / n)), {m_hat}, [m_gt, m_hat, n](Node& self) {
    const double g = self.grad.item() / n;
    const Tensor& p = m_hat.value();
    Tensor& gp = m_hat.node().grad_buffer();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double raw = p[i];
      if (raw < kMaskEps || raw > 1.0 - kMaskEps) continue;
      gp[i] += static_cast<float>(g * (-m_gt[i] / raw + (1.0 - m_gt[i]) / (1.0 - raw)));
    }
  });
}

inline double total_loss(double l_den, double l_mask, const LossConfig& cfg) {
  return cfg.lambda1 * l_den + cfg.lambda2 * l_mask;
}

inline Var total_loss(const Var& l_den, const Var& l_mask, const LossConfig& cfg) {
  Var t = ops::scale(l_den, static_cast<float>(cfg.lambda1));
  if (l_mask.defined() && cfg.lambda2 != 0.0) t = ops::add(t, ops::scale(l_mask, static_cast<float>(cfg.lambda2)));
  return t;
}

// ----------------------------------------------------------------------- data

/// Frozen-codec latents and supervision for one sample under one flip.
struct CachedSample {
  std::string id;
  Tensor v1, v2, vgt;  // (1,c,h,w)
  Tensor igt;          // (1,3,H,W) in [-1,1]
  Tensor mask;         // (1,1,H,W) in {0,1}
};

struct LatentCache {
  std::vector<std::array<CachedSample, 2>> items;  // [plain, flipped]
};

inline LatentCache build_cache(const codec::Codec& codec, const scene::Dataset& data, std::size_t begin, std::size_t end,
                               bool with_flips, const std::function<void(std::size_t)>& progress = {}) {
  LatentCache cache;
  for (std::size_t i = begin; i < end; ++i) {
    const auto tr = data.load(i);
    std::array<CachedSample, 2> pair;
    for (int fl = 0; fl < (with_flips ? 2 : 1); ++fl) {
      auto prep = [fl](const Tensor& t) { return fl ? flip_horizontal(t) : t; };
      CachedSample& c = pair[static_cast<std::size_t>(fl)];
      c.id = tr.id;
      const Tensor frames = stack_batch(std::vector<Tensor>{prep(to_tensor(tr.i1, Range::Signed)), prep(to_tensor(tr.i2, Range::Signed)),
                                                            prep(to_tensor(tr.igt, Range::Signed))});
      const Tensor lat = codec.encode(frames);
      c.v1 = lat.batch_slice(0, 1);
      c.v2 = lat.batch_slice(1, 1);
      c.vgt = lat.batch_slice(2, 1);
      c.igt = frames.batch_slice(2, 1);
      c.mask = prep(image8_to_mask(tr.mask_gt));
    }
    if (!with_flips) pair[1] = pair[0];
    cache.items.push_back(std::move(pair));
    if (progress) progress(i - begin);
  }
  return cache;
}

struct TrainBatch {
  Tensor v1, v2, vgt, igt, mask;
  std::vector<std::string> ids;
};

inline TrainBatch make_batch(const std::vector<const CachedSample*>& items) {
  TrainBatch b;
  std::vector<Tensor> v1, v2, vgt, igt, mask;
  for (const auto* s : items) {
    v1.push_back(s->v1);
    v2.push_back(s->v2);
    vgt.push_back(s->vgt);
    igt.push_back(s->igt);
    mask.push_back(s->mask);
    b.ids.push_back(s->id);
  }
  b.v1 = stack_batch(v1);
  b.v2 = stack_batch(v2);
  b.vgt = stack_batch(vgt);
  b.igt = stack_batch(igt);
  b.mask = stack_batch(mask);
  return b;
}

// ----------------------------------------------------------------- train step

struct LossTerms {
  Var total;
  Var denoise;
  Var mask;       // undefined without the mask branch
  Var cond;       // denoiser condition
  Var mask_hat;   // image-resolution mask used by the losses
  Var prediction; // decoded image (pred_x0) or predicted noise (pred_eps)
};

/// Forward pass of the training objective for given timesteps and noise.
inline LossTerms compute_losses(const AlignerModel& model, const TrainBatch& b, const std::vector<int>& ts, const Tensor& eps) {
  const ModelConfig& cfg = model.config();
  LossTerms L;
  const Var v1(b.v1);
  const Var v2(b.v2);
  if (cfg.use_dmp) {
    const dmp::DmpOutput o = dmp::run(model.predictor(), v1, v2, cfg.loss.dilation_r);
    L.cond = ops::concat({v1, v2, o.mixed});
    L.mask_hat = dmp::upsample_mask(o.mask_dilated, model.factor()).value;
    L.mask = mask_loss(b.mask, L.mask_hat);
  } else {
    L.cond = ops::concat({v1, v2, v2});
    L.mask_hat = Var(Tensor(b.mask.shape()));
  }
  const Tensor x_t = diffusion::q_sample(b.vgt, ts, eps, model.schedule());
  const Var out = model.unet()(Var(x_t), L.cond, ts);
  if (cfg.param == denoiser::Parameterization::PredX0) {
    L.prediction = model.codec().decode(out);
    L.denoise = denoising_loss(b.igt, L.prediction, L.mask_hat.value(), cfg.loss.gamma, cfg.loss.rms);
  } else {
    L.prediction = out;
    L.denoise = ops::mse(out, Var(eps));
  }
  LossConfig lc = cfg.loss;
  if (!cfg.use_dmp) lc.lambda2 = 0.0;
  L.total = total_loss(L.denoise, L.mask, lc);
  return L;
}

struct StepMetrics {
  long step = 0;
  double total = 0.0;
  double denoise = 0.0;
  double mask = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

/// Draws timesteps and noise, runs one optimizer step. Aborts on a non-finite loss.
inline StepMetrics train_step(AlignerModel& model, nn::Adam& opt, const TrainBatch& b, Rng& rng, long step) {
  if (!model.codec().frozen()) throw ContractError("train_step requires a frozen codec");
  std::uniform_int_distribution<int> pick_t(1, model.schedule().T);
  std::vector<int> ts(static_cast<std::size_t>(b.vgt.shape().n));
  for (auto& t : ts) t = pick_t(rng);
  const Tensor eps = randn(b.vgt.shape(), rng);
  model.params().zero_grad();
  const LossTerms L = compute_losses(model, b, ts, eps);
  StepMetrics m;
  m.step = step;
  m.total = L.total.value().item();
  m.denoise = L.denoise.value().item();
  m.mask = L.mask.defined() ? L.mask.value().item() : 0.0;
  if (!std::isfinite(m.total)) {
    std::ostringstream os;
    os << "non-finite loss at step " << step << " (gamma " << model.config().loss.gamma << "; t =";
    for (int t : ts) os << " " << t;
    os << "; samples =";
    for (const auto& id : b.ids) os << " " << id;
    os << ")";
    throw TrainingError(os.str());
  }
  m.lr = opt.current_lr();
  backward(L.total);
  m.grad_norm = opt.step();
  return m;
}

// ------------------------------------------------------------------------ fit

struct FitConfig {
  ModelConfig model;
  long steps = 4000;
  int batch = 8;
  float lr = 2e-4f;
  float grad_clip = 1.0f;
  bool flip = true;
  std::size_t holdout = 16;  // samples held out for validation when no separate set is given
  long val_every = 1000;
  std::size_t val_count = 16;
  int val_stride = 100;
  long ckpt_every = 1000;
  int log_every = 50;

  [[nodiscard]] json to_json() const {
    return {{"model", model.to_json()},
            {"steps", steps},
            {"batch", batch},
            {"lr", lr},
            {"grad_clip", grad_clip},
            {"flip", flip},
            {"holdout", holdout},
            {"val_every", val_every},
            {"val_count", val_count},
            {"val_stride", val_stride},
            {"ckpt_every", ckpt_every},
            {"log_every", log_every}};
  }
  static FitConfig from_json(const json& j) {
    FitConfig c;
    if (j.contains("model")) c.model = ModelConfig::from_json(j.at("model"));
    c.steps = j.value("steps", c.steps);
    c.batch = j.value("batch", c.batch);
    c.lr = j.value("lr", c.lr);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.flip = j.value("flip", c.flip);
    c.holdout = j.value("holdout", c.holdout);
    c.val_every = j.value("val_every", c.val_every);
    c.val_count = j.value("val_count", c.val_count);
    c.val_stride = j.value("val_stride", c.val_stride);
    c.ckpt_every = j.value("ckpt_every", c.ckpt_every);
    c.log_every = j.value("log_every", c.log_every);
    return c;
  }
  [[nodiscard]] std::string hash() const { return hex64(json_hash(to_json())); }
};

struct ValPoint {
  long step = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double mask_iou = 0.0;
};

struct FitReport {
  std::vector<StepMetrics> history;
  std::vector<ValPoint> validation;
  std::vector<std::string> checkpoints;
  double seconds = 0.0;
  std::string codec_checksum_before;
  std::string codec_checksum_after;

  [[nodiscard]] json to_json() const {
    json j;
    for (const char* k : {"total", "denoise", "mask", "grad_norm", "lr"}) j["loss"][k] = json::array();
    for (const auto& m : history) {
      j["loss"]["total"].push_back(m.total);
      j["loss"]["denoise"].push_back(m.denoise);
      j["loss"]["mask"].push_back(m.mask);
      j["loss"]["grad_norm"].push_back(m.grad_norm);
      j["loss"]["lr"].push_back(m.lr);
    }
    j["validation"] = json::array();
    for (const auto& v : validation) {
      j["validation"].push_back({{"step", v.step}, {"psnr", v.psnr}, {"ssim", v.ssim}, {"mask_iou", v.mask_iou}});
    }
    j["checkpoints"] = checkpoints;
    j["seconds"] = seconds;
    j["codec_checksum_before"] = codec_checksum_before;
    j["codec_checksum_after"] = codec_checksum_after;
    return j;
  }
};

/// Mean PSNR/SSIM/mask IoU of `align` over dataset samples [begin, end).
inline ValPoint validate(const AlignerModel& model, const scene::Dataset& data, std::size_t begin, std::size_t end, int stride,
                         std::uint64_t seed) {
  ValPoint v;
  const std::size_t n = end - begin;
  if (n == 0) return v;
  for (std::size_t i = begin; i < end; ++i) {
    const auto tr = data.load(i);
    const auto r = sampler::align(model, to_tensor(tr.i1, Range::Signed), to_tensor(tr.i2, Range::Signed), {stride, 0.0},
                                  derive_seed(seed, i));
    const Tensor pred = to_tensor(to_image8(r.image, Range::Signed));
    const Tensor gt = to_tensor(tr.igt);
    v.psnr += eval::psnr(pred, gt);
    v.ssim += eval::ssim(pred, gt);
    v.mask_iou += eval::iou(dmp::binarize(r.mask), image8_to_mask(tr.mask_gt));
  }
  v.psnr /= static_cast<double>(n);
  v.ssim /= static_cast<double>(n);
  v.mask_iou /= static_cast<double>(n);
  return v;
}

inline std::string checkpoint_name(long step, const std::string& config_hash) {
  std::ostringstream os;
  os << "step" << std::setw(7) << std::setfill('0') << step << "_" << config_hash.substr(0, 8) << ".ckpt";
  return os.str();
}

/// Trains denoiser and mask predictor on `data` (the last `holdout` samples
/// are used for validation unless `val` is given). Writes periodic
/// checkpoints, model.ckpt, codec.ckpt and train_report.json into `out_dir`.
inline FitReport fit(AlignerModel& model, const scene::Dataset& data, const FitConfig& cfg, const fs::path& out_dir,
                     const scene::Dataset* val = nullptr, const std::function<void(const std::string&)>& log = {}) {
  const auto start = std::chrono::steady_clock::now();
  const int f = model.factor();
  if (data.width() % f || data.height() % f) {
    throw ConfigError("dataset images " + std::to_string(data.width()) + "x" + std::to_string(data.height()) +
                      " are not divisible by the codec factor " + std::to_string(f));
  }
  const int div = f << model.config().unet.downsamplings();
  if (data.width() % div || data.height() % div) {
    throw ConfigError("dataset images must be divisible by " + std::to_string(div) + " for this codec and UNet");
  }
  if (!model.codec().frozen()) throw ContractError("fit requires a frozen codec");
  const std::size_t hold = val ? 0 : std::min(cfg.holdout, data.size() / 5);
  const std::size_t n_train = data.size() - hold;
  if (n_train == 0) throw ConfigError("fit: no training samples");

  FitReport rep;
  rep.codec_checksum_before = hex64(model.codec().checksum());
  if (log) log("encoding " + std::to_string(n_train) + " training samples");
  const LatentCache cache = build_cache(model.codec(), data, 0, n_train, cfg.flip);

  nn::AdamConfig ac;
  ac.lr = cfg.lr;
  ac.grad_clip = cfg.grad_clip;
  ac.total_steps = cfg.steps;
  nn::Adam opt(model.params(), ac);
  Rng rng(derive_seed(model.config().seed, 0x7472));
  std::uniform_int_distribution<std::size_t> pick(0, n_train - 1);
  std::bernoulli_distribution flip(0.5);
  const std::string hash = cfg.hash();
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "train_config.json") << cfg.to_json().dump(2) << "\n";
  const json extra{{"data_config_hash", data.config_hash()}, {"train_config_hash", hash}};

  auto run_validation = [&](long step) {
    const scene::Dataset& vd = val ? *val : data;
    const std::size_t vb = val ? 0 : n_train;
    const std::size_t ve = std::min(vd.size(), vb + cfg.val_count);
    if (ve <= vb) return;
    ValPoint v = validate(model, vd, vb, ve, cfg.val_stride, 12345);
    v.step = step;
    rep.validation.push_back(v);
    if (log) {
      log("step " + std::to_string(step) + " validation PSNR " + eval::fmt(v.psnr, 2) + " SSIM " + eval::fmt(v.ssim, 3) +
          " mask IoU " + eval::fmt(v.mask_iou, 3));
    }
  };

  for (long step = 1; step <= cfg.steps; ++step) {
    std::vector<const CachedSample*> items;
    for (int b = 0; b < cfg.batch; ++b) {
      const auto& pair = cache.items[pick(rng)];
      items.push_back(&pair[cfg.flip && flip(rng) ? 1 : 0]);
    }
    StepMetrics m = train_step(model, opt, make_batch(items), rng, step);
    rep.history.push_back(m);
    if (log && cfg.log_every > 0 && (step % cfg.log_every == 0 || step == 1)) {
      log("step " + std::to_string(step) + " loss " + eval::fmt(m.total, 5) + " den " + eval::fmt(m.denoise, 5) + " mask " +
          eval::fmt(m.mask, 4) + " |g| " + eval::fmt(m.grad_norm, 3));
    }
    if (cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0 && step != cfg.steps) {
      const std::string name = checkpoint_name(step, hash);
      write_checkpoint(out_dir / name, model.checkpoint(json{{"step", step}, {"data_config_hash", data.config_hash()}}));
      rep.checkpoints.push_back(name);
    }
    if (cfg.val_every > 0 && step % cfg.val_every == 0 && step != cfg.steps) run_validation(step);
  }
  run_validation(cfg.steps);
  json final_extra = extra;
  final_extra["step"] = cfg.steps;
  model.save(out_dir, final_extra);
  const std::string name = checkpoint_name(cfg.steps, hash);
  write_checkpoint(out_dir / name, model.checkpoint(final_extra));
  rep.checkpoints.push_back(name);
  rep.codec_checksum_after = hex64(model.codec().checksum());
  if (rep.codec_checksum_after != rep.codec_checksum_before) throw ContractError("codec weights changed during training");
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::ofstream(out_dir / "train_report.json") << rep.to_json().dump(2) << "\n";
  return rep;
}

}  // namespace dmalign::train
