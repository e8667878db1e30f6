#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "dmalign/model.hpp"

namespace dmalign::sampler {

struct SamplerConfig {
  int stride = 20;
  double eta = 0.0;  // sigma_t = eta * sqrt((1-abar_prev)/(1-abar_t)) * sqrt(1 - abar_t/abar_prev)
};

/// Maps (x_t, t) to x0_hat with the condition fixed by the caller.
using X0Fn = std::function<Tensor(const Tensor& x_t, int t)>;

struct LatentTrajectory {
  Tensor x0;                 // final latent
  std::vector<int> visited;  // timesteps at which the denoiser ran
};

inline double ddim_sigma(const diffusion::NoiseSchedule& s, int t, int t_prev, double eta) {
  if (eta <= 0.0 || t_prev == 0) return 0.0;
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  const double abp = s.alpha_bar[static_cast<std::size_t>(t_prev)];
  return eta * std::sqrt((1.0 - abp) / (1.0 - ab)) * std::sqrt(1.0 - ab / abp);
}

/// Strided reverse process from x_T. The last step lands on t=0, where the
/// update returns the final x0_hat.
inline LatentTrajectory run_ddim(const X0Fn& x0_fn, Tensor x_T, const diffusion::NoiseSchedule& s, const SamplerConfig& cfg,
                                 Rng& rng) {
  if (cfg.stride > s.T) throw ParameterError("stride " + std::to_string(cfg.stride) + " exceeds T=" + std::to_string(s.T));
  LatentTrajectory tr;
  Tensor x = std::move(x_T);
  for (const auto& [t, t_prev] : diffusion::stride_schedule(s.T, cfg.stride)) {
    const Tensor x0 = x0_fn(x, t);
    tr.visited.push_back(t);
    if (!x0.all_finite()) throw TrainingError("non-finite denoiser output at timestep " + std::to_string(t));
    const double sigma = ddim_sigma(s, t, t_prev, cfg.eta);
    if (sigma > 0.0) {
      const Tensor z = randn(x.shape(), rng);
      x = diffusion::ddim_step(x, x0, t, t_prev, sigma, s, &z);
    } else {
      x = diffusion::ddim_step(x, x0, t, t_prev, 0.0, s);
    }
    if (!x.all_finite()) throw TrainingError("non-finite latent after step at timestep " + std::to_string(t));
  }
  tr.x0 = std::move(x);
  return tr;
}

struct AlignResult {
  Tensor image;  // (1,3,H,W) in [-1,1]
  Tensor mask;   // (1,1,H,W) in [0,1]; zeros without the mask branch
  Tensor mask_latent;  // (1,1,h,w) sigmoid output before dilation
  int denoiser_calls = 0;
  std::vector<int> visited;
  double runtime_ms = 0.0;
};

/// Condition tensors for one pair: [V1, V2, V_M] and the image-resolution mask.
struct Conditioning {
  Tensor cond;
  Tensor mask_image;
  Tensor mask_latent;
};

inline Conditioning condition(const AlignerModel& model, const Tensor& v1, const Tensor& v2) {
  NoGradGuard ng;
  Conditioning c;
  if (model.config().use_dmp) {
    const dmp::DmpOutput o = dmp::run(model.predictor(), Var(v1), Var(v2), model.config().loss.dilation_r);
    c.cond = ops::concat({Var(v1), Var(v2), o.mixed}).value();
    c.mask_image = dmp::upsample_mask(o.mask_dilated, model.factor()).value.value();
    c.mask_latent = o.mask.value.value();
  } else {
    c.cond = ops::concat({Var(v1), Var(v2), Var(v2)}).value();
    const Shape s = v1.shape();
    c.mask_image = Tensor(Shape{s.n, 1, s.h * model.factor(), s.w * model.factor()});
    c.mask_latent = Tensor(Shape{s.n, 1, s.h, s.w});
  }
  return c;
}

/// Aligns I2 to the viewpoint of I1. Images are (1,3,H,W) in [-1,1].
inline AlignResult align(const AlignerModel& model, const Tensor& i1, const Tensor& i2, const SamplerConfig& cfg,
                         std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  i1.require_same(i2, "align");
  const int f = model.factor();
  const Shape s = i1.shape();
  if (s.h % f || s.w % f) {
    const int ph = (f - s.h % f) % f;
    const int pw = (f - s.w % f) % f;
    throw ShapeError("image " + std::to_string(s.w) + "x" + std::to_string(s.h) + " is not divisible by " + std::to_string(f) +
                     "; pad by " + std::to_string(pw) + " columns and " + std::to_string(ph) + " rows");
  }
  if (cfg.stride < 1 || cfg.stride > model.schedule().T) {
    throw ParameterError("stride " + std::to_string(cfg.stride) + " outside [1, T=" + std::to_string(model.schedule().T) + "]");
  }
  const Tensor v1 = model.codec().encode(i1);
  const Tensor v2 = model.codec().encode(i2);
  const Conditioning c = condition(model, v1, v2);
  Rng rng(seed);
  Tensor x_T = randn(v1.shape(), rng);
  const auto param = model.config().param;
  const X0Fn fn = [&](const Tensor& x_t, int t) {
    NoGradGuard ng;
    const std::vector<int> ts(static_cast<std::size_t>(x_t.shape().n), t);
    const Tensor out = model.unet()(Var(x_t), Var(c.cond), ts).value();
    return denoiser::to_x0(x_t, out, ts, param, model.schedule());
  };
  LatentTrajectory tr = run_ddim(fn, std::move(x_T), model.schedule(), cfg, rng);
  AlignResult r;
  r.image = model.codec().decode(tr.x0);
  r.mask = c.mask_image;
  r.mask_latent = c.mask_latent;
  r.denoiser_calls = static_cast<int>(tr.visited.size());
  r.visited = std::move(tr.visited);
  r.runtime_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return r;
}

struct BatchItem {
  std::optional<AlignResult> result;
  std::string error;
};

/// Order-preserving; item i uses seed derive_seed(base_seed, i). Failures are
/// reported per item.
inline std::vector<BatchItem> align_batch(const AlignerModel& model, const std::vector<std::pair<Tensor, Tensor>>& pairs,
                                          const SamplerConfig& cfg, std::uint64_t base_seed) {
  std::vector<BatchItem> out(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    try {
      out[i].result = align(model, pairs[i].first, pairs[i].second, cfg, derive_seed(base_seed, i));
    } catch (const std::exception& e) {
      out[i].error = e.what();
    }
  }
  return out;
}

}  // namespace dmalign::sampler
