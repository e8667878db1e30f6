#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dmalign/core/checkpoint.hpp"
#include "dmalign/diffusion.hpp"

namespace dmalign::denoiser {

enum class Parameterization { PredX0, PredEps };

inline std::string to_string(Parameterization p) { return p == Parameterization::PredX0 ? "pred_x0" : "pred_eps"; }

inline Parameterization parameterization_from_string(const std::string& s) {
  if (s == "pred_x0") return Parameterization::PredX0;
  if (s == "pred_eps") return Parameterization::PredEps;
  throw ConfigError("unknown parameterization '" + s + "' (expected pred_x0 or pred_eps)");
}

/// Sinusoidal embedding: [sin(t w_0), cos(t w_0), sin(t w_1), ...] with
/// w_k = 10000^(-2k/dim).
inline std::vector<float> pe_embed(int t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("embedding dimension must be positive and even");
  if (t < 0) throw ParameterError("embedding timestep must be non-negative");
  std::vector<float> e(static_cast<std::size_t>(dim));
  for (int k = 0; k < dim / 2; ++k) {
    const double arg = static_cast<double>(t) / std::pow(10000.0, 2.0 * k / dim);
    e[static_cast<std::size_t>(2 * k)] = static_cast<float>(std::sin(arg));
    e[static_cast<std::size_t>(2 * k + 1)] = static_cast<float>(std::cos(arg));
  }
  return e;
}

/// (N, dim, 1, 1) embedding batch.
inline Tensor pe_batch(const std::vector<int>& ts, int dim) {
  Tensor out(Shape{static_cast<int>(ts.size()), dim, 1, 1});
  for (std::size_t n = 0; n < ts.size(); ++n) {
    const auto e = pe_embed(ts[n], dim);
    std::copy(e.begin(), e.end(), out.plane(static_cast<int>(n), 0));
  }
  return out;
}

struct UNetConfig {
  int latent_channels = 4;
  int cond_channels = 12;
  int base = 64;
  std::vector<int> mults{1, 2, 2};  // one entry per resolution
  int pe_dim = 128;

  [[nodiscard]] int emb_dim() const { return 2 * base; }
  [[nodiscard]] int downsamplings() const { return static_cast<int>(mults.size()) - 1; }

  void validate() const {
    if (latent_channels < 1 || cond_channels < 0 || base < 1 || mults.empty()) throw ConfigError("invalid UNet config");
    if (pe_dim <= 0 || pe_dim % 2) throw ConfigError("pe_dim must be positive and even");
  }
  [[nodiscard]] json to_json() const {
    return {{"latent_channels", latent_channels}, {"cond_channels", cond_channels}, {"base", base}, {"mults", mults}, {"pe_dim", pe_dim}};
  }
  static UNetConfig from_json(const json& j) {
    UNetConfig c;
    c.latent_channels = j.value("latent_channels", c.latent_channels);
    c.cond_channels = j.value("cond_channels", c.cond_channels);
    c.base = j.value("base", c.base);
    c.mults = j.value("mults", c.mults);
    c.pe_dim = j.value("pe_dim", c.pe_dim);
    c.validate();
    return c;
  }
};

/// Residual UNet over [x_t, cond] with a timestep embedding added in every
/// block. Output has latent_channels channels and the input's spatial size.
class UNet {
 public:
  UNet(nn::ParameterSet& ps, UNetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int E = cfg_.emb_dim();
    temb1_ = nn::Linear(ps, "temb.fc1", cfg_.pe_dim, E, rng);
    temb2_ = nn::Linear(ps, "temb.fc2", E, E, rng);
    const int L = static_cast<int>(cfg_.mults.size());
    conv_in_ = nn::Conv2d(ps, "in", cfg_.latent_channels + cfg_.cond_channels, cfg_.base, 3, rng);
    std::vector<int> skip_ch;
    int ch = cfg_.base;
    for (int l = 0; l < L; ++l) {
      const int out = cfg_.base * cfg_.mults[static_cast<std::size_t>(l)];
      down_.emplace_back(ps, "down" + std::to_string(l), ch, out, E, rng);
      ch = out;
      skip_ch.push_back(ch);
      if (l + 1 < L) downsample_.emplace_back(ps, "downsample" + std::to_string(l), ch, ch, 3, rng, 2);
    }
    mid1_ = nn::ResBlock(ps, "mid1", ch, ch, E, rng);
    mid2_ = nn::ResBlock(ps, "mid2", ch, ch, E, rng);
    for (int l = L - 1; l >= 0; --l) {
      const int out = cfg_.base * cfg_.mults[static_cast<std::size_t>(l)];
      up_.emplace_back(ps, "up" + std::to_string(l), ch + skip_ch[static_cast<std::size_t>(l)], out, E, rng);
      ch = out;
    }
    norm_out_ = nn::GroupNorm(ps, "out.norm", ch);
    conv_out_ = nn::Conv2d(ps, "out.conv", ch, cfg_.latent_channels, 3, rng, 1, 0.0f);
  }

  [[nodiscard]] const UNetConfig& config() const { return cfg_; }

  [[nodiscard]] Var operator()(const Var& x_t, const Var& cond, const std::vector<int>& ts) const {
    const Shape xs = x_t.shape();
    if (xs.c != cfg_.latent_channels) {
      throw ShapeError("denoiser expects " + std::to_string(cfg_.latent_channels) + " latent channels, got " + xs.str());
    }
    if (cond.shape().c != cfg_.cond_channels) {
      throw ShapeError("denoiser expects " + std::to_string(cfg_.cond_channels) + " condition channels, got " +
                       cond.shape().str());
    }
    if (cond.shape().h != xs.h || cond.shape().w != xs.w || cond.shape().n != xs.n) {
      throw ShapeError("condition " + cond.shape().str() + " does not match latent " + xs.str());
    }
    const int div = 1 << cfg_.downsamplings();
    if (xs.h % div || xs.w % div) {
      throw ShapeError("latent size " + std::to_string(xs.w) + "x" + std::to_string(xs.h) + " must be divisible by " +
                       std::to_string(div));
    }
    if (static_cast<int>(ts.size()) != xs.n) throw ShapeError("one timestep per batch item required");

    const Var emb = temb2_(ops::silu(temb1_(Var(pe_batch(ts, cfg_.pe_dim)))));
    const Var emb_act = ops::silu(emb);
    Var h = conv_in_(ops::concat({x_t, cond}));
    std::vector<Var> skips;
    for (std::size_t l = 0; l < down_.size(); ++l) {
      h = down_[l](h, emb_act);
      skips.push_back(h);
      if (l < downsample_.size()) h = downsample_[l](h);
    }
    h = mid2_(mid1_(h, emb_act), emb_act);
    for (std::size_t i = 0; i < up_.size(); ++i) {
      const std::size_t l = down_.size() - 1 - i;
      if (i > 0) h = ops::upsample_nearest2x(h);
      h = up_[i](ops::concat({h, skips[l]}), emb_act);
    }
    return conv_out_(ops::silu(norm_out_(h)));
  }

 private:
  UNetConfig cfg_;
  nn::Linear temb1_;
  nn::Linear temb2_;
  nn::Conv2d conv_in_;
  std::vector<nn::ResBlock> down_;
  std::vector<nn::Conv2d> downsample_;
  nn::ResBlock mid1_;
  nn::ResBlock mid2_;
  std::vector<nn::ResBlock> up_;
  nn::GroupNorm norm_out_;
  nn::Conv2d conv_out_;
};

/// Network output interpreted under a parameterization, converted to x0_hat.
inline Tensor to_x0(const Tensor& x_t, const Tensor& out, const std::vector<int>& ts, Parameterization p,
                    const diffusion::NoiseSchedule& s) {
  if (p == Parameterization::PredX0) return out;
  if (ts.size() == 1 || x_t.shape().n == 1) return diffusion::x0_from_eps(x_t, out, ts.front(), s);
  std::vector<Tensor> parts;
  for (int n = 0; n < x_t.shape().n; ++n) {
    parts.push_back(diffusion::x0_from_eps(x_t.batch_slice(n, 1), out.batch_slice(n, 1), ts[static_cast<std::size_t>(n)], s));
  }
  return stack_batch(parts);
}

}  // namespace dmalign::denoiser
