#pragma once

#include <string>

#include "dmalign/core/checkpoint.hpp"

namespace dmalign::dmp {

enum class Resolution { Latent, Image };

inline const char* to_string(Resolution r) { return r == Resolution::Latent ? "latent" : "image"; }

/// Single-channel field in [0,1] tagged with the resolution it lives at.
struct MaskField {
  Var value;  // (N,1,h,w)
  Resolution resolution = Resolution::Latent;
};

/// Per-offset inner products over a (2r+1)^2 neighbourhood, zero padded.
inline Var correlation(const Var& v1, const Var& v2, int radius) {
  if (radius < 0) throw ParameterError("correlation radius must be non-negative");
  if (!(v1.shape() == v2.shape())) {
    throw ShapeError("correlation: " + v1.shape().str() + " vs " + v2.shape().str());
  }
  return ops::correlation(v1, v2, radius);
}

struct PredictorConfig {
  int radius = 3;
  int hidden1 = 32;
  int hidden2 = 16;

  [[nodiscard]] int volume_channels() const { return (2 * radius + 1) * (2 * radius + 1); }
  [[nodiscard]] json to_json() const { return {{"radius", radius}, {"hidden1", hidden1}, {"hidden2", hidden2}}; }
  static PredictorConfig from_json(const json& j) {
    PredictorConfig c;
    c.radius = j.value("radius", c.radius);
    c.hidden1 = j.value("hidden1", c.hidden1);
    c.hidden2 = j.value("hidden2", c.hidden2);
    return c;
  }
};

/// Three 3x3 convolutions with SiLU between them and a terminal sigmoid.
class MaskPredictor {
 public:
  MaskPredictor() = default;
  MaskPredictor(nn::ParameterSet& ps, const std::string& name, PredictorConfig cfg, Rng& rng) : cfg_(cfg) {
    c1_ = nn::Conv2d(ps, name + ".conv1", cfg.volume_channels(), cfg.hidden1, 3, rng);
    c2_ = nn::Conv2d(ps, name + ".conv2", cfg.hidden1, cfg.hidden2, 3, rng);
    c3_ = nn::Conv2d(ps, name + ".conv3", cfg.hidden2, 1, 3, rng);
  }

  [[nodiscard]] const PredictorConfig& config() const { return cfg_; }

  [[nodiscard]] MaskField operator()(const Var& corr) const {
    if (corr.shape().c != cfg_.volume_channels()) {
      throw ShapeError("mask predictor expects " + std::to_string(cfg_.volume_channels()) + " correlation channels, got " +
                       std::to_string(corr.shape().c));
    }
    Var h = ops::silu(c1_(corr));
    h = ops::silu(c2_(h));
    return {ops::sigmoid(c3_(h)), Resolution::Latent};
  }

 private:
  PredictorConfig cfg_;
  nn::Conv2d c1_;
  nn::Conv2d c2_;
  nn::Conv2d c3_;
};

/// r applications of a 3x3 max filter.
inline MaskField dilate(const MaskField& m, int r) {
  if (r < 0) throw ParameterError("dilation radius must be non-negative");
  Var v = m.value;
  for (int i = 0; i < r; ++i) v = ops::max_filter3x3(v);
  return {v, m.resolution};
}

/// V_M = V2 * m + V1 * (1 - m), mask broadcast over channels.
inline Var mix_latents(const Var& v1, const Var& v2, const MaskField& m) {
  if (m.resolution != Resolution::Latent) {
    throw ContractError(std::string("mix_latents needs a latent-resolution mask, got ") + to_string(m.resolution));
  }
  if (!(v1.shape() == v2.shape())) throw ShapeError("mix_latents: latent shapes differ");
  const Shape ms = m.value.shape();
  if (ms.c != 1 || ms.h != v1.shape().h || ms.w != v1.shape().w || (ms.n != 1 && ms.n != v1.shape().n)) {
    throw ShapeError("mix_latents: mask " + ms.str() + " does not match latent " + v1.shape().str());
  }
  return ops::add(ops::mul(v2, m.value), ops::mul(v1, ops::one_minus(m.value)));
}

/// Bilinear upsampling by the codec factor, clamped to [0,1].
inline MaskField upsample_mask(const MaskField& m, int factor) {
  if (m.resolution != Resolution::Latent) throw ContractError("upsample_mask expects a latent-resolution mask");
  return {ops::clamp(ops::upsample_bilinear(m.value, factor), 0.0f, 1.0f), Resolution::Image};
}

struct DmpOutput {
  Var correlation;
  MaskField mask;          // sigmoid output, latent resolution
  MaskField mask_dilated;  // after r max filters, latent resolution
  Var mixed;               // V_M
};

/// Correlation -> mask -> dilation -> mixing.
inline DmpOutput run(const MaskPredictor& predictor, const Var& v1, const Var& v2, int dilation_r) {
  DmpOutput o;
  o.correlation = correlation(v1, v2, predictor.config().radius);
  o.mask = predictor(o.correlation);
  o.mask_dilated = dilate(o.mask, dilation_r);
  o.mixed = mix_latents(v1, v2, o.mask_dilated);
  return o;
}

/// Hard mask at a threshold.
inline Tensor binarize(const Tensor& m, float threshold = 0.5f) {
  Tensor out(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] >= threshold ? 1.0f : 0.0f;
  return out;
}

/// Block-average downsampling of an image-resolution mask, then binarized at 0.5.
inline Tensor downsample_mask(const Tensor& m, int factor) {
  const Shape s = m.shape();
  if (s.h % factor || s.w % factor) throw ShapeError("downsample_mask: size not divisible by factor");
  Tensor out(Shape{s.n, s.c, s.h / factor, s.w / factor});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h / factor; ++y)
        for (int x = 0; x < s.w / factor; ++x) {
          double acc = 0.0;
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx) acc += m(n, c, y * factor + dy, x * factor + dx);
          out(n, c, y, x) = acc / (factor * factor) >= 0.5 ? 1.0f : 0.0f;
        }
  return out;
}

}  // namespace dmalign::dmp
