#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dmalign/core/checkpoint.hpp"

namespace dmalign::diffusion {

/// Discrete noise schedule indexed 0..T with alpha_bar[0] = 1.
struct NoiseSchedule {
  int T = 0;
  std::string kind = "linear";
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta;       // beta[0] = 0
  std::vector<double> alpha;      // alpha[0] = 1
  std::vector<double> alpha_bar;  // alpha_bar[0] = 1

  [[nodiscard]] json to_json() const {
    return {{"T", T}, {"kind", kind}, {"beta_start", beta_start}, {"beta_end", beta_end}};
  }
  [[nodiscard]] std::string fingerprint() const { return hex64(json_hash(to_json())); }

  void check_t(int t, int lo) const {
    if (t < lo || t > T) throw ParameterError("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " + std::to_string(T) + "]");
  }
};

/// Schedule from explicit per-step betas (beta[i] is step i+1).
inline NoiseSchedule schedule_from_betas(const std::vector<double>& betas) {
  if (betas.empty()) throw ConfigError("schedule needs T >= 1");
  NoiseSchedule s;
  s.T = static_cast<int>(betas.size());
  s.kind = "custom";
  s.beta_start = betas.front();
  s.beta_end = betas.back();
  s.beta.assign(1, 0.0);
  s.alpha.assign(1, 1.0);
  s.alpha_bar.assign(1, 1.0);
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("beta must lie in (0, 1)");
    s.beta.push_back(b);
    s.alpha.push_back(1.0 - b);
    s.alpha_bar.push_back(s.alpha_bar.back() * (1.0 - b));
  }
  return s;
}

inline NoiseSchedule make_schedule(int T, const std::string& kind = "linear", double beta_start = 1e-4,
                                   double beta_end = 0.02) {
  if (T < 1) throw ConfigError("schedule needs T >= 1");
  if (kind != "linear") throw ConfigError("unknown schedule kind '" + kind + "'");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    betas[static_cast<std::size_t>(i)] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (T - 1);
  }
  NoiseSchedule s = schedule_from_betas(betas);
  s.kind = kind;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  return s;
}

inline NoiseSchedule schedule_from_json(const json& j) {
  return make_schedule(j.at("T").get<int>(), j.value("kind", std::string("linear")), j.at("beta_start").get<double>(),
                       j.at("beta_end").get<double>());
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  x0.require_same(eps, "q_sample");
  s.check_t(t, 0);
  const double a = std::sqrt(s.alpha_bar[static_cast<std::size_t>(t)]);
  const double b = std::sqrt(1.0 - s.alpha_bar[static_cast<std::size_t>(t)]);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(a * x0[i] + b * eps[i]);
  return out;
}

/// Per-sample timesteps for a batch (x0 is (N,C,H,W), ts has N entries).
inline Tensor q_sample(const Tensor& x0, const std::vector<int>& ts, const Tensor& eps, const NoiseSchedule& s) {
  x0.require_same(eps, "q_sample");
  if (static_cast<int>(ts.size()) != x0.shape().n) throw ShapeError("q_sample: one timestep per sample required");
  Tensor out(x0.shape());
  const std::size_t per = x0.size() / ts.size();
  for (std::size_t n = 0; n < ts.size(); ++n) {
    s.check_t(ts[n], 0);
    const double a = std::sqrt(s.alpha_bar[static_cast<std::size_t>(ts[n])]);
    const double b = std::sqrt(1.0 - s.alpha_bar[static_cast<std::size_t>(ts[n])]);
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) out[i] = static_cast<float>(a * x0[i] + b * eps[i]);
  }
  return out;
}

/// eps_hat = (x_t - sqrt(abar_t) x0_hat) / sqrt(1 - abar_t)
inline Tensor eps_from_x0(const Tensor& x_t, const Tensor& x0_hat, int t, const NoiseSchedule& s) {
  x_t.require_same(x0_hat, "eps_from_x0");
  s.check_t(t, 0);
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  if (ab >= 1.0) throw ParameterError("eps_from_x0: alpha_bar is 1 at t=" + std::to_string(t));
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>((x_t[i] - a * x0_hat[i]) / b);
  return out;
}

/// x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)
inline Tensor x0_from_eps(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& s) {
  x_t.require_same(eps_hat, "x0_from_eps");
  s.check_t(t, 0);
  const double ab = s.alpha_bar[static_cast<std::size_t>(t)];
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>((x_t[i] - b * eps_hat[i]) / a);
  return out;
}

/// One deterministic-capable DDIM update from t to t_prev. `noise` is read
/// only when sigma > 0.
inline Tensor ddim_step(const Tensor& x_t, const Tensor& x0_hat, int t, int t_prev, double sigma,
                        const NoiseSchedule& s, const Tensor* noise = nullptr) {
  s.check_t(t, 1);
  if (t_prev < 0 || t_prev >= t) throw ParameterError("ddim_step needs 0 <= t_prev < t");
  if (sigma < 0.0) throw ParameterError("ddim_step: sigma must be non-negative");
  const double ab_prev = s.alpha_bar[static_cast<std::size_t>(t_prev)];
  const double rest = 1.0 - ab_prev - sigma * sigma;
  if (rest < -1e-12) throw ParameterError("ddim_step: sigma^2 exceeds 1 - alpha_bar[t_prev]");
  if (sigma > 0.0) {
    if (!noise) throw ParameterError("ddim_step: noise required when sigma > 0");
    noise->require_same(x_t, "ddim_step noise");
  }
  const Tensor eps = eps_from_x0(x_t, x0_hat, t, s);
  const double a = std::sqrt(ab_prev);
  const double b = std::sqrt(std::max(0.0, rest));
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = a * x0_hat[i] + b * eps[i];
    if (sigma > 0.0) v += sigma * (*noise)[i];
    out[i] = static_cast<float>(v);
  }
  return out;
}

/// Timesteps visited by a strided sampler: T, T-stride, ... (all >= 1), each
/// paired with its successor; the last successor is 0.
inline std::vector<std::pair<int, int>> stride_schedule(int T, int stride) {
  if (stride < 1 || stride > T) throw ParameterError("stride must lie in [1, T]");
  std::vector<std::pair<int, int>> steps;
  for (int t = T; t >= 1; t -= stride) steps.emplace_back(t, std::max(0, t - stride));
  return steps;
}

}  // namespace dmalign::diffusion
