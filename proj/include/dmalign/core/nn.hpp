#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "dmalign/core/ops.hpp"

namespace dmalign::nn {

/// Ordered, named collection of trainable tensors. Layers register into it at
/// construction; checkpoints and optimizers iterate it in registration order.
class ParameterSet {
 public:
  Var& add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name " + name);
    index_[name] = params_.size();
    params_.push_back({name, Var(std::move(init), true)});
    return params_.back().second;
  }

  [[nodiscard]] std::size_t size() const { return params_.size(); }
  [[nodiscard]] const std::string& name(std::size_t i) const { return params_[i].first; }
  [[nodiscard]] Var& operator[](std::size_t i) { return params_[i].second; }
  [[nodiscard]] const Var& operator[](std::size_t i) const { return params_[i].second; }
  [[nodiscard]] const Var& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return params_[it->second].second;
  }

  [[nodiscard]] std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.second.value().size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.second.zero_grad();
  }

  void set_trainable(bool on) {
    for (auto& p : params_) p.second.set_requires_grad(on);
  }

  /// FNV-1a over names, shapes and raw parameter bytes.
  [[nodiscard]] std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, var] : params_) {
      h = fnv1a(name.data(), name.size(), h);
      const Shape s = var.shape();
      h = fnv1a(&s, sizeof(s), h);
      h = fnv1a(var.value().data(), var.value().size() * sizeof(float), h);
    }
    return h;
  }

  /// Replaces a parameter's value in place, keeping registration order.
  void assign(const std::string& name, Tensor value) {
    auto it = index_.find(name);
    if (it == index_.end()) throw IoError("checkpoint holds unknown parameter " + name);
    Var& v = params_[it->second].second;
    if (!(v.shape() == value.shape())) {
      throw IoError("checkpoint parameter " + name + " has shape " + value.shape().str() +
                    ", expected " + v.shape().str());
    }
    v.mutable_value() = std::move(value);
  }

 private:
  std::vector<std::pair<std::string, Var>> params_;
  std::map<std::string, std::size_t> index_;
};

inline Tensor he_normal(Shape s, int fan_in, Rng& rng, float gain = 1.0f) {
  std::normal_distribution<float> nd(0.0f, gain * std::sqrt(2.0f / static_cast<float>(fan_in)));
  Tensor t(s);
  for (auto& v : t.span()) v = nd(rng);
  return t;
}

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterSet& ps, const std::string& name, int cin, int cout, int k, Rng& rng,
         int stride = 1, float init_gain = 1.0f)
      : stride_(stride), pad_(k / 2), cin_(cin), cout_(cout) {
    weight_ = ps.add(name + ".weight", he_normal(Shape{cout, cin, k, k}, cin * k * k, rng, init_gain));
    bias_ = ps.add(name + ".bias", Tensor(Shape{1, cout, 1, 1}));
  }

  [[nodiscard]] Var operator()(const Var& x) const {
    if (x.shape().c != cin_) {
      throw ShapeError("conv expects " + std::to_string(cin_) + " input channels, got " +
                       std::to_string(x.shape().c));
    }
    return ops::conv2d(x, weight_, bias_, stride_, pad_);
  }
  [[nodiscard]] int in_channels() const { return cin_; }
  [[nodiscard]] int out_channels() const { return cout_; }
  [[nodiscard]] const Var& weight() const { return weight_; }

 private:
  Var weight_;
  Var bias_;
  int stride_ = 1;
  int pad_ = 0;
  int cin_ = 0;
  int cout_ = 0;
};

inline int default_groups(int channels) {
  for (int g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(ParameterSet& ps, const std::string& name, int channels)
      : groups_(default_groups(channels)) {
    gamma_ = ps.add(name + ".gamma", Tensor(Shape{1, channels, 1, 1}, 1.0f));
    beta_ = ps.add(name + ".beta", Tensor(Shape{1, channels, 1, 1}));
  }
  [[nodiscard]] Var operator()(const Var& x) const {
    return ops::group_norm(x, gamma_, beta_, groups_);
  }

 private:
  Var gamma_;
  Var beta_;
  int groups_ = 1;
};

/// Dense layer over (n, dim, 1, 1) vectors.
class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& ps, const std::string& name, int in, int out, Rng& rng,
         float init_gain = 1.0f)
      : conv_(ps, name, in, out, 1, rng, 1, init_gain) {}
  [[nodiscard]] Var operator()(const Var& x) const { return conv_(x); }

 private:
  Conv2d conv_;
};

/// GN-SiLU-conv twice with an optional per-block embedding projection added
/// after the first convolution and a 1x1 skip when widths differ.
class ResBlock {
 public:
  ResBlock() = default;
  ResBlock(ParameterSet& ps, const std::string& name, int cin, int cout, int emb_dim, Rng& rng)
      : norm1_(ps, name + ".norm1", cin),
        conv1_(ps, name + ".conv1", cin, cout, 3, rng),
        norm2_(ps, name + ".norm2", cout),
        conv2_(ps, name + ".conv2", cout, cout, 3, rng, 1, 0.1f) {
    if (emb_dim > 0) emb_ = Linear(ps, name + ".emb", emb_dim, cout, rng, 0.5f);
    has_emb_ = emb_dim > 0;
    if (cin != cout) skip_ = Conv2d(ps, name + ".skip", cin, cout, 1, rng);
    has_skip_ = cin != cout;
  }

  [[nodiscard]] Var operator()(const Var& x, const Var& emb = Var()) const {
    Var h = conv1_(ops::silu(norm1_(x)));
    if (has_emb_) {
      if (!emb.defined()) throw ContractError("residual block requires an embedding");
      h = ops::add(h, emb_(emb));
    }
    h = conv2_(ops::silu(norm2_(h)));
    return ops::add(has_skip_ ? skip_(x) : x, h);
  }

 private:
  GroupNorm norm1_;
  Conv2d conv1_;
  GroupNorm norm2_;
  Conv2d conv2_;
  Linear emb_;
  Conv2d skip_;
  bool has_emb_ = false;
  bool has_skip_ = false;
};

struct AdamConfig {
  float lr = 2e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float grad_clip = 1.0f;  // global-norm clip; <= 0 disables
  long total_steps = 0;    // cosine decay horizon; 0 keeps lr constant
  float min_lr_ratio = 0.05f;
};

/// Adam over a ParameterSet with cosine learning-rate decay.
class Adam {
 public:
  Adam(ParameterSet& params, AdamConfig cfg) : params_(&params), cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.emplace_back(params[i].shape());
      v_.emplace_back(params[i].shape());
    }
  }

  [[nodiscard]] float current_lr() const {
    if (cfg_.total_steps <= 0) return cfg_.lr;
    const double p = std::min(1.0, static_cast<double>(step_) / static_cast<double>(cfg_.total_steps));
    const double cosv = 0.5 * (1.0 + std::cos(std::numbers::pi * p));
    return static_cast<float>(cfg_.lr * (cfg_.min_lr_ratio + (1.0 - cfg_.min_lr_ratio) * cosv));
  }

  /// Applies one update from the accumulated gradients; returns the pre-clip grad norm.
  float step() {
    double sq = 0.0;
    for (std::size_t i = 0; i < params_->size(); ++i) {
      const Tensor& g = (*params_)[i].grad();
      for (float v : g.span()) sq += static_cast<double>(v) * v;
    }
    const float norm = static_cast<float>(std::sqrt(sq));
    const float clip = (cfg_.grad_clip > 0.0f && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0f;
    const float lr = current_lr();
    ++step_;
    const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(step_));
    const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(step_));
    for (std::size_t i = 0; i < params_->size(); ++i) {
      Var& p = (*params_)[i];
      const Tensor& g = p.grad();
      if (g.size() != p.value().size()) continue;
      float* w = p.mutable_value().data();
      float* m = m_[i].data();
      float* v = v_[i].data();
      for (std::size_t k = 0; k < g.size(); ++k) {
        const float gk = g[k] * clip;
        m[k] = cfg_.beta1 * m[k] + (1.0f - cfg_.beta1) * gk;
        v[k] = cfg_.beta2 * v[k] + (1.0f - cfg_.beta2) * gk * gk;
        w[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg_.eps);
      }
    }
    return norm;
  }

  [[nodiscard]] long steps_taken() const { return step_; }
  [[nodiscard]] const std::vector<Tensor>& first_moments() const { return m_; }
  [[nodiscard]] const std::vector<Tensor>& second_moments() const { return v_; }
  void restore(long step, std::vector<Tensor> m, std::vector<Tensor> v) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw IoError("optimizer state size mismatch");
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  ParameterSet* params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  long step_ = 0;
};

}  // namespace dmalign::nn
