#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dmalign {

// Error taxonomy shared by every module.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};
struct MetricError : std::domain_error {
  using std::domain_error::domain_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct RenderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// NCHW extents. Vectors are stored as (n, dim, 1, 1); scalars as (1, 1, 1, 1).
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  [[nodiscard]] std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  [[nodiscard]] int dim(int i) const {
    switch (i) {
      case 0: return n;
      case 1: return c;
      case 2: return h;
      default: return w;
    }
  }
  friend bool operator==(const Shape&, const Shape&) = default;

  [[nodiscard]] std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f) : shape_(shape), data_(shape.numel(), fill) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      throw ShapeError("negative tensor extent " + shape.str());
    }
  }
  Tensor(Shape shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  static Tensor scalar(float v) { return Tensor(Shape{}, v); }

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  [[nodiscard]] std::span<float> span() { return data_; }
  [[nodiscard]] std::span<const float> span() const { return data_; }
  [[nodiscard]] float* data() { return data_.data(); }
  [[nodiscard]] const float* data() const { return data_.data(); }
  [[nodiscard]] std::vector<float>& vec() { return data_; }
  [[nodiscard]] const std::vector<float>& vec() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  [[nodiscard]] std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  float& operator()(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  float operator()(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  /// Pointer to the (n, c) plane.
  float* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  [[nodiscard]] const float* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  [[nodiscard]] float item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_.str());
    return data_[0];
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  [[nodiscard]] Tensor reshaped(Shape s) const {
    if (s.numel() != shape_.numel()) {
      throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    }
    Tensor t = *this;
    t.shape_ = s;
    return t;
  }

  /// Samples [begin, begin+count) along the batch axis.
  [[nodiscard]] Tensor batch_slice(int begin, int count) const {
    if (begin < 0 || count < 0 || begin + count > shape_.n) {
      throw ShapeError("batch slice out of range for " + shape_.str());
    }
    Shape s = shape_;
    s.n = count;
    const std::size_t per = static_cast<std::size_t>(shape_.c) * shape_.plane();
    std::vector<float> d(data_.begin() + static_cast<std::ptrdiff_t>(begin * per),
                         data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * per));
    return Tensor(s, std::move(d));
  }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  void require_same(const Tensor& o, const char* what) const {
    if (!(shape_ == o.shape_)) {
      throw ShapeError(std::string(what) + ": shape mismatch " + shape_.str() + " vs " +
                       o.shape_.str());
    }
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<float> data_;
};

/// Stacks same-shaped tensors along the batch axis.
inline Tensor stack_batch(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack_batch of empty list");
  Shape s = items.front().shape();
  s.n = 0;
  for (const auto& t : items) {
    if (t.shape().c != s.c || t.shape().h != s.h || t.shape().w != s.w) {
      throw ShapeError("stack_batch: mismatched " + t.shape().str());
    }
    s.n += t.shape().n;
  }
  std::vector<float> d;
  d.reserve(s.numel());
  for (const auto& t : items) d.insert(d.end(), t.vec().begin(), t.vec().end());
  return Tensor(s, std::move(d));
}

inline Tensor concat_channels(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("concat_channels of empty list");
  Shape s = items.front().shape();
  s.c = 0;
  for (const auto& t : items) {
    if (t.shape().n != s.n || t.shape().h != s.h || t.shape().w != s.w) {
      throw ShapeError("concat_channels: mismatched " + t.shape().str() + " vs " + s.str());
    }
    s.c += t.shape().c;
  }
  Tensor out(s);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    int c0 = 0;
    for (const auto& t : items) {
      std::copy_n(t.plane(n, 0), static_cast<std::size_t>(t.shape().c) * plane, out.plane(n, c0));
      c0 += t.shape().c;
    }
  }
  return out;
}

/// Mirrors every plane left-right.
inline Tensor flip_horizontal(const Tensor& t) {
  Tensor out(t.shape());
  const Shape& s = t.shape();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) out(n, c, y, x) = t(n, c, y, s.w - 1 - x);
  return out;
}

inline Tensor crop(const Tensor& t, int y0, int x0, int h, int w) {
  const Shape& s = t.shape();
  if (y0 < 0 || x0 < 0 || y0 + h > s.h || x0 + w > s.w) {
    throw ShapeError("crop window out of range for " + s.str());
  }
  Tensor out(Shape{s.n, s.c, h, w});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out(n, c, y, x) = t(n, c, y0 + y, x0 + x);
  return out;
}

using Rng = std::mt19937_64;

/// Derives an independent stream from a base seed and a stream index (splitmix64).
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline Tensor randn(Shape shape, Rng& rng) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  Tensor t(shape);
  for (auto& v : t.span()) v = nd(rng);
  return t;
}

inline Tensor rand_uniform(Shape shape, Rng& rng, float lo, float hi) {
  std::uniform_real_distribution<float> ud(lo, hi);
  Tensor t(shape);
  for (auto& v : t.span()) v = ud(rng);
  return t;
}

/// 64-bit FNV-1a over raw bytes.
inline std::uint64_t fnv1a(const void* bytes, std::size_t len,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

}  // namespace dmalign
