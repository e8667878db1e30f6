#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmalign/core/checkpoint.hpp"
#include "dmalign/io/image.hpp"

// Procedural layered 2D scenes with closed-form alignment ground truth.
//
// A scene is a static background raster, a stack of alpha sprites moving
// rigidly in world coordinates, a similarity-transform camera path and a global
// gain/bias illumination ramp. For a pair of times (t1, t2) the aligned target
// is the scene at t2 seen from the camera pose at t1, so it differs from the
// second frame by camera motion only and the ground-truth flow is analytic.

namespace dmalign::scene {

inline constexpr const char* kGeneratorVersion = "2d-layered-1";

enum class Subset { LcLf, LcSf, ScLf, ScSf };

inline constexpr std::array<Subset, 4> kAllSubsets{Subset::LcLf, Subset::LcSf, Subset::ScLf,
                                                   Subset::ScSf};

inline std::string to_string(Subset s) {
  switch (s) {
    case Subset::LcLf: return "LcLf";
    case Subset::LcSf: return "LcSf";
    case Subset::ScLf: return "ScLf";
    case Subset::ScSf: return "ScSf";
  }
  return "?";
}

inline Subset subset_from_string(const std::string& s) {
  for (Subset v : kAllSubsets) {
    if (to_string(v) == s) return v;
  }
  throw IoError("unknown subset tag '" + s + "'");
}

inline bool large_camera(Subset s) { return s == Subset::LcLf || s == Subset::LcSf; }
inline bool large_foreground(Subset s) { return s == Subset::LcLf || s == Subset::ScLf; }

struct SubsetThresholds {
  double camera_px = 8.0;
  double foreground_px = 8.0;
};

/// Independent thresholding; a magnitude equal to its threshold counts as large.
inline Subset classify_subset(double camera_mag, double fg_mag, const SubsetThresholds& th) {
  const bool lc = camera_mag >= th.camera_px;
  const bool lf = fg_mag >= th.foreground_px;
  if (lc) return lf ? Subset::LcLf : Subset::LcSf;
  return lf ? Subset::ScLf : Subset::ScSf;
}

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  [[nodiscard]] bool valid() const { return lo <= hi; }
  [[nodiscard]] double sample(Rng& rng) const {
    if (hi <= lo) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  }
};

inline void to_json(nlohmann::json& j, const Interval& r) { j = nlohmann::json::array({r.lo, r.hi}); }
inline void from_json(const nlohmann::json& j, Interval& r) {
  r.lo = j.at(0).get<double>();
  r.hi = j.at(1).get<double>();
}

/// Motion ranges for one magnitude class. Translations are in pixels at the
/// configured viewport; rotations in degrees; scale_delta bounds |s - 1|.
struct MotionClass {
  Interval shift_px;
  double max_rotation_deg = 0.0;
  double max_scale_delta = 0.0;
};

struct GeneratorConfig {
  int width = 256;
  int height = 256;
  double margin_frac = 0.3;  // background margin around the viewport, relative to max(w, h)
  int min_sprites = 1;
  int max_sprites = 3;
  Interval sprite_radius_frac{0.12, 0.22};  // of viewport height
  double edge_softness_px = 2.5;            // logistic alpha edge scale
  Interval texture_wavelength_px{28.0, 112.0};
  int texture_waves = 8;
  double large_threshold_px = 8.0;  // at 256-px viewport height; scaled by height/256
  MotionClass camera_small{{0.25 * 8.0, 0.8 * 8.0}, 0.5, 0.005};
  MotionClass camera_large{{1.2 * 8.0, 3.0 * 8.0}, 4.0, 0.03};
  MotionClass fg_small{{0.25 * 8.0, 0.8 * 8.0}, 2.0, 0.0};
  MotionClass fg_large{{1.2 * 8.0, 3.0 * 8.0}, 10.0, 0.0};
  Interval illum_gain{0.8, 1.25};
  Interval illum_bias{-16.0 / 255.0, 16.0 / 255.0};
  Interval mask_area{0.02, 0.6};  // M_gt area fraction accepted for scenes with moving sprites
  double t1 = 0.0;
  Interval t2{1.0, 1.0};
  std::array<double, 4> subset_weights{1.0, 1.0, 1.0, 1.0};  // LcLf, LcSf, ScLf, ScSf
  int max_attempts = 500;

  /// Scales every pixel-valued range from a 256-px reference to this viewport height.
  [[nodiscard]] double scale() const { return static_cast<double>(height) / 256.0; }

  [[nodiscard]] SubsetThresholds thresholds() const {
    return {large_threshold_px * scale(), large_threshold_px * scale()};
  }

  void validate() const {
    auto bad = [](const std::string& m) { throw ConfigError("generator config: " + m); };
    if (width <= 0 || height <= 0) bad("viewport size must be positive");
    if (margin_frac <= 0.0) bad("margin_frac must be positive");
    if (min_sprites < 0 || max_sprites < min_sprites) bad("sprite count range invalid");
    if (!sprite_radius_frac.valid() || sprite_radius_frac.lo <= 0.0) bad("sprite radius range invalid");
    if (edge_softness_px <= 0.0) bad("edge_softness_px must be positive");
    if (!texture_wavelength_px.valid() || texture_wavelength_px.lo <= 0.0) bad("texture wavelength range invalid");
    if (texture_waves <= 0) bad("texture_waves must be positive");
    if (large_threshold_px <= 0.0) bad("large_threshold_px must be positive");
    for (const MotionClass* m : {&camera_small, &camera_large, &fg_small, &fg_large}) {
      if (!m->shift_px.valid() || m->shift_px.lo < 0.0) bad("motion shift range invalid");
      if (m->max_rotation_deg < 0.0 || m->max_scale_delta < 0.0) bad("negative motion bound");
    }
    for (const MotionClass* m : {&camera_small, &camera_large}) {
      if (m->max_rotation_deg > 15.0) bad("camera rotation above 15 degrees");
      if (m->max_scale_delta > 0.1) bad("camera scale outside [0.9, 1.1]");
    }
    if (!illum_gain.valid() || illum_gain.lo < 0.8 - 1e-9 || illum_gain.hi > 1.25 + 1e-9) bad("illumination gain outside [0.8, 1.25]");
    if (!illum_bias.valid() || std::abs(illum_bias.lo) > 16.0 / 255.0 + 1e-9 || std::abs(illum_bias.hi) > 16.0 / 255.0 + 1e-9) bad("illumination bias outside [-16, 16]/255");
    if (!mask_area.valid() || mask_area.lo < 0.0 || mask_area.hi > 1.0) bad("mask area range invalid");
    if (!t2.valid()) bad("t2 range invalid");
    if (t2.lo <= t1 && t2.hi >= t1) bad("t2 range must exclude t1");
    double wsum = 0.0;
    for (double w : subset_weights) {
      if (w < 0.0) bad("negative subset weight");
      wsum += w;
    }
    if (wsum <= 0.0) bad("subset weights sum to zero");
    if (max_attempts <= 0) bad("max_attempts must be positive");
  }

  /// Same geometry with every motion and illumination change disabled.
  [[nodiscard]] GeneratorConfig without_motion() const {
    GeneratorConfig c = *this;
    for (MotionClass* m : {&c.camera_small, &c.camera_large, &c.fg_small, &c.fg_large}) *m = MotionClass{};
    c.illum_gain = {1.0, 1.0};
    c.illum_bias = {0.0, 0.0};
    return c;
  }

  [[nodiscard]] nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
  [[nodiscard]] std::uint64_t hash() const { return json_hash(to_json()); }
};

inline void to_json(nlohmann::json& j, const MotionClass& m) {
  j = {{"shift_px", m.shift_px}, {"max_rotation_deg", m.max_rotation_deg}, {"max_scale_delta", m.max_scale_delta}};
}
inline void from_json(const nlohmann::json& j, MotionClass& m) {
  m.shift_px = j.at("shift_px").get<Interval>();
  m.max_rotation_deg = j.at("max_rotation_deg").get<double>();
  m.max_scale_delta = j.at("max_scale_delta").get<double>();
}

inline nlohmann::json GeneratorConfig::to_json() const {
  return {{"width", width},
          {"height", height},
          {"margin_frac", margin_frac},
          {"min_sprites", min_sprites},
          {"max_sprites", max_sprites},
          {"sprite_radius_frac", sprite_radius_frac},
          {"edge_softness_px", edge_softness_px},
          {"texture_wavelength_px", texture_wavelength_px},
          {"texture_waves", texture_waves},
          {"large_threshold_px", large_threshold_px},
          {"camera_small", camera_small},
          {"camera_large", camera_large},
          {"fg_small", fg_small},
          {"fg_large", fg_large},
          {"illum_gain", illum_gain},
          {"illum_bias", illum_bias},
          {"mask_area", mask_area},
          {"t1", t1},
          {"t2", t2},
          {"subset_weights", subset_weights},
          {"max_attempts", max_attempts},
          {"generator_version", kGeneratorVersion}};
}

/// Missing keys keep their defaults; pixel ranges are taken as given.
inline GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  try {
    get("width", c.width);
    get("height", c.height);
    get("margin_frac", c.margin_frac);
    get("min_sprites", c.min_sprites);
    get("max_sprites", c.max_sprites);
    get("sprite_radius_frac", c.sprite_radius_frac);
    get("edge_softness_px", c.edge_softness_px);
    get("texture_wavelength_px", c.texture_wavelength_px);
    get("texture_waves", c.texture_waves);
    get("large_threshold_px", c.large_threshold_px);
    get("camera_small", c.camera_small);
    get("camera_large", c.camera_large);
    get("fg_small", c.fg_small);
    get("fg_large", c.fg_large);
    get("illum_gain", c.illum_gain);
    get("illum_bias", c.illum_bias);
    get("mask_area", c.mask_area);
    get("t1", c.t1);
    get("t2", c.t2);
    get("subset_weights", c.subset_weights);
    get("max_attempts", c.max_attempts);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
  c.validate();
  return c;
}

// ------------------------------------------------------------------ geometry

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  [[nodiscard]] double norm() const { return std::hypot(x, y); }
  [[nodiscard]] Vec2 rotated(double a) const {
    const double c = std::cos(a);
    const double s = std::sin(a);
    return {c * x - s * y, s * x + c * y};
  }
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

/// Viewport pixel p maps to world point  scale * R(angle) * (p - vp_center) + bg_center + offset.
struct CameraPose {
  double scale = 1.0;
  double angle = 0.0;
  Vec2 offset;
  Vec2 vp_center;
  Vec2 bg_center;

  [[nodiscard]] Vec2 to_world(Vec2 p) const {
    return scale * (p - vp_center).rotated(angle) + bg_center + offset;
  }
  [[nodiscard]] Vec2 to_view(Vec2 w) const {
    return (1.0 / scale) * (w - bg_center - offset).rotated(-angle) + vp_center;
  }
};

/// Linear-in-time similarity path, identity at t = 0.
struct CameraPath {
  Vec2 shift;
  double rotation = 0.0;   // radians at t = 1
  double log_scale = 0.0;  // log scale at t = 1
  friend bool operator==(const CameraPath&, const CameraPath&) = default;
};

struct SpriteSpec {
  Tensor raster;  // (1, 4, h, w): RGB in [0,1] + straight alpha
  double semi_a = 0.0;
  double semi_b = 0.0;
  Vec2 center0;  // world position at t = 0
  double angle0 = 0.0;
  Vec2 velocity;      // world pixels per unit time
  double spin = 0.0;  // radians per unit time

  [[nodiscard]] Vec2 center(double t) const { return center0 + t * velocity; }
  [[nodiscard]] double angle(double t) const { return angle0 + t * spin; }
  [[nodiscard]] bool moves() const { return velocity.norm() > 0.0 || spin != 0.0; }
  /// Footprint test in world coordinates (inside the alpha = 0.5 contour).
  [[nodiscard]] bool covers(Vec2 w, double t) const {
    const Vec2 l = (w - center(t)).rotated(-angle(t));
    return (l.x * l.x) / (semi_a * semi_a) + (l.y * l.y) / (semi_b * semi_b) <= 1.0;
  }
  friend bool operator==(const SpriteSpec&, const SpriteSpec&) = default;
};

struct Illumination {
  double gain = 1.0;  // at t = 1
  double bias = 0.0;  // at t = 1
  [[nodiscard]] double gain_at(double t) const { return 1.0 + t * (gain - 1.0); }
  [[nodiscard]] double bias_at(double t) const { return t * bias; }
  friend bool operator==(const Illumination&, const Illumination&) = default;
};

struct SceneSpec {
  int width = 0;
  int height = 0;
  Tensor background;  // (1, 3, bh, bw) in [0,1]
  std::vector<SpriteSpec> sprites;
  CameraPath camera;
  Illumination illumination;
  double t1 = 0.0;
  double t2 = 1.0;
  std::uint64_t seed = 0;
  Subset target = Subset::ScSf;

  [[nodiscard]] CameraPose pose(double t) const {
    CameraPose p;
    p.scale = std::exp(t * camera.log_scale);
    p.angle = t * camera.rotation;
    p.offset = t * camera.shift;
    p.vp_center = {(width - 1) / 2.0, (height - 1) / 2.0};
    p.bg_center = {(background.shape().w - 1) / 2.0, (background.shape().h - 1) / 2.0};
    return p;
  }
  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

/// One training/evaluation sample with exact ground truth.
struct AlignmentTriplet {
  std::string id;
  std::uint64_t seed = 0;
  Subset subset = Subset::ScSf;
  double camera_mag = 0.0;
  double fg_mag = 0.0;
  Image8 i1;
  Image8 i2;
  Image8 igt;
  Image8 mask_gt;  // 0/255, moving-sprite footprints at t1 and t2 in pose-P1 coordinates
  Image8 occ_gt;   // 0/255, I_gt pixels whose I2 source lies outside I2
  Tensor flow_gt;  // (1,2,H,W): I_gt pixel -> I2 location
  Tensor flow_bwd; // (1,2,H,W): I2 pixel -> I_gt location

  friend bool operator==(const AlignmentTriplet&, const AlignmentTriplet&) = default;
};

// ----------------------------------------------------------------- sampling

namespace detail {

inline double sample_bilinear(const float* plane, int w, int h, double x, double y) {
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  const int x0 = std::min(static_cast<int>(x), w - 1);
  const int y0 = std::min(static_cast<int>(y), h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double top = plane[y0 * w + x0] + fx * (plane[y0 * w + x1] - plane[y0 * w + x0]);
  const double bot = plane[y1 * w + x0] + fx * (plane[y1 * w + x1] - plane[y1 * w + x0]);
  return top + fy * (bot - top);
}

inline Tensor make_background(int bw, int bh, const GeneratorConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  struct Wave {
    double kx, ky, phase;
    std::array<double, 3> amp;
  };
  std::vector<Wave> waves;
  const double lmin = cfg.texture_wavelength_px.lo;
  const double lmax = cfg.texture_wavelength_px.hi;
  for (int i = 0; i < cfg.texture_waves; ++i) {
    const double lambda = lmin * std::pow(lmax / lmin, u01(rng));
    const double theta = 2.0 * std::numbers::pi * u01(rng);
    const double k = 2.0 * std::numbers::pi / lambda;
    Wave wv{k * std::cos(theta), k * std::sin(theta), 2.0 * std::numbers::pi * u01(rng), {}};
    for (auto& a : wv.amp) a = 2.0 * u01(rng) - 1.0;
    waves.push_back(wv);
  }
  Tensor bg(Shape{1, 3, bh, bw});
  for (int c = 0; c < 3; ++c) {
    double lo = 1e300;
    double hi = -1e300;
    for (int y = 0; y < bh; ++y)
      for (int x = 0; x < bw; ++x) {
        double v = 0.0;
        for (const auto& wv : waves) v += wv.amp[static_cast<std::size_t>(c)] * std::sin(wv.kx * x + wv.ky * y + wv.phase);
        bg(0, c, y, x) = static_cast<float>(v);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    // Map each channel onto a random sub-band of [0.1, 0.74]; the band keeps
    // every illumination setting clear of clipping.
    const double span = 0.25 + 0.35 * u01(rng);
    const double base = 0.1 + (0.64 - span) * u01(rng);
    const double denom = hi - lo > 1e-12 ? hi - lo : 1.0;
    for (int y = 0; y < bh; ++y)
      for (int x = 0; x < bw; ++x) {
        float& v = bg(0, c, y, x);
        v = static_cast<float>(base + span * (v - lo) / denom);
      }
  }
  return bg;
}

inline SpriteSpec make_sprite(double radius, const GeneratorConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  SpriteSpec s;
  const double aspect = 0.7 + 0.6 * u01(rng);
  s.semi_a = radius * std::sqrt(aspect);
  s.semi_b = radius / std::sqrt(aspect);
  const double soft = cfg.edge_softness_px;
  const int half = static_cast<int>(std::ceil(std::max(s.semi_a, s.semi_b) + 8.0 * soft)) + 1;
  const int side = 2 * half + 1;
  s.raster = Tensor(Shape{1, 4, side, side});
  std::array<double, 3> base{};
  std::array<double, 3> grad_x{};
  std::array<double, 3> grad_y{};
  for (std::size_t c = 0; c < 3; ++c) {
    base[c] = 0.15 + 0.54 * u01(rng);
    grad_x[c] = (u01(rng) - 0.5) * 0.1 / radius;
    grad_y[c] = (u01(rng) - 0.5) * 0.1 / radius;
  }
  const double mean_r = std::sqrt(s.semi_a * s.semi_b);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double lx = x - half;
      const double ly = y - half;
      for (std::size_t c = 0; c < 3; ++c) {
        s.raster(0, static_cast<int>(c), y, x) = static_cast<float>(std::clamp(base[c] + grad_x[c] * lx + grad_y[c] * ly, 0.1, 0.74));
      }
      const double rho = std::sqrt((lx * lx) / (s.semi_a * s.semi_a) + (ly * ly) / (s.semi_b * s.semi_b));
      const double dist = (rho - 1.0) * mean_r;
      s.raster(0, 3, y, x) = static_cast<float>(1.0 / (1.0 + std::exp(dist / soft)));
    }
  return s;
}

inline std::array<Vec2, 4> viewport_corners(int w, int h) {
  return {Vec2{0, 0}, Vec2{static_cast<double>(w - 1), 0}, Vec2{0, static_cast<double>(h - 1)},
          Vec2{static_cast<double>(w - 1), static_cast<double>(h - 1)}};
}

inline bool viewport_inside(const SceneSpec& sc, double t) {
  const CameraPose pose = sc.pose(t);
  const double bw = sc.background.shape().w - 1;
  const double bh = sc.background.shape().h - 1;
  for (Vec2 c : viewport_corners(sc.width, sc.height)) {
    const Vec2 w = pose.to_world(c);
    if (w.x < 0.0 || w.y < 0.0 || w.x > bw || w.y > bh) return false;
  }
  return true;
}

}  // namespace detail

/// Mean displacement of ground-truth flow: camera motion magnitude in pixels.
inline double camera_magnitude(const SceneSpec& sc, double t1, double t2) {
  const CameraPose p1 = sc.pose(t1);
  const CameraPose p2 = sc.pose(t2);
  double acc = 0.0;
  for (int y = 0; y < sc.height; ++y)
    for (int x = 0; x < sc.width; ++x) {
      const Vec2 p{static_cast<double>(x), static_cast<double>(y)};
      acc += (p2.to_view(p1.to_world(p)) - p).norm();
    }
  return acc / (static_cast<double>(sc.width) * sc.height);
}

/// Mean sprite-centre displacement in pose-P1 view pixels; 0 without sprites.
inline double foreground_magnitude(const SceneSpec& sc, double t1, double t2) {
  if (sc.sprites.empty()) return 0.0;
  const CameraPose p1 = sc.pose(t1);
  double acc = 0.0;
  for (const auto& s : sc.sprites) acc += (p1.to_view(s.center(t2)) - p1.to_view(s.center(t1))).norm();
  return acc / static_cast<double>(sc.sprites.size());
}

/// Moving-sprite footprint union at t1 and t2 in pose-P1 coordinates, (1,1,H,W) in {0,1}.
inline Tensor motion_mask(const SceneSpec& sc, double t1, double t2) {
  const CameraPose p1 = sc.pose(t1);
  Tensor m(Shape{1, 1, sc.height, sc.width});
  for (int y = 0; y < sc.height; ++y)
    for (int x = 0; x < sc.width; ++x) {
      const Vec2 w = p1.to_world({static_cast<double>(x), static_cast<double>(y)});
      for (const auto& s : sc.sprites) {
        if (s.moves() && (s.covers(w, t1) || s.covers(w, t2))) {
          m(0, 0, y, x) = 1.0f;
          break;
        }
      }
    }
  return m;
}

namespace detail {

inline bool sprite_visible(const SceneSpec& sc, const SpriteSpec& s, double t_scene, double t_cam) {
  const Vec2 v = sc.pose(t_cam).to_view(s.center(t_scene));
  return v.x >= 0.0 && v.y >= 0.0 && v.x <= sc.width - 1 && v.y <= sc.height - 1;
}

inline MotionClass pick(const GeneratorConfig& cfg, bool camera, bool large) {
  const double k = cfg.scale();
  MotionClass m = camera ? (large ? cfg.camera_large : cfg.camera_small) : (large ? cfg.fg_large : cfg.fg_small);
  m.shift_px.lo *= k;
  m.shift_px.hi *= k;
  return m;
}

}  // namespace detail

/// Deterministic in (config, seed). Resamples until the viewport stays inside
/// the background, every sprite is visible at t1 and t2, and the moving-mask
/// area lies in the configured range.
inline SceneSpec make_scene(const GeneratorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::discrete_distribution<int> subset_pick(cfg.subset_weights.begin(), cfg.subset_weights.end());
  const Subset target = kAllSubsets[static_cast<std::size_t>(subset_pick(rng))];
  const int margin = static_cast<int>(std::ceil(cfg.margin_frac * std::max(cfg.width, cfg.height)));

  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    SceneSpec sc;
    sc.width = cfg.width;
    sc.height = cfg.height;
    sc.seed = seed;
    sc.target = target;
    sc.t1 = cfg.t1;
    sc.t2 = cfg.t2.sample(rng);
    sc.background = detail::make_background(cfg.width + 2 * margin, cfg.height + 2 * margin, cfg, rng);

    const MotionClass cam = detail::pick(cfg, true, large_camera(target));
    const double dir = 2.0 * std::numbers::pi * u01(rng);
    const double mag = cam.shift_px.sample(rng);
    sc.camera.shift = Vec2{mag * std::cos(dir), mag * std::sin(dir)};
    sc.camera.rotation = (2.0 * u01(rng) - 1.0) * cam.max_rotation_deg * std::numbers::pi / 180.0;
    sc.camera.log_scale = std::log1p((2.0 * u01(rng) - 1.0) * cam.max_scale_delta);

    const double gain = cfg.illum_gain.sample(rng);
    const double bias = cfg.illum_bias.sample(rng);
    sc.illumination = {gain, bias};

    const int count = cfg.min_sprites + static_cast<int>(u01(rng) * (cfg.max_sprites - cfg.min_sprites + 1));
    const MotionClass fg = detail::pick(cfg, false, large_foreground(target));
    const CameraPose p1 = sc.pose(sc.t1);
    const double dt = sc.t2 - sc.t1;
    for (int i = 0; i < std::min(count, cfg.max_sprites); ++i) {
      const double radius = cfg.sprite_radius_frac.sample(rng) * cfg.height;
      SpriteSpec s = detail::make_sprite(radius, cfg, rng);
      const Vec2 view{(0.15 + 0.7 * u01(rng)) * (cfg.width - 1), (0.15 + 0.7 * u01(rng)) * (cfg.height - 1)};
      const double fdir = 2.0 * std::numbers::pi * u01(rng);
      const double fmag = fg.shift_px.sample(rng);
      // Velocity in world units such that the P1-view displacement over [t1, t2] is fmag.
      const Vec2 disp_view{fmag * std::cos(fdir), fmag * std::sin(fdir)};
      const Vec2 disp_world = p1.scale * disp_view.rotated(p1.angle);
      s.velocity = (1.0 / dt) * disp_world;
      s.spin = (2.0 * u01(rng) - 1.0) * fg.max_rotation_deg * std::numbers::pi / 180.0 / dt;
      s.angle0 = 2.0 * std::numbers::pi * u01(rng);
      s.center0 = p1.to_world(view) - sc.t1 * s.velocity;
      s.angle0 -= sc.t1 * s.spin;
      sc.sprites.push_back(std::move(s));
    }

    bool ok = true;
    for (int k = 0; k <= 8 && ok; ++k) {
      const double t = sc.t1 + (sc.t2 - sc.t1) * k / 8.0;
      ok = detail::viewport_inside(sc, t);
    }
    for (const auto& s : sc.sprites) {
      ok = ok && detail::sprite_visible(sc, s, sc.t1, sc.t1) && detail::sprite_visible(sc, s, sc.t2, sc.t2);
    }
    if (!ok) continue;
    const bool any_moving = std::any_of(sc.sprites.begin(), sc.sprites.end(), [](const SpriteSpec& s) { return s.moves(); });
    if (any_moving) {
      const Tensor m = motion_mask(sc, sc.t1, sc.t2);
      double area = 0.0;
      for (float v : m.span()) area += v;
      area /= static_cast<double>(m.size());
      if (area < cfg.mask_area.lo || area > cfg.mask_area.hi) continue;
    }
    return sc;
  }
  throw ConfigError("make_scene: no valid scene for seed " + std::to_string(seed) + " after " +
                    std::to_string(cfg.max_attempts) + " attempts");
}

/// Renders the scene content at time `t_scene` through the camera pose at
/// `t_camera`, with the illumination of `t_scene`. Returns (1,3,H,W) in [0,1].
inline Tensor render(const SceneSpec& sc, double t_scene, double t_camera) {
  if (!detail::viewport_inside(sc, t_camera)) {
    throw RenderError("scene " + std::to_string(sc.seed) + ": viewport escapes the background at t=" +
                      std::to_string(t_camera));
  }
  const CameraPose pose = sc.pose(t_camera);
  const int bw = sc.background.shape().w;
  const int bh = sc.background.shape().h;
  const double gain = sc.illumination.gain_at(t_scene);
  const double bias = sc.illumination.bias_at(t_scene);
  Tensor out(Shape{1, 3, sc.height, sc.width});
  for (int y = 0; y < sc.height; ++y)
    for (int x = 0; x < sc.width; ++x) {
      const Vec2 w = pose.to_world({static_cast<double>(x), static_cast<double>(y)});
      std::array<double, 3> col{};
      for (int c = 0; c < 3; ++c) col[static_cast<std::size_t>(c)] = detail::sample_bilinear(sc.background.plane(0, c), bw, bh, w.x, w.y);
      for (const auto& s : sc.sprites) {
        const Shape rs = s.raster.shape();
        const double half = (rs.w - 1) / 2.0;
        const Vec2 l = (w - s.center(t_scene)).rotated(-s.angle(t_scene));
        const double rx = l.x + half;
        const double ry = l.y + half;
        if (rx < 0.0 || ry < 0.0 || rx > rs.w - 1 || ry > rs.h - 1) continue;
        const double a = detail::sample_bilinear(s.raster.plane(0, 3), rs.w, rs.h, rx, ry);
        if (a <= 0.0) continue;
        for (int c = 0; c < 3; ++c) {
          const double sc_col = detail::sample_bilinear(s.raster.plane(0, c), rs.w, rs.h, rx, ry);
          col[static_cast<std::size_t>(c)] = a * sc_col + (1.0 - a) * col[static_cast<std::size_t>(c)];
        }
      }
      for (int c = 0; c < 3; ++c) out(0, c, y, x) = static_cast<float>(std::clamp(gain * col[static_cast<std::size_t>(c)] + bias, 0.0, 1.0));
    }
  return out;
}

/// Flow from pose-`from` view pixels to pose-`to` view locations.
inline Tensor camera_flow(const SceneSpec& sc, double t_from, double t_to) {
  const CameraPose a = sc.pose(t_from);
  const CameraPose b = sc.pose(t_to);
  Tensor f(Shape{1, 2, sc.height, sc.width});
  for (int y = 0; y < sc.height; ++y)
    for (int x = 0; x < sc.width; ++x) {
      const Vec2 p{static_cast<double>(x), static_cast<double>(y)};
      const Vec2 q = b.to_view(a.to_world(p));
      f(0, 0, y, x) = static_cast<float>(q.x - p.x);
      f(0, 1, y, x) = static_cast<float>(q.y - p.y);
    }
  return f;
}

/// 1 where p + flow(p) falls outside the pixel-centre rectangle [0, W-1] x [0, H-1].
inline Tensor out_of_bounds_mask(const Tensor& flow) {
  const Shape s = flow.shape();
  constexpr float kTol = 1e-4f;
  Tensor m(Shape{1, 1, s.h, s.w});
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const float qx = static_cast<float>(x) + flow(0, 0, y, x);
      const float qy = static_cast<float>(y) + flow(0, 1, y, x);
      const bool out = qx < -kTol || qy < -kTol || qx > static_cast<float>(s.w - 1) + kTol || qy > static_cast<float>(s.h - 1) + kTol;
      m(0, 0, y, x) = out ? 1.0f : 0.0f;
    }
  return m;
}

inline AlignmentTriplet render_triplet(const SceneSpec& sc, double t1, double t2) {
  if (t1 == t2) throw ParameterError("render_triplet requires t1 != t2");
  AlignmentTriplet tr;
  tr.seed = sc.seed;
  tr.i1 = to_image8(render(sc, t1, t1));
  tr.i2 = to_image8(render(sc, t2, t2));
  tr.igt = to_image8(render(sc, t2, t1));
  tr.flow_gt = camera_flow(sc, t1, t2);
  tr.flow_bwd = camera_flow(sc, t2, t1);
  // Both frames show the scene at t2, so without parallax every in-bounds
  // source is valid and occlusion reduces to leaving the I2 raster.
  tr.occ_gt = mask_to_image8(out_of_bounds_mask(tr.flow_gt));
  tr.mask_gt = mask_to_image8(motion_mask(sc, t1, t2));
  tr.camera_mag = camera_magnitude(sc, t1, t2);
  tr.fg_mag = foreground_magnitude(sc, t1, t2);
  return tr;
}

inline AlignmentTriplet generate_triplet(const GeneratorConfig& cfg, std::uint64_t seed) {
  const SceneSpec sc = make_scene(cfg, seed);
  AlignmentTriplet tr = render_triplet(sc, sc.t1, sc.t2);
  tr.subset = classify_subset(tr.camera_mag, tr.fg_mag, cfg.thresholds());
  return tr;
}

}  // namespace dmalign::scene
