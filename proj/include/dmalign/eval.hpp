#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dmalign/dataset.hpp"

namespace dmalign::eval {

namespace fs = std::filesystem;

inline constexpr double kPsnrCap = 99.0;

/// PSNR in dB over [0,1] images, optionally restricted to pixels where
/// `valid` (1,1,H,W) is nonzero. Zero error reports the 99 dB cap.
inline double psnr(const Tensor& a, const Tensor& b, const Tensor* valid = nullptr) {
  a.require_same(b, "psnr");
  const Shape s = a.shape();
  if (valid && (valid->shape().h != s.h || valid->shape().w != s.w)) throw ShapeError("psnr: mask size mismatch");
  double se = 0.0;
  std::size_t count = 0;
  for (int n = 0; n < s.n; ++n)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        if (valid && (*valid)(0, 0, y, x) < 0.5f) continue;
        for (int c = 0; c < s.c; ++c) {
          const double d = static_cast<double>(a(n, c, y, x)) - b(n, c, y, x);
          se += d * d;
        }
        count += static_cast<std::size_t>(s.c);
      }
  if (count == 0) throw MetricError("psnr: empty valid mask");
  const double mse = se / static_cast<double>(count);
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - (size - 1) / 2.0;
    w[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
    sum += w[static_cast<std::size_t>(i)];
  }
  for (auto& v : w) v /= sum;
  return w;
}

// Separable "valid" filtering of one plane: output (h-k+1) x (w-k+1).
inline std::vector<double> filter_valid(const std::vector<double>& in, int h, int w, const std::vector<double>& k) {
  const int ks = static_cast<int>(k.size());
  const int ho = h - ks + 1;
  const int wo = w - ks + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * wo);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (int i = 0; i < ks; ++i) acc += k[static_cast<std::size_t>(i)] * in[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(ho) * wo);
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (int i = 0; i < ks; ++i) acc += k[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(y + i) * wo + x];
      out[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  return out;
}

}  // namespace detail

struct SsimConfig {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Single-scale SSIM on [0,1] images, Gaussian window, evaluated at window
/// centres that fit inside the image and averaged over channels. With `valid`,
/// only centres whose pixel is valid contribute.
inline double ssim(const Tensor& a, const Tensor& b, const Tensor* valid = nullptr, SsimConfig cfg = {}) {
  a.require_same(b, "ssim");
  const Shape s = a.shape();
  if (cfg.window > s.h || cfg.window > s.w) {
    throw ParameterError("ssim: window " + std::to_string(cfg.window) + " larger than image " + s.str());
  }
  const auto k = detail::gaussian_window(cfg.window, cfg.sigma);
  const double c1 = cfg.k1 * cfg.k1;
  const double c2 = cfg.k2 * cfg.k2;
  const int ho = s.h - cfg.window + 1;
  const int wo = s.w - cfg.window + 1;
  const int off = cfg.window / 2;
  double total = 0.0;
  std::size_t count = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const std::size_t np = s.plane();
      std::vector<double> pa(np), pb(np), aa(np), bb(np), ab(np);
      for (std::size_t i = 0; i < np; ++i) {
        pa[i] = a.plane(n, c)[i];
        pb[i] = b.plane(n, c)[i];
        aa[i] = pa[i] * pa[i];
        bb[i] = pb[i] * pb[i];
        ab[i] = pa[i] * pb[i];
      }
      const auto ma = detail::filter_valid(pa, s.h, s.w, k);
      const auto mb = detail::filter_valid(pb, s.h, s.w, k);
      const auto saa = detail::filter_valid(aa, s.h, s.w, k);
      const auto sbb = detail::filter_valid(bb, s.h, s.w, k);
      const auto sab = detail::filter_valid(ab, s.h, s.w, k);
      for (int y = 0; y < ho; ++y)
        for (int x = 0; x < wo; ++x) {
          if (valid && (*valid)(0, 0, y + off, x + off) < 0.5f) continue;
          const std::size_t i = static_cast<std::size_t>(y) * wo + x;
          const double va = saa[i] - ma[i] * ma[i];
          const double vb = sbb[i] - mb[i] * mb[i];
          const double cov = sab[i] - ma[i] * mb[i];
          total += ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2)) /
                   ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
          ++count;
        }
    }
  if (count == 0) throw MetricError("ssim: no valid window centres");
  return total / static_cast<double>(count);
}

struct WarpResult {
  Tensor image;  // (1,C,H,W)
  Tensor valid;  // (1,1,H,W), 0 where the sample point left the source
};

/// out(p) = bilinear(source, p + flow(p)); out-of-range sample points are
/// edge-clamped and flagged invalid.
inline WarpResult backward_warp(const Tensor& source, const Tensor& flow) {
  const Shape s = source.shape();
  if (flow.shape().c != 2 || flow.shape().h != s.h || flow.shape().w != s.w) {
    throw ShapeError("backward_warp: flow " + flow.shape().str() + " does not match " + s.str());
  }
  constexpr double kTol = 1e-4;
  WarpResult r{Tensor(s), Tensor(Shape{1, 1, s.h, s.w}, 1.0f)};
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const double qx = x + static_cast<double>(flow(0, 0, y, x));
      const double qy = y + static_cast<double>(flow(0, 1, y, x));
      if (qx < -kTol || qy < -kTol || qx > s.w - 1 + kTol || qy > s.h - 1 + kTol) r.valid(0, 0, y, x) = 0.0f;
      for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
          r.image(n, c, y, x) = static_cast<float>(scene::detail::sample_bilinear(source.plane(n, c), s.w, s.h, qx, qy));
    }
  return r;
}

struct ConsistencyConfig {
  double alpha = 0.01;
  double beta = 0.5;
};

/// Forward-backward consistency: occluded where
/// |f(p) + b(p + f(p))|^2 > alpha (|f(p)|^2 + |b(p + f(p))|^2) + beta.
/// b is sampled bilinearly with zero padding outside the grid.
inline Tensor fb_occlusion(const Tensor& flow_fwd, const Tensor& flow_bwd, ConsistencyConfig cfg = {}) {
  flow_fwd.require_same(flow_bwd, "fb_occlusion");
  const Shape s = flow_fwd.shape();
  if (s.c != 2) throw ShapeError("fb_occlusion: flows must have 2 channels");
  Tensor occ(Shape{1, 1, s.h, s.w});
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      const double fu = flow_fwd(0, 0, y, x);
      const double fv = flow_fwd(0, 1, y, x);
      const double qx = x + fu;
      const double qy = y + fv;
      const int x0 = static_cast<int>(std::floor(qx));
      const int y0 = static_cast<int>(std::floor(qy));
      double bu = 0.0;
      double bv = 0.0;
      for (int dy = 0; dy <= 1; ++dy)
        for (int dx = 0; dx <= 1; ++dx) {
          const int xi = x0 + dx;
          const int yi = y0 + dy;
          if (xi < 0 || yi < 0 || xi >= s.w || yi >= s.h) continue;
          const double wgt = (dx ? qx - x0 : 1.0 - (qx - x0)) * (dy ? qy - y0 : 1.0 - (qy - y0));
          bu += wgt * flow_bwd(0, 0, yi, xi);
          bv += wgt * flow_bwd(0, 1, yi, xi);
        }
      const double ru = fu + bu;
      const double rv = fv + bv;
      const double lhs = ru * ru + rv * rv;
      const double rhs = cfg.alpha * (fu * fu + fv * fv + bu * bu + bv * bv) + cfg.beta;
      occ(0, 0, y, x) = lhs > rhs ? 1.0f : 0.0f;
    }
  return occ;
}

/// Intersection over union of two binary masks; two empty masks score 1.
inline double iou(const Tensor& a, const Tensor& b) {
  a.require_same(b, "iou");
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pa = a[i] >= 0.5f;
    const bool pb = b[i] >= 0.5f;
    inter += (pa && pb) ? 1 : 0;
    uni += (pa || pb) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// -------------------------------------------------------------------- reports

struct SampleScore {
  std::string id;
  scene::Subset subset = scene::Subset::ScSf;
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> psnr_masked;
  std::optional<double> ssim_masked;
};

struct Aggregate {
  std::size_t count = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t masked_count = 0;
  double psnr_masked = 0.0;
  double ssim_masked = 0.0;
};

struct EvalReport {
  std::string method;
  std::string config_hash;
  std::map<std::string, Aggregate> subsets;  // keyed by subset tag
  Aggregate avg;
  std::vector<SampleScore> samples;  // sorted by id
  std::vector<std::string> missing;
  nlohmann::json extra = nlohmann::json::object();  // method-specific summary values

  [[nodiscard]] nlohmann::json to_json() const {
    auto agg = [](const Aggregate& a) {
      nlohmann::json j{{"count", a.count}, {"psnr", a.psnr}, {"ssim", a.ssim}};
      if (a.masked_count > 0) {
        j["masked_count"] = a.masked_count;
        j["psnr_masked"] = a.psnr_masked;
        j["ssim_masked"] = a.ssim_masked;
      }
      return j;
    };
    nlohmann::json j{{"method", method}, {"config_hash", config_hash}, {"missing", missing}, {"extra", extra}};
    for (const auto& [k, v] : subsets) j["subsets"][k] = agg(v);
    j["avg"] = agg(avg);
    j["samples"] = nlohmann::json::array();
    for (const auto& s : samples) {
      nlohmann::json e{{"id", s.id}, {"subset", scene::to_string(s.subset)}, {"psnr", s.psnr}, {"ssim", s.ssim}};
      if (s.psnr_masked) e["psnr_masked"] = *s.psnr_masked;
      if (s.ssim_masked) e["ssim_masked"] = *s.ssim_masked;
      j["samples"].push_back(e);
    }
    return j;
  }
};

struct MethodOutput {
  std::string id;
  Image8 image;
};

struct EvalOptions {
  bool occlusion_masked = false;
  ConsistencyConfig consistency;
};

/// Occlusion mask used for the masked variant of one sample: the forward-
/// backward check on the ground-truth flow pair.
inline Tensor sample_occlusion(const scene::AlignmentTriplet& tr, const ConsistencyConfig& cfg) {
  return fb_occlusion(tr.flow_gt, tr.flow_bwd, cfg);
}

inline SampleScore score_sample(const scene::AlignmentTriplet& tr, const Image8& pred, const EvalOptions& opt) {
  const Tensor a = to_tensor(pred);
  const Tensor b = to_tensor(tr.igt);
  SampleScore s{tr.id, tr.subset, psnr(a, b), ssim(a, b), std::nullopt, std::nullopt};
  if (opt.occlusion_masked) {
    Tensor valid = sample_occlusion(tr, opt.consistency);
    for (auto& v : valid.span()) v = 1.0f - v;
    try {
      s.psnr_masked = psnr(a, b, &valid);
      s.ssim_masked = ssim(a, b, &valid);
    } catch (const MetricError&) {
      // fully occluded sample: no masked score
    }
  }
  return s;
}

/// Aggregates per-sample scores; the result does not depend on input order.
inline EvalReport aggregate(std::string method, std::string config_hash, std::vector<SampleScore> scores,
                            std::vector<std::string> missing = {}) {
  std::sort(scores.begin(), scores.end(), [](const SampleScore& a, const SampleScore& b) { return a.id < b.id; });
  std::sort(missing.begin(), missing.end());
  EvalReport r;
  r.method = std::move(method);
  r.config_hash = std::move(config_hash);
  r.missing = std::move(missing);
  auto add = [](Aggregate& g, const SampleScore& s) {
    ++g.count;
    g.psnr += s.psnr;
    g.ssim += s.ssim;
    if (s.psnr_masked) {
      ++g.masked_count;
      g.psnr_masked += *s.psnr_masked;
      g.ssim_masked += *s.ssim_masked;
    }
  };
  for (const auto& s : scores) {
    add(r.subsets[scene::to_string(s.subset)], s);
    add(r.avg, s);
  }
  auto finish = [](Aggregate& g) {
    if (g.count) {
      g.psnr /= static_cast<double>(g.count);
      g.ssim /= static_cast<double>(g.count);
    }
    if (g.masked_count) {
      g.psnr_masked /= static_cast<double>(g.masked_count);
      g.ssim_masked /= static_cast<double>(g.masked_count);
    }
  };
  for (auto& [k, g] : r.subsets) finish(g);
  finish(r.avg);
  r.samples = std::move(scores);
  return r;
}

/// Scores one method against the dataset; samples without an output are listed in `missing`.
inline EvalReport evaluate(const std::string& method, const std::vector<MethodOutput>& outputs,
                           const scene::Dataset& data, const EvalOptions& opt = {}) {
  std::map<std::string, const Image8*> by_id;
  for (const auto& o : outputs) by_id[o.id] = &o.image;
  std::vector<SampleScore> scores;
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto it = by_id.find(data.record(i).id);
    if (it == by_id.end()) {
      missing.push_back(data.record(i).id);
      continue;
    }
    scores.push_back(score_sample(data.load(i), *it->second, opt));
  }
  return aggregate(method, data.config_hash(), std::move(scores), std::move(missing));
}

/// Identity baseline output: the unaligned second frame.
inline Image8 identity_baseline(const scene::AlignmentTriplet& tr) { return tr.i2; }

/// Ground-truth-flow backward warp of I2 (edge-clamped outside I2).
inline Image8 gt_flow_warp_baseline(const scene::AlignmentTriplet& tr) {
  return to_image8(backward_warp(to_tensor(tr.i2), tr.flow_gt).image);
}

// --------------------------------------------------------------------- output

inline std::string fmt(double v, int prec) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

/// Markdown table with one row per method (plus a dagger row for masked
/// scores) and PSNR/SSIM columns per subset and on average.
inline std::string markdown_table(const std::vector<EvalReport>& reports) {
  std::ostringstream os;
  os << "| Method |";
  for (auto s : scene::kAllSubsets) os << " " << scene::to_string(s) << " PSNR | " << scene::to_string(s) << " SSIM |";
  os << " Avg PSNR | Avg SSIM | N |\n|---|";
  for (int i = 0; i < 10; ++i) os << "---:|";
  os << "---:|\n";
  auto row = [&os](const std::string& name, const EvalReport& r, bool masked) {
    os << "| " << name << " |";
    for (auto s : scene::kAllSubsets) {
      auto it = r.subsets.find(scene::to_string(s));
      if (it == r.subsets.end() || (masked && it->second.masked_count == 0)) {
        os << " - | - |";
        continue;
      }
      const Aggregate& g = it->second;
      os << " " << fmt(masked ? g.psnr_masked : g.psnr, 2) << " | " << fmt(masked ? g.ssim_masked : g.ssim, 3) << " |";
    }
    os << " " << fmt(masked ? r.avg.psnr_masked : r.avg.psnr, 2) << " | "
       << fmt(masked ? r.avg.ssim_masked : r.avg.ssim, 3) << " | " << (masked ? r.avg.masked_count : r.avg.count) << " |\n";
  };
  for (const auto& r : reports) row(r.method, r, false);
  for (const auto& r : reports) {
    if (r.avg.masked_count > 0) row(r.method + "†", r, true);
  }
  return os.str();
}

/// Grouped bar chart of per-subset and average PSNR, one colour per method.
inline std::string psnr_bar_svg(const std::vector<EvalReport>& reports) {
  static const char* colours[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948"};
  std::vector<std::string> groups;
  for (auto s : scene::kAllSubsets) groups.push_back(scene::to_string(s));
  groups.emplace_back("Avg");
  double vmax = 1.0;
  for (const auto& r : reports) {
    vmax = std::max(vmax, r.avg.psnr);
    for (const auto& [k, g] : r.subsets) vmax = std::max(vmax, g.psnr);
  }
  vmax = std::min(vmax, kPsnrCap);
  const int width = 720;
  const int height = 360;
  const int left = 50;
  const int bottom = 40;
  const int plot_h = height - bottom - 40;
  const double group_w = static_cast<double>(width - left - 20) / static_cast<double>(groups.size());
  const double bar_w = group_w * 0.8 / std::max<std::size_t>(1, reports.size());
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">PSNR (dB) by subset</text>\n";
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const double gx = left + gi * group_w;
    os << "<text x=\"" << gx + group_w / 2 << "\" y=\"" << height - 15 << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << groups[gi] << "</text>\n";
    for (std::size_t mi = 0; mi < reports.size(); ++mi) {
      const auto& r = reports[mi];
      double v = 0.0;
      if (groups[gi] == "Avg") {
        v = r.avg.psnr;
      } else if (auto it = r.subsets.find(groups[gi]); it != r.subsets.end()) {
        v = it->second.psnr;
      }
      const double h = plot_h * std::min(v, vmax) / vmax;
      const double x = gx + group_w * 0.1 + mi * bar_w;
      os << "<rect x=\"" << x << "\" y=\"" << height - bottom - h << "\" width=\"" << bar_w * 0.95 << "\" height=\"" << h
         << "\" fill=\"" << colours[mi % 6] << "\"><title>" << r.method << ": " << fmt(v, 2) << "</title></rect>\n";
    }
  }
  for (std::size_t mi = 0; mi < reports.size(); ++mi) {
    const int y = 40 + static_cast<int>(mi) * 16;
    os << "<rect x=\"" << width - 190 << "\" y=\"" << y - 10 << "\" width=\"10\" height=\"10\" fill=\"" << colours[mi % 6] << "\"/>";
    os << "<text x=\"" << width - 175 << "\" y=\"" << y << "\" font-family=\"sans-serif\" font-size=\"11\">" << reports[mi].method << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Writes report JSON files, the markdown table and the PSNR bar chart.
inline std::vector<fs::path> emit_plots(const std::vector<EvalReport>& reports, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (const auto& r : reports) {
    const fs::path p = out_dir / ("report_" + r.method + ".json");
    std::ofstream(p) << r.to_json().dump(2) << "\n";
    written.push_back(p);
  }
  const fs::path md = out_dir / "report.md";
  std::ofstream(md) << markdown_table(reports);
  written.push_back(md);
  const fs::path svg = out_dir / "psnr_by_subset.svg";
  std::ofstream(svg) << psnr_bar_svg(reports);
  written.push_back(svg);
  return written;
}

}  // namespace dmalign::eval
