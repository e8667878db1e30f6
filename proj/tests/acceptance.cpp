// Acceptance runner: one PASS/FAIL line per criterion.
// usage: acceptance [criterion ids...]   (default: all)
// Expensive stages (datasets, codec, trained models, evaluations) are cached
// under $DMALIGN_ACCEPT_WORK keyed by a hash of their inputs.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dmalign/dmalign.hpp"

using namespace dmalign;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void log(const std::string& s) { std::cerr << "  " << s << std::endl; }

fs::path work_root() {
  if (const char* w = std::getenv("DMALIGN_ACCEPT_WORK"); w && *w) return w;
  return DMALIGN_ACCEPT_DEFAULT_WORK;
}

/// Runs `build` into work/<name>_<hash> unless a completed copy exists.
fs::path stage(const std::string& name, const json& key, const std::function<void(const fs::path&)>& build) {
  const fs::path dir = work_root() / (name + "_" + hex64(json_hash(key)).substr(0, 10));
  if (fs::exists(dir / "DONE")) return dir;
  fs::remove_all(dir);
  fs::create_directories(dir);
  log("building " + dir.string());
  const auto t0 = Clock::now();
  build(dir);
  std::ofstream(dir / "DONE") << json{{"key", key}, {"seconds", seconds_since(t0)}}.dump(2) << "\n";
  return dir;
}

std::string fmt(double v, int digits = 3) { return eval::fmt(v, digits); }

bool files_identical(const fs::path& a, const fs::path& b) {
  std::ifstream fa(a, std::ios::binary);
  std::ifstream fb(b, std::ios::binary);
  if (!fa || !fb) return false;
  return std::string(std::istreambuf_iterator<char>(fa), {}) == std::string(std::istreambuf_iterator<char>(fb), {});
}

// ------------------------------------------------------------ desk pipeline

scene::GeneratorConfig desk_generator() {
  scene::GeneratorConfig g;
  g.width = 64;
  g.height = 64;
  return g;
}

constexpr std::size_t kTrainCount = 2000;
constexpr std::size_t kValCount = 200;
constexpr std::uint64_t kTrainSeed = 101;
constexpr std::uint64_t kValSeed = 202;
constexpr int kEvalStride = 20;
constexpr std::uint64_t kEvalSeed = 7;

fs::path dataset_stage(const std::string& name, std::size_t count, std::uint64_t seed) {
  const auto g = desk_generator();
  const json key{{"gen", g.to_json()}, {"count", count}, {"seed", seed}, {"version", scene::kGeneratorVersion}};
  return stage(name, key, [&](const fs::path& dir) { scene::generate_dataset(g, count, seed, dir / "data"); }) / "data";
}

codec::CodecTrainConfig desk_codec_train() {
  codec::CodecTrainConfig c;
  c.steps = 800;
  c.log_every = 100;
  return c;
}

fs::path codec_stage(const fs::path& train_data) {
  const scene::Dataset data(train_data);
  const codec::CodecConfig cc;
  const auto tc = desk_codec_train();
  const json key{{"data", data.config_hash()}, {"n", data.size()}, {"codec", cc.to_json()}, {"train", tc.to_json()}};
  return stage("codec", key, [&](const fs::path& dir) {
           codec::Codec c(cc, tc.seed);
           const auto rep = codec::train_codec(c, data, tc, log);
           c.save(dir / "codec.ckpt");
           std::ofstream(dir / "report.json") << rep.to_json().dump(2) << "\n";
         }) /
         "codec.ckpt";
}

train::FitConfig desk_fit(bool use_dmp) {
  train::FitConfig f;
  f.model.use_dmp = use_dmp;
  f.log_every = 100;
  return f;
}

fs::path model_stage(const fs::path& codec_path, const fs::path& train_data, const fs::path& val_data, bool use_dmp) {
  const scene::Dataset data(train_data);
  const scene::Dataset val(val_data);
  const codec::Codec c = codec::Codec::load(codec_path);
  const auto fc = desk_fit(use_dmp);
  const json key{{"codec", hex64(c.checksum())}, {"data", data.config_hash()}, {"n", data.size()}, {"fit", fc.to_json()}};
  return stage(use_dmp ? "model_dmp" : "model_nodmp", key, [&](const fs::path& dir) {
    AlignerModel m(codec::Codec::load(codec_path), fc.model);
    train::fit(m, data, fc, dir, &val, log);
  });
}

/// Aligns every validation sample; writes pred/<id>.png and per-sample mask IoU.
fs::path eval_stage(const fs::path& model_dir, const fs::path& val_data) {
  const AlignerModel model = AlignerModel::load(model_dir);
  const scene::Dataset val(val_data);
  const json key{{"model", hex64(model.params().checksum())}, {"data", val.config_hash()}, {"n", val.size()},
                 {"stride", kEvalStride}, {"seed", kEvalSeed}};
  return stage("eval", key, [&](const fs::path& dir) {
    json per = json::object();
    for (std::size_t i = 0; i < val.size(); ++i) {
      const auto tr = val.load(i);
      const auto r = sampler::align(model, to_tensor(tr.i1, Range::Signed), to_tensor(tr.i2, Range::Signed), {kEvalStride, 0.0},
                                    derive_seed(kEvalSeed, i));
      write_png(dir / "pred" / (tr.id + ".png"), to_image8(r.image, Range::Signed));
      const Tensor m_gt = image8_to_mask(tr.mask_gt);
      per[tr.id] = {{"iou_latent", eval::iou(dmp::binarize(r.mask_latent), dmp::downsample_mask(m_gt, model.factor()))},
                    {"iou_image", eval::iou(dmp::binarize(r.mask), m_gt)}};
      if ((i + 1) % 50 == 0) log("aligned " + std::to_string(i + 1) + "/" + std::to_string(val.size()));
    }
    std::ofstream(dir / "masks.json") << per.dump(2) << "\n";
  });
}

std::vector<eval::MethodOutput> load_predictions(const fs::path& eval_dir, const scene::Dataset& data) {
  std::vector<eval::MethodOutput> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string id = data.record(i).id;
    out.push_back({id, read_png(eval_dir / "pred" / (id + ".png"), 3)});
  }
  return out;
}

struct Desk {
  fs::path train, val, codec, model_dmp, model_nodmp, eval_dmp, eval_nodmp;
};

Desk& desk(bool need_nodmp) {
  static Desk d;
  static bool base = false;
  static bool nodmp = false;
  if (!base) {
    d.train = dataset_stage("data_train", kTrainCount, kTrainSeed);
    d.val = dataset_stage("data_val", kValCount, kValSeed);
    d.codec = codec_stage(d.train);
    d.model_dmp = model_stage(d.codec, d.train, d.val, true);
    d.eval_dmp = eval_stage(d.model_dmp, d.val);
    base = true;
  }
  if (need_nodmp && !nodmp) {
    d.model_nodmp = model_stage(d.codec, d.train, d.val, false);
    d.eval_nodmp = eval_stage(d.model_nodmp, d.val);
    nodmp = true;
  }
  return d;
}

// ---------------------------------------------------------------- criteria

Outcome criterion1() {
  const auto t0 = Clock::now();
  std::vector<std::string> failed;
  for (const std::string bin : {DMALIGN_UNIT_TEST_BINARIES}) {
    const std::string cmd = "\"" + bin + "\" --gtest_brief=1 --gtest_filter=-*Slow* > /dev/null 2>&1";
    if (std::system(cmd.c_str()) != 0) failed.push_back(fs::path(bin).filename().string());
  }
  const double secs = seconds_since(t0);
  std::string detail = "closed-form unit suites in " + fmt(secs, 1) + " s";
  if (!failed.empty()) {
    detail += "; failing:";
    for (const auto& f : failed) detail += " " + f;
  }
  return {failed.empty() && secs < 60.0, detail};
}

struct ProbeStats {
  int probes = 0;
  double max_rel = 0.0;
};

/// Compares <grad f, v> with a finite difference along v for `count` random
/// unit directions v. The error is relative to max(|a|, |n|, |g|/sqrt(dim)),
/// the last term being the typical size of a random directional derivative.
ProbeStats probe(Var& x, const std::function<Var()>& f, int count, double h, Rng& rng) {
  x.zero_grad();
  backward(f());
  const Tensor analytic = x.grad();
  const Tensor base = x.value();
  double gnorm = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) gnorm += static_cast<double>(analytic[i]) * analytic[i];
  const double typical = std::sqrt(gnorm / static_cast<double>(analytic.size()));
  ProbeStats st;
  std::normal_distribution<double> nd;
  for (int k = 0; k < count; ++k) {
    std::vector<double> v(base.size());
    double norm = 0.0;
    for (auto& e : v) {
      e = nd(rng);
      norm += e * e;
    }
    norm = std::sqrt(norm);
    double a = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] /= norm;
      a += v[i] * analytic[i];
    }
    auto eval_at = [&](double d) {
      Tensor& xv = x.mutable_value();
      for (std::size_t i = 0; i < v.size(); ++i) xv[i] = static_cast<float>(base[i] + d * v[i]);
      NoGradGuard ng;
      return static_cast<double>(f().value().item());
    };
    // Richardson-extrapolated central difference, fourth order in h
    const double d1 = (eval_at(h) - eval_at(-h)) / (2.0 * h);
    const double d2 = (eval_at(h / 2) - eval_at(-h / 2)) / h;
    const double numeric = (4.0 * d2 - d1) / 3.0;
    x.mutable_value() = base;
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), typical, 1e-12});
    st.max_rel = std::max(st.max_rel, rel);
    ++st.probes;
  }
  return st;
}

Tensor random_tensor(Shape s, Rng& rng, float lo, float hi) {
  Tensor t(s);
  std::uniform_real_distribution<float> u(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

Outcome criterion2() {
  Rng rng(2);
  constexpr int kProbes = 20;
  constexpr double kTol = 1e-2;
  constexpr double kStep = 1e-1;
  std::vector<std::pair<std::string, ProbeStats>> rows;

  {
    const Tensor gt = random_tensor({2, 3, 16, 16}, rng, -1.f, 1.f);
    const Tensor m = random_tensor({2, 1, 16, 16}, rng, 0.f, 1.f);
    Var pred(random_tensor({2, 3, 16, 16}, rng, -1.f, 1.f), true);
    rows.emplace_back("denoising_loss", probe(pred, [&] { return train::denoising_loss(gt, pred, m, 0.7); }, kProbes, kStep, rng));
  }
  {
    Tensor gt({2, 1, 16, 16});
    std::bernoulli_distribution b(0.3);
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = b(rng) ? 1.f : 0.f;
    Var m(random_tensor({2, 1, 16, 16}, rng, 0.1f, 0.9f), true);
    rows.emplace_back("mask_loss", probe(m, [&] { return train::mask_loss(gt, m); }, kProbes, kStep, rng));
  }
  {
    codec::Codec c({}, 3);
    c.freeze();
    Var z(random_tensor({1, 4, 8, 8}, rng, -0.8f, 0.8f), true);
    Tensor w = random_tensor({1, 3, 32, 32}, rng, -1.f, 1.f);
    // the output clamp has a kink at +-1; pixels close to it carry no weight
    const Tensor out = c.decode(z.value());
    for (std::size_t i = 0; i < w.size(); ++i)
      if (std::abs(out[i]) > 0.9f) w[i] = 0.f;
    rows.emplace_back("decode", probe(z, [&] { return ops::sum(ops::mul(c.decode(z), Var(w))); }, kProbes, kStep, rng));
  }
  {
    nn::ParameterSet ps;
    denoiser::UNetConfig uc;
    uc.base = 16;
    uc.pe_dim = 32;
    Rng wrng(4);
    denoiser::UNet unet(ps, uc, wrng);
    // the output conv starts at zero, which would hide every upstream gradient
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (ps.name(i).find("out.conv") != std::string::npos) {
        Tensor& v = ps[i].mutable_value();
        for (std::size_t k = 0; k < v.size(); ++k) v[k] = std::normal_distribution<float>(0.f, 0.05f)(wrng);
      }
    }
    const Tensor x = random_tensor({1, 4, 8, 8}, rng, -1.f, 1.f);
    const Tensor cond = random_tensor({1, 12, 8, 8}, rng, -1.f, 1.f);
    const Tensor w = random_tensor({1, 4, 8, 8}, rng, -1.f, 1.f);
    std::size_t slice = 0;
    for (std::size_t i = 0; i < ps.size(); ++i)
      if (ps.name(i).find("down") != std::string::npos && ps[i].value().shape().h == 3) {
        slice = i;
        break;
      }
    Var& weight = ps[slice];
    rows.emplace_back("denoiser " + ps.name(slice),
                      probe(weight, [&] { return ops::sum(ops::mul(unet(Var(x), Var(cond), {437}), Var(w))); }, kProbes, kStep, rng));
  }

  bool ok = true;
  std::string detail;
  for (const auto& [name, st] : rows) {
    ok = ok && st.probes >= 10 && st.max_rel <= kTol;
    detail += (detail.empty() ? "" : "; ") + name + " max rel " + fmt(st.max_rel, 5) + " over " + std::to_string(st.probes);
  }
  return {ok, detail};
}

Outcome criterion3() {
  scene::GeneratorConfig g;  // full 256-px geometry
  std::size_t good = 0;
  std::size_t total = 0;
  double iou_sum = 0.0;
  constexpr int kN = 200;
  for (int i = 0; i < kN; ++i) {
    const auto tr = scene::generate_triplet(g, derive_seed(3003, static_cast<std::uint64_t>(i)));
    const Image8 warped = to_image8(eval::backward_warp(to_tensor(tr.i2), tr.flow_gt).image);
    for (int y = 0; y < tr.igt.height; ++y)
      for (int x = 0; x < tr.igt.width; ++x) {
        if (tr.occ_gt.at(x, y, 0)) continue;
        ++total;
        bool match = true;
        for (int c = 0; c < 3; ++c) match = match && std::abs(int(warped.at(x, y, c)) - int(tr.igt.at(x, y, c))) <= 1;
        good += match;
      }
    iou_sum += eval::iou(eval::fb_occlusion(tr.flow_gt, tr.flow_bwd), image8_to_mask(tr.occ_gt));
  }
  const double frac = static_cast<double>(good) / static_cast<double>(total);
  const double iou = iou_sum / kN;
  return {frac >= 0.99 && iou >= 0.8, "warp within 1/255 on " + fmt(100.0 * frac, 3) + "% of valid pixels; fb occlusion IoU " + fmt(iou, 3)};
}

Outcome criterion4() {
  const Desk& d = desk(false);
  const scene::Dataset val(d.val);
  const auto aligner = eval::evaluate("aligner", load_predictions(d.eval_dmp, val), val, {});
  std::vector<eval::MethodOutput> ident;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const auto tr = val.load(i);
    ident.push_back({tr.id, eval::identity_baseline(tr)});
  }
  const auto identity = eval::evaluate("identity", ident, val, {});
  bool ok_a = true;
  std::string detail;
  for (const char* s : {"LcLf", "LcSf"}) {
    const double gain = aligner.subsets.at(s).psnr - identity.subsets.at(s).psnr;
    ok_a = ok_a && gain >= 3.0;
    detail += std::string(s) + " " + fmt(aligner.subsets.at(s).psnr, 2) + " vs identity " + fmt(identity.subsets.at(s).psnr, 2) +
              " dB (" + (gain >= 0 ? "+" : "") + fmt(gain, 2) + "); ";
  }
  json masks;
  std::ifstream(d.eval_dmp / "masks.json") >> masks;
  double iou = 0.0;
  double iou_img = 0.0;
  for (auto it = masks.begin(); it != masks.end(); ++it) {
    iou += it.value().at("iou_latent").get<double>();
    iou_img += it.value().at("iou_image").get<double>();
  }
  iou /= static_cast<double>(masks.size());
  iou_img /= static_cast<double>(masks.size());
  detail += "(a) " + std::string(ok_a ? "met" : "missed") + "; (b) mask IoU " + fmt(iou, 3) + " at latent res (" +
            fmt(iou_img, 3) + " at image res)";
  return {ok_a && iou >= 0.5, detail};
}

Outcome criterion5() {
  const Desk& d = desk(true);
  const scene::Dataset val(d.val);
  const auto with = eval::evaluate("aligner", load_predictions(d.eval_dmp, val), val, {});
  const auto without = eval::evaluate("aligner-no-dmp", load_predictions(d.eval_nodmp, val), val, {});
  const double gap = with.avg.psnr - without.avg.psnr;
  return {gap >= 0.0, "avg PSNR with mask branch " + fmt(with.avg.psnr, 2) + " dB, without " + fmt(without.avg.psnr, 2) +
                          " dB, gap " + fmt(gap, 2) + " dB"};
}

Outcome criterion6() {
  const Desk& d = desk(false);
  const scene::Dataset val(d.val);
  int eligible = 0;
  int wins = 0;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const auto tr = val.load(i);
    const Tensor occ = image8_to_mask(tr.occ_gt);
    double area = 0.0;
    for (std::size_t k = 0; k < occ.size(); ++k) area += occ[k];
    if (area < 0.02 * static_cast<double>(occ.size())) continue;
    ++eligible;
    const Tensor gt = to_tensor(tr.igt);
    const Tensor ours = to_tensor(read_png(d.eval_dmp / "pred" / (tr.id + ".png"), 3));
    const Tensor warp = to_tensor(eval::gt_flow_warp_baseline(tr));
    wins += eval::psnr(ours, gt, &occ) > eval::psnr(warp, gt, &occ);
  }
  const double frac = eligible ? static_cast<double>(wins) / eligible : 0.0;
  return {eligible > 0 && frac > 0.5, "aligner beats GT-flow warp inside occluded regions on " + std::to_string(wins) + "/" +
                                          std::to_string(eligible) + " samples (" + fmt(100.0 * frac, 1) + "%)"};
}

Outcome criterion7() {
  const fs::path val_dir = dataset_stage("data_val", kValCount, kValSeed);
  const scene::Dataset val(val_dir);
  std::vector<eval::MethodOutput> outs;
  for (std::size_t i = 0; i < val.size(); ++i) {
    const auto tr = val.load(i);
    outs.push_back({tr.id, eval::gt_flow_warp_baseline(tr)});
  }
  eval::EvalOptions opt;
  opt.occlusion_masked = true;
  const auto rep = eval::evaluate("gt-flow-warp", outs, val, opt);
  return {rep.avg.psnr_masked > rep.avg.psnr,
          "GT-flow warp avg PSNR " + fmt(rep.avg.psnr, 2) + " dB unmasked, " + fmt(rep.avg.psnr_masked, 2) + " dB occlusion-masked"};
}

int run_cli(const std::vector<std::string>& args) {
  std::string cmd = "\"" DMALIGN_CLI_BINARY "\"";
  for (const auto& a : args) cmd += " \"" + a + "\"";
  cmd += " > /dev/null 2>&1";
  return std::system(cmd.c_str());
}

Outcome criterion8() {
  const Desk& d = desk(false);
  const fs::path tmp = work_root() / "determinism";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  bool ok = true;
  std::string detail;

  for (const char* run : {"a", "b"}) {
    ok = ok && run_cli({"gen-data", "--out", (tmp / "gen" / run).string(), "--count", "16", "--seed", "77"}) == 0;
  }
  std::size_t files = 0;
  bool same_data = ok;
  for (const auto& e : fs::recursive_directory_iterator(tmp / "gen" / "a")) {
    if (!e.is_regular_file()) continue;
    ++files;
    const fs::path other = tmp / "gen" / "b" / fs::relative(e.path(), tmp / "gen" / "a");
    same_data = same_data && files_identical(e.path(), other);
  }
  std::size_t files_b = 0;
  for (const auto& e : fs::recursive_directory_iterator(tmp / "gen" / "b")) files_b += e.is_regular_file();
  same_data = same_data && files == files_b && files > 0;
  detail += "gen-data " + std::string(same_data ? "identical" : "DIFFERS") + " over " + std::to_string(files) + " files; ";

  const auto tr = scene::Dataset(d.val).record(0);
  const fs::path sample = d.val / tr.id;
  for (const char* run : {"a", "b"}) {
    ok = ok && run_cli({"align", "--ckpt", d.model_dmp.string(), "--i1", (sample / "i1.png").string(), "--i2",
                        (sample / "i2.png").string(), "--out", (tmp / "align" / run).string(), "--seed", "9"}) == 0;
  }
  const bool same_align = ok && files_identical(tmp / "align/a/aligned.png", tmp / "align/b/aligned.png") &&
                          files_identical(tmp / "align/a/mask.png", tmp / "align/b/mask.png");
  detail += "align PNGs " + std::string(same_align ? "identical" : "DIFFER");
  return {ok && same_data && same_align, detail};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  const std::vector<std::pair<std::string, std::function<Outcome()>>> all{
      {"closed-form suite", criterion1},      {"gradient checks", criterion2},
      {"dataset oracle", criterion3},         {"desk-scale training", criterion4},
      {"mask branch ablation", criterion5},   {"occluded-region PSNR vs warping", criterion6},
      {"occlusion-masked evaluation", criterion7}, {"determinism", criterion8},
  };
  int failures = 0;
  for (std::size_t k = 0; k < all.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = all[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %d %s  %s: %s  [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", all[k].first.c_str(), o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
