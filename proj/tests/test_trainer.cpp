#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "dmalign/trainer.hpp"

using namespace dmalign;
using namespace dmalign::train;

namespace {

Tensor uniform(Shape s, Rng& rng, float lo, float hi) {
  Tensor t(s);
  std::uniform_real_distribution<float> u(lo, hi);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

double loss_value(const Tensor& gt, const Tensor& pred, const Tensor& m, double gamma, bool rms = true) {
  return denoising_loss(gt, Var(pred), m, gamma, rms).value().item();
}

codec::Codec small_codec() {
  codec::CodecConfig cc;
  cc.width = 8;
  cc.width_low = 8;
  codec::Codec c(cc, 2);
  c.freeze();
  return c;
}

ModelConfig small_config(bool dmp) {
  ModelConfig m;
  m.unet.base = 8;
  m.unet.mults = {1, 2};
  m.unet.pe_dim = 16;
  m.predictor.radius = 1;
  m.predictor.hidden1 = 4;
  m.predictor.hidden2 = 4;
  m.use_dmp = dmp;
  return m;
}

const scene::Dataset& tiny_data() {
  static const scene::Dataset data = [] {
    const fs::path root = fs::temp_directory_path() / "dmalign_trainer_data";
    fs::remove_all(root);
    scene::GeneratorConfig g;
    g.width = 32;
    g.height = 32;
    scene::generate_dataset(g, 16, 21, root);
    return scene::Dataset(root);
  }();
  return data;
}

std::vector<double> run_steps(int steps, bool dmp) {
  AlignerModel model(small_codec(), small_config(dmp));
  const LatentCache cache = build_cache(model.codec(), tiny_data(), 0, 16, true);
  nn::Adam opt(model.params(), nn::AdamConfig{});
  Rng rng(5);
  std::vector<double> losses;
  for (int s = 0; s < steps; ++s) {
    std::vector<const CachedSample*> items;
    for (int b = 0; b < 4; ++b) items.push_back(&cache.items[static_cast<std::size_t>((s * 4 + b) % 16)][b % 2]);
    losses.push_back(train_step(model, opt, make_batch(items), rng, s + 1).total);
  }
  return losses;
}

}  // namespace

TEST(DenoisingLoss, ZeroResidualIsZero) {
  Rng rng(1);
  const Tensor gt = uniform({2, 3, 8, 8}, rng, -1, 1);
  for (double g : {0.0, 0.3, 1.0}) EXPECT_EQ(loss_value(gt, gt, uniform({2, 1, 8, 8}, rng, 0, 1), g), 0.0);
}

TEST(DenoisingLoss, ZeroMaskReducesToBackgroundTerm) {
  Rng rng(2);
  const Tensor gt = uniform({1, 3, 8, 8}, rng, -1, 1);
  const Tensor pred = uniform({1, 3, 8, 8}, rng, -1, 1);
  double ss = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) ss += (gt[i] - pred[i]) * (gt[i] - pred[i]);
  const double rms = std::sqrt(ss / static_cast<double>(gt.size()));
  EXPECT_NEAR(loss_value(gt, pred, Tensor({1, 1, 8, 8}), 0.7), 0.3 * rms, 1e-6);
  EXPECT_NEAR(loss_value(gt, pred, Tensor({1, 1, 8, 8}), 0.7, false), 0.3 * std::sqrt(ss), 1e-5);
}

TEST(DenoisingLoss, ConstantResidualWithFullMask) {
  const Tensor gt({1, 3, 4, 4}, 0.5f);
  const Tensor pred({1, 3, 4, 4}, 0.3f);
  EXPECT_NEAR(loss_value(gt, pred, Tensor({1, 1, 4, 4}, 1.f), 0.7), 0.14, 1e-6);
}

TEST(DenoisingLoss, SwappingMaskAndGammaIsSymmetric) {
  Rng rng(3);
  const Tensor gt = uniform({2, 3, 8, 8}, rng, -1, 1);
  const Tensor pred = uniform({2, 3, 8, 8}, rng, -1, 1);
  const Tensor m = uniform({2, 1, 8, 8}, rng, 0, 1);
  Tensor inv(m.shape());
  for (std::size_t i = 0; i < m.size(); ++i) inv[i] = 1.f - m[i];
  for (double g : {0.1, 0.5, 0.7}) EXPECT_NEAR(loss_value(gt, pred, m, g), loss_value(gt, pred, inv, 1.0 - g), 1e-6);
}

TEST(DenoisingLoss, HalfGammaConstantMaskIsHalfRms) {
  Rng rng(4);
  const Tensor gt = uniform({1, 3, 8, 8}, rng, -1, 1);
  const Tensor pred = uniform({1, 3, 8, 8}, rng, -1, 1);
  double ss = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) ss += (gt[i] - pred[i]) * (gt[i] - pred[i]);
  const double rms = std::sqrt(ss / static_cast<double>(gt.size()));
  EXPECT_NEAR(loss_value(gt, pred, Tensor({1, 1, 8, 8}, 1.f), 0.5), 0.5 * rms, 1e-6);
  EXPECT_NEAR(loss_value(gt, pred, Tensor({1, 1, 8, 8}, 0.f), 0.5), 0.5 * rms, 1e-6);
}

TEST(DenoisingLoss, ShapeMismatchThrows) {
  EXPECT_THROW(denoising_loss(Tensor({1, 3, 4, 4}), Var(Tensor({1, 3, 4, 5})), Tensor({1, 1, 4, 4}), 0.5), ShapeError);
  EXPECT_THROW(denoising_loss(Tensor({1, 3, 4, 4}), Var(Tensor({1, 3, 4, 4})), Tensor({1, 1, 4, 5}), 0.5), ShapeError);
}

TEST(MaskLoss, KnownValues) {
  EXPECT_NEAR(mask_loss(Tensor({1, 1, 4, 4}, 1.f), Var(Tensor({1, 1, 4, 4}, 0.5f))).value().item(), 0.693147, 1e-6);
  EXPECT_NEAR(mask_loss(Tensor({1, 1, 4, 4}, 0.f), Var(Tensor({1, 1, 4, 4}, 0.9f))).value().item(), 2.302585, 1e-5);
  Tensor gt({1, 1, 4, 4});
  for (std::size_t i = 0; i < gt.size(); i += 3) gt[i] = 1.f;
  EXPECT_LE(mask_loss(gt, Var(gt)).value().item(), 1.01e-6);
}

TEST(TotalLoss, LinearCombination) {
  const LossConfig d;
  EXPECT_NEAR(total_loss(1.0, 1.0, d), 2.1, 1e-12);
  EXPECT_EQ(total_loss(0.0, 0.0, d), 0.0);
  EXPECT_NEAR(total_loss(0.5, 2.0, d), 1.2, 1e-12);
  const Var v = total_loss(Var(Tensor::scalar(0.5f)), Var(Tensor::scalar(2.0f)), d);
  EXPECT_NEAR(v.value().item(), 1.2, 1e-6);
}

TEST(TotalLoss, GradientWrtPredictionMatchesFiniteDifferences) {
  Rng rng(6);
  const Tensor gt = uniform({1, 3, 3, 3}, rng, -1, 1);
  const Tensor m_gt = uniform({1, 1, 3, 3}, rng, 0, 1);
  const Tensor m_hat = uniform({1, 1, 3, 3}, rng, 0.05f, 0.95f);
  const Tensor pred0 = uniform({1, 3, 3, 3}, rng, -1, 1);
  const LossConfig cfg;
  auto f = [&](const Var& pred) {
    return total_loss(denoising_loss(gt, pred, m_hat, cfg.gamma), mask_loss(dmp::binarize(m_gt), Var(m_hat)), cfg);
  };
  Var pred(pred0, true);
  backward(f(pred));
  const Tensor g = pred.grad();
  for (std::size_t i = 0; i < pred0.size(); ++i) {
    auto at = [&](double d) {
      Tensor p = pred0;
      p[i] = static_cast<float>(p[i] + d);
      return static_cast<double>(f(Var(p)).value().item());
    };
    const double h = 0.05;
    const double d1 = (at(h) - at(-h)) / (2 * h);
    const double d2 = (at(h / 2) - at(-h / 2)) / h;
    const double num = (4 * d2 - d1) / 3;
    EXPECT_NEAR(g[i], num, 1e-3 * std::abs(num) + 1e-6) << "element " << i;
  }
}

TEST(TrainStep, SmokeTenStepsFinite) {
  const auto losses = run_steps(10, true);
  ASSERT_EQ(losses.size(), 10u);
  for (double l : losses) EXPECT_TRUE(std::isfinite(l));
}

TEST(TrainStep, SameSeedSameLosses) {
  EXPECT_EQ(run_steps(4, true), run_steps(4, true));
}

TEST(TrainStep, WithoutMaskBranchDuplicatesSecondLatent) {
  AlignerModel model(small_codec(), small_config(false));
  const LatentCache cache = build_cache(model.codec(), tiny_data(), 0, 2, false);
  const TrainBatch b = make_batch({&cache.items[0][0], &cache.items[1][0]});
  Rng rng(7);
  const Tensor eps = randn(b.vgt.shape(), rng);
  const LossTerms L = compute_losses(model, b, {10, 900}, eps);
  EXPECT_FALSE(L.mask.defined());
  const Shape cs = L.cond.shape();
  EXPECT_EQ(cs.c, 3 * b.v1.shape().c);
  const int c = b.v1.shape().c;
  for (int n = 0; n < 2; ++n)
    for (int k = 0; k < c; ++k)
      for (int y = 0; y < cs.h; ++y)
        for (int x = 0; x < cs.w; ++x) {
          ASSERT_EQ(L.cond.value()(n, k, y, x), b.v1(n, k, y, x));
          ASSERT_EQ(L.cond.value()(n, c + k, y, x), b.v2(n, k, y, x));
          ASSERT_EQ(L.cond.value()(n, 2 * c + k, y, x), b.v2(n, k, y, x));
        }
  EXPECT_NEAR(L.total.value().item(), model.config().loss.lambda1 * L.denoise.value().item(), 1e-6);
}

TEST(TrainStep, WithMaskBranchConditionHasMixedLatent) {
  AlignerModel model(small_codec(), small_config(true));
  const LatentCache cache = build_cache(model.codec(), tiny_data(), 0, 1, false);
  const TrainBatch b = make_batch({&cache.items[0][0]});
  Rng rng(8);
  const LossTerms L = compute_losses(model, b, {500}, randn(b.vgt.shape(), rng));
  ASSERT_TRUE(L.mask.defined());
  EXPECT_EQ(L.mask_hat.shape(), b.mask.shape());
  const double want = model.config().loss.lambda1 * L.denoise.value().item() + model.config().loss.lambda2 * L.mask.value().item();
  EXPECT_NEAR(L.total.value().item(), want, 1e-5);
}

TEST(TrainStep, NanLossAbortsWithDiagnostics) {
  AlignerModel model(small_codec(), small_config(true));
  const LatentCache cache = build_cache(model.codec(), tiny_data(), 0, 1, false);
  TrainBatch b = make_batch({&cache.items[0][0]});
  b.igt[0] = std::nanf("");
  nn::Adam opt(model.params(), nn::AdamConfig{});
  Rng rng(9);
  try {
    train_step(model, opt, b, rng, 3);
    FAIL() << "expected a training error";
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("gamma"), std::string::npos);
    EXPECT_NE(msg.find("t ="), std::string::npos);
    EXPECT_NE(msg.find(b.ids[0]), std::string::npos);
  }
}

TEST(Fit, KeepsCodecFrozenAndWritesArtifacts) {
  AlignerModel model(small_codec(), small_config(true));
  const std::uint64_t before = model.codec().checksum();
  FitConfig fc;
  fc.model = model.config();
  fc.steps = 4;
  fc.batch = 2;
  fc.holdout = 2;
  fc.val_every = 2;
  fc.val_count = 2;
  fc.val_stride = 500;
  fc.ckpt_every = 2;
  const fs::path out = fs::temp_directory_path() / "dmalign_fit_test";
  fs::remove_all(out);
  const FitReport rep = fit(model, tiny_data(), fc, out);
  EXPECT_EQ(model.codec().checksum(), before);
  EXPECT_EQ(rep.codec_checksum_before, rep.codec_checksum_after);
  EXPECT_EQ(rep.history.size(), 4u);
  EXPECT_EQ(rep.validation.size(), 2u);
  EXPECT_TRUE(fs::exists(out / "model.ckpt"));
  EXPECT_TRUE(fs::exists(out / "codec.ckpt"));
  EXPECT_TRUE(fs::exists(out / "train_report.json"));
  EXPECT_TRUE(fs::exists(out / checkpoint_name(2, fc.hash())));
  const AlignerModel back = AlignerModel::load(out);
  EXPECT_EQ(back.params().checksum(), model.params().checksum());
  fs::remove_all(out);
}

TEST(Fit, RejectsIncompatibleImageSize) {
  const fs::path root = fs::temp_directory_path() / "dmalign_fit_odd";
  fs::remove_all(root);
  scene::GeneratorConfig g;
  g.width = 36;
  g.height = 36;
  scene::generate_dataset(g, 4, 1, root);
  AlignerModel model(small_codec(), small_config(true));
  FitConfig fc;
  fc.model = model.config();
  fc.steps = 1;
  EXPECT_THROW(fit(model, scene::Dataset(root), fc, root / "out"), ConfigError);
  fs::remove_all(root);
}
