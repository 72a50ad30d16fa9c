#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "cmeseg/losses.hpp"
#include "cmeseg/train.hpp"
#include "support/oracles.hpp"

using namespace cmeseg;
using oracle::dice_ref;
using oracle::logistic_ref;
using oracle::softmax_ref;

namespace {

// Two-channel heatmap from foreground probabilities.
Tensor<double> heatmap_from_fg(std::size_t h, std::size_t w, const std::vector<double>& fg) {
  Tensor<double> t(Dims{1, 2, h, w});
  for (std::size_t i = 0; i < fg.size(); ++i) {
    t[i] = 1.0 - fg[i];
    t[h * w + i] = fg[i];
  }
  return t;
}

SegMask mask_of(std::size_t h, std::size_t w, const std::vector<std::uint8_t>& v) {
  SegMask m(h, w);
  m.labels = v;
  return m;
}

SegMask random_mask(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  SegMask m(h, w);
  std::bernoulli_distribution b(0.4);
  for (auto& v : m.labels) v = b(rng);
  return m;
}

TrainingSample<double> blob_sample(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TrainingSample<double> s;
  s.image = Tensor<double>(Dims{1, 3, h, w});
  s.mask = SegMask(h, w);
  const double cy = h * (0.3 + 0.4 * u(rng)), cx = w * (0.3 + 0.4 * u(rng)), r = 0.2 * std::min(h, w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const bool in = (y - cy) * (y - cy) + (x - cx) * (x - cx) < r * r;
      s.mask.at(y, x) = in;
      const double v = (in ? 0.1 : 0.7) + 0.05 * u(rng);
      for (std::size_t c = 0; c < 3; ++c) s.image.at(0, c, y, x) = v;
    }
  s.source = "blob" + std::to_string(seed);
  return s;
}

}  // namespace

TEST(Losses, UniformPredictionGivesLn2) {
  const auto p = heatmap_from_fg(2, 2, {0.5, 0.5, 0.5, 0.5});
  const auto g = mask_of(2, 2, {0, 1, 1, 0});
  EXPECT_NEAR(logistic_loss(p, g).loss, std::log(2.0), 1e-12);
}

TEST(Losses, PerfectPredictionIsZero) {
  const auto g = mask_of(2, 2, {0, 1, 1, 0});
  const auto p = heatmap_from_fg(2, 2, {0, 1, 1, 0});
  EXPECT_NEAR(logistic_loss(p, g).loss, 0.0, 1e-12);
  EXPECT_NEAR(dice_loss(p, g).loss, 0.0, 1e-12);
}

TEST(Losses, DiceHalfOverlap) {
  // p = (1, 1, 0, 0), g = (1, 0, 0, 0): D = 2 / 3
  const auto p = heatmap_from_fg(1, 4, {1, 1, 0, 0});
  const auto g = mask_of(1, 4, {1, 0, 0, 0});
  EXPECT_NEAR(dice_loss(p, g).loss, 1.0 - (2.0 + 1e-6) / (3.0 + 1e-6), 1e-12);
  EXPECT_NEAR(dice_loss(p, g).loss, 1.0 / 3.0, 1e-6);
}

TEST(Losses, MatchReferenceFormulas) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = oracle::random_tensor(Dims{1, 2, 5, 7}, rng, -3, 3);
    const auto p = softmax_ref(s);
    const auto g = random_mask(5, 7, rng);
    EXPECT_NEAR(logistic_loss(p, g).loss, logistic_ref(p, g), 1e-12);
    EXPECT_NEAR(dice_loss(p, g).loss, dice_ref(p, g), 1e-12);
    EXPECT_NEAR(joint_loss(p, g, 0.7).loss, logistic_ref(p, g) + 0.7 * dice_ref(p, g), 1e-12);
  }
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    auto s = oracle::random_tensor(Dims{1, 2, 4, 5}, rng, -2, 2);
    const auto g = random_mask(4, 5, rng);
    for (double lambda : {0.0, 1.0, 2.5}) {
      const auto analytic = joint_loss(softmax_ref(s), g, lambda).grad;
      auto f = [&] { return logistic_ref(softmax_ref(s), g) + lambda * dice_ref(softmax_ref(s), g); };
      for (std::size_t i = 0; i < s.size(); ++i) {
        const double num = oracle::central_difference(f, s.storage(), i, 1e-6);
        worst = std::max(worst, oracle::rel_error(analytic[i], num, 1e-4));
      }
    }
    // Dice gradient with respect to the foreground probabilities directly.
    auto p = softmax_ref(s);
    const auto dg = dice_loss(p, g).grad;
    auto f = [&] { return dice_ref(p, g); };
    for (std::size_t i = 0; i < 20; ++i) {
      const double num = oracle::central_difference(f, p.storage(), 20 + i, 1e-6);
      worst = std::max(worst, oracle::rel_error(dg[i], num, 1e-4));
    }
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Losses, ZeroDiceWeightIsPureLogistic) {
  std::mt19937_64 rng(5);
  const auto p = softmax_ref(oracle::random_tensor(Dims{1, 2, 6, 6}, rng));
  const auto g = random_mask(6, 6, rng);
  const auto a = joint_loss(p, g, 0.0), b = logistic_loss(p, g);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grad.storage(), b.grad.storage());
}

TEST(Losses, ShapeMismatchThrows) {
  const auto p = heatmap_from_fg(2, 2, {0.5, 0.5, 0.5, 0.5});
  EXPECT_THROW(logistic_loss(p, SegMask(2, 3)), ShapeMismatch);
  EXPECT_THROW(dice_loss(p, SegMask(3, 2)), ShapeMismatch);
}

TEST(Sgd, WorkedExample) {
  std::vector<float> theta{1.0f, -1.0f};
  const std::vector<float> g{2.0f, 0.0f};
  sgd_step<float>(theta, g, 0.1);
  EXPECT_FLOAT_EQ(theta[0], 0.8f);
  EXPECT_FLOAT_EQ(theta[1], -1.0f);
}

TEST(Sgd, ZeroGradientOrRateLeavesParameters) {
  std::mt19937_64 rng(6);
  auto t = oracle::random_tensor(Dims{1, 1, 4, 4}, rng);
  const auto before = t.storage();
  const std::vector<double> zeros(16, 0.0);
  sgd_step<double>(t.data(), zeros, 0.5);
  EXPECT_EQ(t.storage(), before);
  const auto g = oracle::random_tensor(Dims{1, 1, 4, 4}, rng);
  sgd_step<double>(t.data(), g.data(), 0.0);
  EXPECT_EQ(t.storage(), before);
}

TEST(Sgd, LengthMismatchThrows) {
  std::vector<double> a(3), b(4);
  EXPECT_THROW(sgd_step<double>(a, b, 0.1), DimsMismatch);
}

TEST(Sgd, MomentumAccumulates) {
  std::vector<Param<double>> ps(1);
  ps[0].name = "w";
  ps[0].value = Tensor<double>(Dims{1, 1, 1, 1}, 1.0);
  ps[0].value.grad()[0] = 1.0;
  SgdOptimizer<double> opt(0.9);
  opt.step(ps, 0.1);  // v = 1
  EXPECT_NEAR(ps[0].value[0], 0.9, 1e-15);
  opt.step(ps, 0.1);  // v = 1.9
  EXPECT_NEAR(ps[0].value[0], 0.71, 1e-15);
  EXPECT_EQ(opt.steps(), 2u);
}

TEST(Schedule, StepDecay) {
  TrainConfig cfg;
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 0), 1e-4);
  EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 9), 1e-4);
  EXPECT_NEAR(lr_at_epoch(cfg, 10), 1e-5, 1e-20);
  EXPECT_NEAR(lr_at_epoch(cfg, 19), 1e-5, 1e-20);
  EXPECT_NEAR(lr_at_epoch(cfg, 20), 1e-6, 1e-20);
  EXPECT_NEAR(lr_at_epoch(cfg, 29), 1e-6, 1e-20);
  cfg.lr_decay_factor = 1.0;
  for (int e = 0; e < 30; ++e) EXPECT_EQ(lr_at_epoch(cfg, e), 1e-4);
}

TEST(TrainConfigTest, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  for (auto mutate : std::vector<void (*)(TrainConfig&)>{
           [](TrainConfig& t) { t.epochs = 0; }, [](TrainConfig& t) { t.batch_size = 0; },
           [](TrainConfig& t) { t.base_lr = 0; }, [](TrainConfig& t) { t.lr_decay_every = 0; },
           [](TrainConfig& t) { t.lr_decay_factor = 0; }, [](TrainConfig& t) { t.lr_decay_factor = 1.5; },
           [](TrainConfig& t) { t.dice_weight = -1; }, [](TrainConfig& t) { t.momentum = 1.0; }}) {
    TrainConfig t;
    mutate(t);
    EXPECT_THROW(t.validate(), BadTrainConfig);
  }
}

TEST(Train, EmptyTrainingSetThrows) {
  auto net = Fcn8<double>::build(WidthScale{1, 32}, 2, 0);
  TrainConfig cfg;
  cfg.epochs = 1;
  EXPECT_THROW(train<double>(net, {}, {}, cfg), EmptyDataset);
}

TEST(Train, OneEpochOneSampleUpdatesEachTensorOnce) {
  auto net = Fcn8<double>::build(WidthScale{1, 32}, 2, 0);
  const auto before = net.params();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.base_lr = 1e-2;
  const auto r = train<double>(net, {blob_sample(32, 32, 1)}, {}, cfg);
  EXPECT_EQ(r.tensor_updates, net.params().size());
  ASSERT_EQ(r.log.size(), 1u);
  EXPECT_EQ(r.best_epoch, 1);
  std::size_t changed = 0;
  for (std::size_t k = 0; k < before.size(); ++k) changed += before[k].value.storage() != net.params()[k].value.storage();
  EXPECT_GT(changed, before.size() / 2);
}

TEST(Train, SeedDeterminism) {
  std::vector<TrainingSample<double>> set;
  for (int i = 0; i < 3; ++i) set.push_back(blob_sample(32, 32, 10 + i));
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.base_lr = 1e-3;
  cfg.momentum = 0.9;
  cfg.seed = 7;
  auto a = Fcn8<double>::build(WidthScale{1, 32}, 2, 3);
  auto b = Fcn8<double>::build(WidthScale{1, 32}, 2, 3);
  const auto ra = train<double>(a, set, {set[0]}, cfg);
  const auto rb = train<double>(b, set, {set[0]}, cfg);
  for (std::size_t k = 0; k < a.params().size(); ++k) EXPECT_EQ(a.params()[k].value.storage(), b.params()[k].value.storage());
  ASSERT_EQ(ra.log.size(), rb.log.size());
  for (std::size_t e = 0; e < ra.log.size(); ++e) EXPECT_EQ(ra.log[e].train_loss, rb.log[e].train_loss);
}

TEST(Train, SmallStepsDoNotIncreaseLoss) {
  // Repeated full-gradient steps on one fixed sample.
  int steps = 0, non_increasing = 0;
  for (int trial = 0; trial < 10; ++trial) {
    auto net = Fcn8<double>::build(WidthScale{1, 32}, 2, 100 + trial);
    const auto s = blob_sample(32, 32, 200 + trial);
    SgdOptimizer<double> opt;
    auto loss_now = [&] { return joint_loss(net.forward(s.image, PassMode::Inference).heatmap, s.mask, 1.0).loss; };
    double prev = loss_now();
    for (int k = 0; k < 10; ++k) {
      net.zero_grad();
      auto fwd = net.forward(s.image);
      net.backward(joint_loss(fwd.heatmap, s.mask, 1.0).grad);
      opt.step(net.params(), 1e-3);
      const double cur = loss_now();
      ++steps;
      non_increasing += cur <= prev;
      prev = cur;
    }
  }
  EXPECT_GE(non_increasing, steps * 95 / 100) << non_increasing << "/" << steps;
}

TEST(Train, BestParamsFollowValidationScore) {
  std::vector<TrainingSample<double>> set;
  for (int i = 0; i < 2; ++i) set.push_back(blob_sample(32, 32, 30 + i));
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.base_lr = 1e-3;
  auto net = Fcn8<double>::build(WidthScale{1, 32}, 2, 3);
  const auto r = train<double>(net, set, {set[1]}, cfg);
  double best = -1;
  int best_epoch = -1;
  for (const auto& rec : r.log)
    if (rec.val_dice > best) best = rec.val_dice, best_epoch = rec.epoch;
  EXPECT_EQ(r.best_epoch, best_epoch);
  EXPECT_EQ(r.best_score, best);
  EXPECT_EQ(r.best_params.size(), net.params().size());
}
