#pragma once

// SGD training of the FCN-8 graph under a step-decayed learning rate.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cmeseg/error.hpp"
#include "cmeseg/fcn8.hpp"
#include "cmeseg/image.hpp"
#include "cmeseg/losses.hpp"
#include "cmeseg/metrics.hpp"

namespace cmeseg {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 1;
  double base_lr = 1e-4;
  int lr_decay_every = 10;
  double lr_decay_factor = 0.1;
  double dice_weight = 1.0;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw BadTrainConfig("epochs must be >= 1");
    if (batch_size < 1) throw BadTrainConfig("batch_size must be >= 1");
    if (!(base_lr > 0.0)) throw BadTrainConfig("base_lr must be > 0");
    if (lr_decay_every < 1) throw BadTrainConfig("lr_decay_every must be >= 1");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0)) throw BadTrainConfig("lr_decay_factor must be in (0, 1]");
    if (!(dice_weight >= 0.0)) throw BadTrainConfig("dice_weight must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw BadTrainConfig("momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0)) throw BadTrainConfig("weight_decay must be >= 0");
  }
};

/// base_lr * decay_factor ^ floor(epoch / decay_every), epochs counted from 0.
inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
  return cfg.base_lr * std::pow(cfg.lr_decay_factor, epoch / cfg.lr_decay_every);
}

/// theta <- theta - lr * grad, computed in double.
template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, double lr) {
  if (params.size() != grads.size())
    throw DimsMismatch("sgd_step: " + std::to_string(params.size()) + " params vs " +
                       std::to_string(grads.size()) + " grads");
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i] = static_cast<T>(static_cast<double>(params[i]) - lr * static_cast<double>(grads[i]));
}

/// Plain SGD by default; optional heavy-ball momentum and L2 weight decay.
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum = 0.0, double weight_decay = 0.0) : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(std::vector<Param<T>>& params, double lr) {
    if (momentum_ == 0.0 && weight_decay_ == 0.0) {
      for (auto& p : params) {
        const auto g = std::as_const(p.value).grad();
        if (g.size() != p.value.size()) throw DimsMismatch("missing gradient for " + p.name);
        sgd_step<T>(p.value.data(), g, lr);
        ++steps_;
      }
      return;
    }
    if (velocity_.empty()) {
      for (const auto& p : params) velocity_.emplace_back(p.value.size(), 0.0);
    }
    if (velocity_.size() != params.size()) throw DimsMismatch("optimizer state does not match parameters");
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = params[k];
      const auto g = std::as_const(p.value).grad();
      if (g.size() != p.value.size() || velocity_[k].size() != g.size())
        throw DimsMismatch("gradient/velocity size for " + p.name);
      auto v = p.value.data();
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double grad = static_cast<double>(g[i]) + weight_decay_ * static_cast<double>(v[i]);
        velocity_[k][i] = momentum_ * velocity_[k][i] + grad;
        v[i] = static_cast<T>(static_cast<double>(v[i]) - lr * velocity_[k][i]);
      }
      ++steps_;
    }
  }

  /// Number of per-tensor updates applied so far.
  std::size_t steps() const { return steps_; }

 private:
  double momentum_, weight_decay_;
  std::vector<std::vector<double>> velocity_;
  std::size_t steps_ = 0;
};

template <typename T>
struct TrainingSample {
  Tensor<T> image;  // (1, 3, H, W), intensities in [0, 1]
  SegMask mask;
  std::string source;  // provenance id of the original image
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_dice = 0.0;
  double val_dice = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
};

inline void write_epoch_record(std::ostream& os, const EpochRecord& r) {
  os << "epoch=" << r.epoch << " train_loss=" << r.train_loss << " train_dice=" << r.train_dice
     << " val_dice=" << r.val_dice << " lr=" << r.lr << "\n";
}

template <typename T>
struct TrainResult {
  std::vector<EpochRecord> log;
  std::vector<Param<T>> best_params;
  int best_epoch = -1;
  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t tensor_updates = 0;
};

/// Hard labeling (argmax of the heatmap) for one image.
template <typename T>
SegMask predict_mask(Fcn8<T>& net, const Tensor<T>& image) {
  return argmax_labels(net.forward(image, PassMode::Inference).heatmap);
}

template <typename T>
double mean_dice(Fcn8<T>& net, const std::vector<TrainingSample<T>>& samples) {
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (const auto& smp : samples) s += dice(predict_mask(net, smp.image), smp.mask);
  return s / static_cast<double>(samples.size());
}

/// Sequential seeded-shuffle SGD. After each epoch the validation Dice is
/// computed and the best parameters so far are retained (by validation Dice,
/// or by training Dice when there is no validation split). Training never
/// stops early.
template <typename T>
TrainResult<T> train(Fcn8<T>& net, const std::vector<TrainingSample<T>>& train_set,
                     const std::vector<TrainingSample<T>>& val_set, const TrainConfig& cfg,
                     const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw EmptyDataset("training split is empty");
  TrainResult<T> result;
  SgdOptimizer<T> opt(cfg.momentum, cfg.weight_decay);
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0, dice_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      net.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        const auto& s = train_set[order[k]];
        auto fwd = net.forward(s.image, PassMode::Train);
        auto loss = joint_loss(fwd.heatmap, s.mask, cfg.dice_weight);
        if (!std::isfinite(loss.loss)) throw Error(ErrorClass::Numeric, "non-finite training loss");
        loss_sum += loss.loss;
        dice_sum += dice(argmax_labels(fwd.heatmap), s.mask);
        if (end - start > 1)
          for (auto& g : loss.grad.storage()) g = static_cast<T>(static_cast<double>(g) / static_cast<double>(end - start));
        net.backward(loss.grad);
      }
      opt.step(net.params(), lr);
    }
    net.clear_state();
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.train_dice = dice_sum / static_cast<double>(train_set.size());
    rec.val_dice = mean_dice(net, val_set);
    const double score = val_set.empty() ? rec.train_dice : rec.val_dice;
    if (score > result.best_score) {
      result.best_score = score;
      result.best_epoch = rec.epoch;
      result.best_params = net.params();
      for (auto& p : result.best_params) p.value.drop_grad();
    }
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.tensor_updates = opt.steps();
  return result;
}

}  // namespace cmeseg
