#pragma once

// Pipeline configuration, read from JSON. Unknown keys are errors.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <set>
#include <string>

#include "json.hpp"

#include "cmeseg/crf.hpp"
#include "cmeseg/dataset.hpp"
#include "cmeseg/error.hpp"
#include "cmeseg/fcn8.hpp"
#include "cmeseg/preprocess.hpp"
#include "cmeseg/train.hpp"

namespace cmeseg {

enum class UnarySource { Labels, Probabilities };

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::filesystem::path dataset_root;
  std::filesystem::path output_dir = "out";
  std::filesystem::path checkpoint = "out/model.ckpt";

  WidthScale width{1, 1};
  std::size_t num_classes = 2;

  TrainConfig train;
  double val_fraction = 0.2;

  CrfConfig crf;
  UnarySource unary = UnarySource::Labels;

  DenoiseConfig denoise;
  CropConfig crop;
  AugmentSpec augment;
};

namespace detail {

using json = nlohmann::json;

inline void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ConfigError("unknown key " + (where.empty() ? k : where + "." + k));
}

template <typename T>
void read(const json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError((where.empty() ? std::string(key) : where + "." + key) + ": " + e.what());
  }
}

}  // namespace detail

inline PipelineConfig parse_config(const nlohmann::json& j) {
  using detail::read;
  using detail::reject_unknown;
  PipelineConfig c;
  reject_unknown(j, "", {"seed", "dataset_root", "output_dir", "checkpoint", "model", "train", "crf", "denoise", "crop", "augment"});
  read(j, "seed", c.seed, "");
  std::string s;
  if (j.contains("dataset_root")) read(j, "dataset_root", s, ""), c.dataset_root = s;
  if (j.contains("output_dir")) read(j, "output_dir", s, ""), c.output_dir = s;
  if (j.contains("checkpoint")) read(j, "checkpoint", s, ""), c.checkpoint = s;

  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown(m, "model", {"width_num", "width_den", "num_classes"});
    read(m, "width_num", c.width.num, "model");
    read(m, "width_den", c.width.den, "model");
    read(m, "num_classes", c.num_classes, "model");
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    reject_unknown(t, "train", {"epochs", "batch_size", "base_lr", "lr_decay_every", "lr_decay_factor", "dice_weight",
                                "momentum", "weight_decay", "val_fraction"});
    read(t, "epochs", c.train.epochs, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "base_lr", c.train.base_lr, "train");
    read(t, "lr_decay_every", c.train.lr_decay_every, "train");
    read(t, "lr_decay_factor", c.train.lr_decay_factor, "train");
    read(t, "dice_weight", c.train.dice_weight, "train");
    read(t, "momentum", c.train.momentum, "train");
    read(t, "weight_decay", c.train.weight_decay, "train");
    read(t, "val_fraction", c.val_fraction, "train");
  }
  if (j.contains("crf")) {
    const auto& r = j.at("crf");
    reject_unknown(r, "crf", {"spatial_sigma", "spatial_weight", "bilateral_spatial_sigma", "bilateral_intensity_sigma",
                              "bilateral_weight", "iterations", "convergence_tol", "gt_certainty", "unary",
                              "exact_pixel_limit"});
    auto& sp = c.crf.kernels[0];
    auto& bi = c.crf.kernels[1];
    read(r, "spatial_sigma", sp.sigma_spatial, "crf");
    read(r, "spatial_weight", sp.weight, "crf");
    read(r, "bilateral_spatial_sigma", bi.sigma_spatial, "crf");
    read(r, "bilateral_intensity_sigma", bi.sigma_intensity, "crf");
    read(r, "bilateral_weight", bi.weight, "crf");
    read(r, "iterations", c.crf.iterations, "crf");
    read(r, "convergence_tol", c.crf.convergence_tol, "crf");
    read(r, "gt_certainty", c.crf.gt_certainty, "crf");
    read(r, "exact_pixel_limit", c.crf.exact_pixel_limit, "crf");
    std::string u = "labels";
    read(r, "unary", u, "crf");
    if (u == "labels") c.unary = UnarySource::Labels;
    else if (u == "probs") c.unary = UnarySource::Probabilities;
    else throw ConfigError("crf.unary must be \"labels\" or \"probs\"");
  }
  if (j.contains("denoise")) {
    const auto& d = j.at("denoise");
    reject_unknown(d, "denoise", {"patch_size", "search_window", "max_group", "grid_stride", "match_threshold",
                                  "hard_threshold", "prefilter_threshold", "sigma", "log_domain", "log_offset"});
    read(d, "patch_size", c.denoise.patch_size, "denoise");
    read(d, "search_window", c.denoise.search_window, "denoise");
    read(d, "max_group", c.denoise.max_group, "denoise");
    read(d, "grid_stride", c.denoise.grid_stride, "denoise");
    read(d, "match_threshold", c.denoise.match_threshold, "denoise");
    read(d, "hard_threshold", c.denoise.hard_threshold, "denoise");
    read(d, "prefilter_threshold", c.denoise.prefilter_threshold, "denoise");
    read(d, "sigma", c.denoise.sigma, "denoise");
    read(d, "log_domain", c.denoise.log_domain, "denoise");
    read(d, "log_offset", c.denoise.log_offset, "denoise");
  }
  if (j.contains("crop")) {
    const auto& d = j.at("crop");
    reject_unknown(d, "crop", {"smoothing", "relative_threshold", "margin", "min_peak"});
    read(d, "smoothing", c.crop.smoothing, "crop");
    read(d, "relative_threshold", c.crop.relative_threshold, "crop");
    read(d, "margin", c.crop.margin, "crop");
    read(d, "min_peak", c.crop.min_peak, "crop");
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    reject_unknown(a, "augment", {"target_count", "max_translate", "max_rotate", "allow_hflip", "crop_fraction"});
    read(a, "target_count", c.augment.target_count, "augment");
    read(a, "max_translate", c.augment.max_translate, "augment");
    read(a, "max_rotate", c.augment.max_rotate, "augment");
    read(a, "allow_hflip", c.augment.allow_hflip, "augment");
    read(a, "crop_fraction", c.augment.crop_fraction, "augment");
  }
  c.train.seed = c.seed;
  c.augment.seed = c.seed;
  return c;
}

/// Checks everything that can be checked without touching data.
inline void validate_config(const PipelineConfig& c) {
  try {
    c.train.validate();
    (void)c.width.apply(64);
    c.crf.validate(c.num_classes);
    c.denoise.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (c.num_classes < 2) throw ConfigError("model.num_classes must be >= 2");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) throw ConfigError("train.val_fraction must be in (0, 1)");
  if (!(c.crf.gt_certainty > 1.0 / static_cast<double>(c.num_classes) && c.crf.gt_certainty < 1.0))
    throw ConfigError("crf.gt_certainty must be in (1/K, 1)");
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

}  // namespace cmeseg
