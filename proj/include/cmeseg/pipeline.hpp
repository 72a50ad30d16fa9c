#pragma once

// The six pipeline stages behind the command-line tool. Each reads and writes
// the dataset directory layout and is deterministic given (config, seed).

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cmeseg/checkpoint.hpp"
#include "cmeseg/config.hpp"
#include "cmeseg/crf.hpp"
#include "cmeseg/dataset.hpp"
#include "cmeseg/error.hpp"
#include "cmeseg/fcn8.hpp"
#include "cmeseg/image.hpp"
#include "cmeseg/metrics.hpp"
#include "cmeseg/preprocess.hpp"
#include "cmeseg/train.hpp"

namespace cmeseg {

namespace fs = std::filesystem;

inline constexpr const char* kSourcesFile = "sources.txt";
inline constexpr const char* kManifestFile = "manifest.txt";

namespace detail {

inline fs::path slice_dir(const fs::path& root, const std::string& patient, int slice) {
  return root / patient / std::to_string(slice);
}

/// Throws one error naming every failed item, classed after the first failure.
inline void raise_failures(const std::vector<std::string>& failures, ErrorClass cls, const std::string& what) {
  if (failures.empty()) return;
  std::ostringstream os;
  os << what << " failed for " << failures.size() << " item(s):";
  for (const auto& f : failures) os << "\n  " << f;
  throw Error(cls, os.str());
}

/// "patient/slice source" lines written by cmd_augment.
inline std::map<std::string, std::string> read_sources(const fs::path& root) {
  std::map<std::string, std::string> m;
  std::ifstream f(root / kSourcesFile);
  if (!f) return m;
  std::string id, src;
  while (f >> id >> src) m[id] = src;
  return m;
}

}  // namespace detail

/// Loads a dataset tree; provenance comes from sources.txt when present.
inline std::vector<LabeledImage> load_dataset(const fs::path& root) {
  const auto manifest = load_manifest(root);
  const auto sources = detail::read_sources(root);
  std::vector<LabeledImage> out;
  for (const auto& s : manifest) {
    LabeledImage li = load_sample(s);
    if (auto it = sources.find(li.source); it != sources.end()) li.source = it->second;
    out.push_back(std::move(li));
  }
  return out;
}

inline void write_labeled(const fs::path& dir, const LabeledImage& li, bool rgb) {
  fs::create_directories(dir);
  if (rgb) write_rgb_png(dir / "image.png", li.image);
  else write_gray_png(dir / "image.png", li.image);
  write_mask_png(dir / "mask_g1.png", li.mask);
  if (li.mask_g2) write_mask_png(dir / "mask_g2.png", *li.mask_g2);
}

struct PreprocessSummary {
  std::size_t processed = 0;
};

/// denoise -> crop_retina -> RGB per image; masks cropped with the same rows.
/// Row offsets go to crop.txt next to each image. Failing images are listed
/// together after the others have been written.
inline PreprocessSummary cmd_preprocess(const fs::path& in_dir, const fs::path& out_dir, const PipelineConfig& cfg) {
  const auto manifest = load_manifest(in_dir);
  PreprocessSummary sum;
  std::vector<std::string> failures;
  std::optional<ErrorClass> first_class;
  std::vector<Sample> written;
  for (const auto& s : manifest) {
    try {
      LabeledImage li = load_sample(s);
      const std::size_t full_height = li.image.height;
      const RetinaCrop crop = crop_retina(denoise(li.image, cfg.denoise), cfg.crop);
      li.image = crop.image;
      li.mask = crop_rows(li.mask, crop.row_begin, crop.row_end);
      if (li.mask_g2) li.mask_g2 = crop_rows(*li.mask_g2, crop.row_begin, crop.row_end);
      const fs::path dir = detail::slice_dir(out_dir, s.patient, s.slice);
      write_labeled(dir, li, true);
      std::ofstream(dir / "crop.txt") << "row_begin=" << crop.row_begin << " row_end=" << crop.row_end
                                      << " full_height=" << full_height << "\n";
      written.push_back({dir / "image.png", dir / "mask_g1.png",
                         li.mask_g2 ? std::optional<fs::path>(dir / "mask_g2.png") : std::nullopt, s.patient, s.slice});
      ++sum.processed;
    } catch (const Error& e) {
      if (!first_class) first_class = e.error_class();
      failures.push_back(s.image.string() + ": " + e.what());
    }
  }
  fs::create_directories(out_dir);
  std::ofstream mf(out_dir / kManifestFile);
  write_manifest(mf, written);
  detail::raise_failures(failures, first_class.value_or(ErrorClass::Data), "preprocess");
  return sum;
}

/// Writes target_count samples as out/<patient>/<k>/ plus sources.txt.
inline std::size_t cmd_augment(const fs::path& in_dir, const fs::path& out_dir, const PipelineConfig& cfg) {
  const auto samples = load_dataset(in_dir);
  const auto aug = augment(samples, cfg.augment);
  std::map<std::string, int> next_slice;
  fs::create_directories(out_dir);
  std::ofstream src(out_dir / kSourcesFile);
  for (const auto& a : aug) {
    const int k = next_slice[a.patient]++;
    write_labeled(detail::slice_dir(out_dir, a.patient, k), a, true);
    src << a.patient << "/" << k << " " << a.source << "\n";
  }
  return aug.size();
}

template <typename T>
std::vector<TrainingSample<T>> to_training(const std::vector<LabeledImage>& v) {
  std::vector<TrainingSample<T>> out;
  out.reserve(v.size());
  for (const auto& li : v) out.push_back({gray_to_rgb<T>(li.image), li.mask, li.source});
  return out;
}

struct TrainSummary {
  std::size_t train_images = 0, val_images = 0;
  int best_epoch = -1;
  double best_score = 0.0;
  double final_train_dice = 0.0;
};

/// split -> train -> best checkpoint + output_dir/train_log.txt.
inline TrainSummary cmd_train(const PipelineConfig& cfg, std::ostream* progress = nullptr) {
  validate_config(cfg);
  const auto data = load_dataset(cfg.dataset_root);
  const auto parts = split(data, cfg.val_fraction, cfg.seed);
  const auto train_set = to_training<float>(parts.train);
  const auto val_set = to_training<float>(parts.val);
  auto net = Fcn8<float>::build(cfg.width, cfg.num_classes, cfg.seed);

  fs::create_directories(cfg.output_dir);
  std::ofstream log(cfg.output_dir / "train_log.txt");
  log.precision(10);
  auto result = train(net, train_set, val_set, cfg.train, [&](const EpochRecord& r) {
    write_epoch_record(log, r);
    log.flush();
    if (progress) write_epoch_record(*progress, r);
  });
  copy_params(net.params(), result.best_params);
  if (!cfg.checkpoint.parent_path().empty()) fs::create_directories(cfg.checkpoint.parent_path());
  save_checkpoint(net, cfg.checkpoint,
                  {{"epoch", static_cast<float>(result.best_epoch)},
                   {"learning_rate", static_cast<float>(result.log[static_cast<std::size_t>(result.best_epoch - 1)].lr)}});
  TrainSummary s;
  s.train_images = train_set.size();
  s.val_images = val_set.size();
  s.best_epoch = result.best_epoch;
  s.best_score = result.best_score;
  s.final_train_dice = mean_dice(net, train_set);
  return s;
}

/// Hard FCN labeling refined by mean-field CRF over the image intensities.
template <typename T>
SegMask refine_labels(const Tensor<T>& heatmap, const Plane& image, const PipelineConfig& cfg) {
  const UnaryField u = cfg.unary == UnarySource::Labels
                           ? unary_from_labels(argmax_labels(heatmap), cfg.crf.gt_certainty, heatmap.dims().c)
                           : unary_from_probs(heatmap);
  return mean_field_infer(u, cfg.crf, image).labeling;
}

struct InferSummary {
  std::size_t images = 0;
};

/// For every image.png under in_dir: mask.png and heatmap.png (CME
/// probability) at out_dir/<patient>/<slice>/.
inline InferSummary cmd_infer(const fs::path& checkpoint, const fs::path& in_dir, const fs::path& out_dir, bool crf,
                              const PipelineConfig& cfg) {
  validate_config(cfg);
  auto net = Fcn8<float>::build(cfg.width, cfg.num_classes, cfg.seed);
  load_checkpoint(net, checkpoint);
  const auto manifest = load_manifest(in_dir);
  InferSummary sum;
  for (const auto& s : manifest) {
    const Plane img = read_gray_png(s.image);
    const auto fwd = net.forward(gray_to_rgb<float>(img), PassMode::Inference);
    const SegMask mask = crf ? refine_labels(fwd.heatmap, img, cfg) : argmax_labels(fwd.heatmap);
    const fs::path dir = detail::slice_dir(out_dir, s.patient, s.slice);
    fs::create_directories(dir);
    write_mask_png(dir / "mask.png", mask);
    Plane heat(img.height, img.width);
    for (std::size_t i = 0; i < heat.px.size(); ++i)
      heat.px[i] = static_cast<double>(fwd.heatmap[kForegroundChannel * heat.px.size() + i]);
    write_gray_png(dir / "heatmap.png", heat);
    ++sum.images;
  }
  return sum;
}

/// CRF refinement of existing predictions: pred_dir/<patient>/<slice>/mask.png
/// with the matching image under image_dir, written to out_dir.
inline std::size_t cmd_refine(const fs::path& image_dir, const fs::path& pred_dir, const fs::path& out_dir,
                              const PipelineConfig& cfg) {
  validate_config(cfg);
  const auto manifest = load_manifest(image_dir);
  std::vector<std::string> missing;
  for (const auto& s : manifest)
    if (!fs::exists(detail::slice_dir(pred_dir, s.patient, s.slice) / "mask.png"))
      missing.push_back((detail::slice_dir(pred_dir, s.patient, s.slice) / "mask.png").string());
  detail::raise_failures(missing, ErrorClass::Data, "refine (missing predictions)");
  for (const auto& s : manifest) {
    const Plane img = read_gray_png(s.image);
    const SegMask pred = read_mask_png(detail::slice_dir(pred_dir, s.patient, s.slice) / "mask.png");
    if (pred.height != img.height || pred.width != img.width)
      throw ExtentMismatch("prediction for " + s.patient + "/" + std::to_string(s.slice));
    const UnaryField u = unary_from_labels(pred, cfg.crf.gt_certainty, cfg.num_classes);
    const fs::path dir = detail::slice_dir(out_dir, s.patient, s.slice);
    fs::create_directories(dir);
    write_mask_png(dir / "mask.png", mean_field_infer(u, cfg.crf, img).labeling);
  }
  return manifest.size();
}

/// Compares pred_dir/<patient>/<slice>/mask.png with the graders' masks.
inline EvalReport cmd_evaluate(const fs::path& pred_dir, const fs::path& truth_dir, const fs::path& out_path) {
  const auto manifest = load_manifest(truth_dir);
  std::vector<std::string> missing;
  for (const auto& s : manifest) {
    const fs::path p = detail::slice_dir(pred_dir, s.patient, s.slice) / "mask.png";
    if (!fs::exists(p)) missing.push_back(p.string());
  }
  if (fs::is_directory(pred_dir))
    for (const auto& pdir : fs::directory_iterator(pred_dir)) {
      if (!pdir.is_directory()) continue;
      for (const auto& sdir : fs::directory_iterator(pdir.path())) {
        if (!fs::exists(sdir.path() / "mask.png")) continue;
        const std::string pat = pdir.path().filename().string(), sl = sdir.path().filename().string();
        const bool known = std::any_of(manifest.begin(), manifest.end(), [&](const Sample& s) {
          return s.patient == pat && std::to_string(s.slice) == sl;
        });
        if (!known) missing.push_back((sdir.path() / "mask.png").string() + " (no ground truth)");
      }
    }
  detail::raise_failures(missing, ErrorClass::Data, "evaluate (unmatched files)");

  const bool have_g2 = std::all_of(manifest.begin(), manifest.end(), [](const Sample& s) { return s.mask_g2.has_value(); });
  std::vector<SegMask> autos, g1, g2;
  std::vector<std::string> patients, names;
  for (const auto& s : manifest) {
    autos.push_back(read_mask_png(detail::slice_dir(pred_dir, s.patient, s.slice) / "mask.png"));
    g1.push_back(read_mask_png(s.mask_g1));
    if (have_g2) g2.push_back(read_mask_png(*s.mask_g2));
    patients.push_back(s.patient);
    names.push_back(std::to_string(s.slice));
  }
  EvalReport rep = build_report(autos, g1, have_g2 ? &g2 : nullptr, patients, names);
  if (!out_path.empty()) {
    if (!out_path.parent_path().empty()) fs::create_directories(out_path.parent_path());
    std::ofstream f(out_path);
    if (!f) throw ImageIoError("cannot create " + out_path.string());
    write_report(f, rep);
  }
  return rep;
}

}  // namespace cmeseg
