// cmeseg: command-line front end for the segmentation pipeline.
//
// Exit status: 0 ok, 2 configuration error, 3 data error, 4 numeric error,
// 1 anything else.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "cmeseg/config.hpp"
#include "cmeseg/pipeline.hpp"

namespace {

int exit_code(cmeseg::ErrorClass c) {
  switch (c) {
    case cmeseg::ErrorClass::Config: return 2;
    case cmeseg::ErrorClass::Data: return 3;
    case cmeseg::ErrorClass::Numeric: return 4;
    case cmeseg::ErrorClass::Internal: return 1;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cystoid macular edema segmentation for retinal OCT B-scans"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "overrides the configuration seed");
  app.add_option("--out", out_dir, "output directory (overrides output_dir)");

  std::string input;
  auto* pre = app.add_subcommand("preprocess", "denoise, crop the retina and convert to RGB");
  pre->add_option("--input", input, "dataset tree")->required();

  auto* aug = app.add_subcommand("augment", "grow a dataset tree to the target count");
  aug->add_option("--input", input, "dataset tree")->required();

  auto* trn = app.add_subcommand("train", "train the network on dataset_root");
  trn->add_option("--data", input, "dataset tree (overrides dataset_root)");

  std::string checkpoint, crf = "off";
  auto* inf = app.add_subcommand("infer", "predict masks for every image in a dataset tree");
  inf->add_option("--input", input, "dataset tree")->required();
  inf->add_option("--checkpoint", checkpoint, "model checkpoint (defaults to the configured one)");
  inf->add_option("--crf", crf, "CRF refinement")->check(CLI::IsMember({"on", "off"}));

  std::string pred;
  auto* ref = app.add_subcommand("refine", "CRF-refine existing predictions");
  ref->add_option("--input", input, "dataset tree with the images")->required();
  ref->add_option("--pred", pred, "prediction tree (mask.png per slice)")->required();

  std::string report;
  auto* ev = app.add_subcommand("evaluate", "Dice and Wilcoxon report against the graders");
  ev->add_option("--pred", pred, "prediction tree")->required();
  ev->add_option("--truth", input, "dataset tree with grader masks")->required();
  ev->add_option("--report", report, "report path (defaults to <out>/report.txt)");

  CLI11_PARSE(app, argc, argv);

  try {
    cmeseg::PipelineConfig cfg = config_path.empty() ? cmeseg::PipelineConfig{} : cmeseg::load_config(config_path);
    if (seed) {
      cfg.seed = *seed;
      cfg.train.seed = *seed;
      cfg.augment.seed = *seed;
    }
    if (!out_dir.empty()) cfg.output_dir = out_dir;
    cmeseg::validate_config(cfg);

    if (*pre) {
      const auto s = cmeseg::cmd_preprocess(input, cfg.output_dir, cfg);
      std::cout << "preprocessed " << s.processed << " images into " << cfg.output_dir.string() << "\n";
    } else if (*aug) {
      const auto n = cmeseg::cmd_augment(input, cfg.output_dir, cfg);
      std::cout << "wrote " << n << " samples into " << cfg.output_dir.string() << "\n";
    } else if (*trn) {
      if (!input.empty()) cfg.dataset_root = input;
      if (cfg.dataset_root.empty()) throw cmeseg::ConfigError("dataset_root is not set");
      const auto s = cmeseg::cmd_train(cfg, &std::cout);
      std::cout << "best epoch " << s.best_epoch << " (score " << s.best_score << "), training Dice "
                << s.final_train_dice << "; checkpoint " << cfg.checkpoint.string() << "\n";
    } else if (*inf) {
      const auto s = cmeseg::cmd_infer(checkpoint.empty() ? cfg.checkpoint : std::filesystem::path(checkpoint), input, cfg.output_dir,
                                       crf == "on", cfg);
      std::cout << "wrote " << s.images << " predictions into " << cfg.output_dir.string() << "\n";
    } else if (*ref) {
      const auto n = cmeseg::cmd_refine(input, pred, cfg.output_dir, cfg);
      std::cout << "refined " << n << " predictions into " << cfg.output_dir.string() << "\n";
    } else if (*ev) {
      const std::filesystem::path path = report.empty() ? cfg.output_dir / "report.txt" : std::filesystem::path(report);
      const auto rep = cmeseg::cmd_evaluate(pred, input, path);
      std::cout << "Dice " << rep.overall.mean << " +/- " << rep.overall.std << " over " << rep.images.size()
                << " images";
      if (rep.wilcoxon) std::cout << "; Wilcoxon p = " << rep.wilcoxon->p_two_sided;
      std::cout << "\nreport: " << path.string() << "\n";
    }
  } catch (const cmeseg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.error_class());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
