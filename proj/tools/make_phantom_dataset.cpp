// Writes a synthetic dataset tree of speckled layered phantoms with
// elliptical low-intensity blobs, in the layout the pipeline reads.

#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "cmeseg/dataset.hpp"
#include "cmeseg/pipeline.hpp"
#include "cmeseg/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Synthetic OCT-like phantom dataset"};
  std::string out;
  int patients = 4, slices = 4;
  std::size_t height = 96, width = 96;
  double speckle = 0.2;
  std::uint64_t seed = 0;
  bool second_grader = true;
  app.add_option("--out", out, "output root")->required();
  app.add_option("--patients", patients)->check(CLI::PositiveNumber);
  app.add_option("--slices", slices, "images per patient")->check(CLI::PositiveNumber);
  app.add_option("--height", height);
  app.add_option("--width", width);
  app.add_option("--speckle", speckle, "multiplicative noise sigma");
  app.add_option("--seed", seed);
  app.add_flag("!--no-second-grader", second_grader, "omit mask_g2.png");
  CLI11_PARSE(app, argc, argv);

  try {
    cmeseg::PhantomSpec spec;
    spec.height = height;
    spec.width = width;
    for (int p = 0; p < patients; ++p)
      for (int s = 0; s < slices; ++s) {
        const std::uint64_t id = seed * 1000003ULL + static_cast<std::uint64_t>(p * slices + s);
        const auto ph = cmeseg::make_phantom(spec, id);
        cmeseg::LabeledImage li;
        li.image = cmeseg::add_speckle(ph.clean, speckle, id ^ 0x5bd1e995ULL);
        li.mask = ph.edema;
        if (second_grader) {
          // A second annotator that disagrees along the blob borders.
          cmeseg::AugmentTransform jitter;
          jitter.tx = (s % 2 == 0) ? 1.0 : -1.0;
          li.mask_g2 = cmeseg::apply_transform(ph.edema, jitter);
        }
        char name[16];
        std::snprintf(name, sizeof name, "P%02d", p + 1);
        cmeseg::write_labeled(std::filesystem::path(out) / name / std::to_string(s + 1), li, false);
      }
    std::cout << "wrote " << patients * slices << " phantoms under " << out << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
