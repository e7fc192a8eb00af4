// Writes a small random weight bank, handy for smoke runs without real
// VGG weights.
//   make_toy_bank OUT [--seed N] [--blocks K] [--channels C]

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "painterly/backbone.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write a random NPHW weight bank with one conv per block"};
  std::string out;
  std::uint32_t seed = 0;
  int blocks = 5;
  int channels = 8;
  app.option_defaults()->always_capture_default();
  app.add_option("out", out, "output file")->required();
  app.add_option("--seed", seed, "RNG seed");
  app.add_option("--blocks", blocks, "conv blocks, conv1_1 up to conv5_1")->check(CLI::Range(1, 5));
  app.add_option("--channels", channels, "output channels per layer")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  std::vector<std::pair<std::string, int>> layers;
  for (int b = 1; b <= blocks; ++b) layers.emplace_back("conv" + std::to_string(b) + "_1", channels);
  try {
    painterly::save_weights(painterly::random_bank(layers, seed), out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
