#pragma once

// Command-line front end. run() is the whole program; tools/ only forwards
// main() to it so the tests can drive it in-process.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "painterly/backbone.hpp"
#include "painterly/errors.hpp"
#include "painterly/estimator.hpp"
#include "painterly/harmonizer.hpp"
#include "painterly/image_io.hpp"
#include "painterly/postprocess.hpp"

namespace painterly::cli {

enum ExitCode : int { ok = 0, usage = 2, io = 3, numeric = 4 };

struct RunConfig {
  std::string input, mask, style, out, weights;
  std::string style_probs, style_table, style_class;
  int size = 512;
  int iters1 = 1000;
  int iters2 = 1000;
  std::string pass = "both";
  bool postprocess = true;
  int dilate = 8;
  std::uint32_t seed = 0;
  std::string debug_dir;
};

inline void write_loss_trace(const std::string& path, const std::vector<std::pair<int, const PassResult*>>& passes) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "pass,iteration,content,style,histogram,tv,total\n";
  out.precision(17);
  for (const auto& [number, result] : passes) {
    for (std::size_t i = 0; i < result->trace.size(); ++i) {
      const auto& b = result->trace[i];
      out << number << ',' << i << ',' << b.content << ',' << b.style << ',' << b.histogram << ',' << b.tv << ','
          << b.total << '\n';
    }
  }
}

inline int execute(const RunConfig& cfg, std::ostream& log) {
  for (const auto* path : {&cfg.input, &cfg.mask, &cfg.style, &cfg.weights, &cfg.style_probs, &cfg.style_table}) {
    if (!path->empty() && !std::filesystem::exists(*path)) throw IoError("file not found: '" + *path + "'");
  }
  if (!cfg.debug_dir.empty()) std::filesystem::create_directories(cfg.debug_dir);

  Image input = load_image(cfg.input);
  Image style = load_image(cfg.style);
  Mask mask = load_mask(cfg.mask);
  if (mask.height() != input.height() || mask.width() != input.width()) {
    throw ConfigError("mask is " + std::to_string(mask.width()) + "x" + std::to_string(mask.height()) +
                      " but input is " + std::to_string(input.width()) + "x" + std::to_string(input.height()));
  }
  if (!style.same_shape(input)) throw ConfigError("style painting and input must have the same size");

  const auto [h, w] = fit_size(input.height(), input.width(), cfg.size);
  input = resize_bicubic(input, h, w);
  style = resize_bicubic(style, h, w);
  mask = resize_mask_coverage(mask, h, w);
  if (mask_count(mask) == 0) throw ConfigError("mask is empty");

  const Backbone<float> net(load_weights(cfg.weights));

  const auto table =
      cfg.style_table.empty() ? StyleCategoryTable::builtin() : StyleCategoryTable::from_json(load_json_file(cfg.style_table));
  StyleProbs probs = StyleProbs::uniform(table);
  if (!cfg.style_probs.empty()) probs = StyleProbs::from_json(load_json_file(cfg.style_probs));
  if (!cfg.style_class.empty()) probs = StyleProbs::one_hot(cfg.style_class);
  const auto weights = predict_weights(style, probs, table);
  log << "weights: tau=" << weights.tau << " w_s=" << weights.style_weight << " w_hist=" << weights.histogram_weight
      << " w_tv=" << weights.tv_weight << '\n';

  auto first = PassConfig::first_pass();
  auto second = PassConfig::second_pass();
  first.iterations = cfg.iters1;
  second.iterations = cfg.iters2;
  first.apply(weights);
  second.apply(weights);

  HarmonizeOptions options;
  options.dilation = cfg.dilate;
  options.progress = [&log](int pass, int iteration, const LossBreakdown& b) {
    if (iteration % 50 == 0) log << "pass " << pass << " iter " << iteration << " loss " << b.total << '\n';
  };

  std::optional<PassResult> pass1, pass2;
  Image result = input;
  if (cfg.pass == "1" || cfg.pass == "both") {
    pass1 = single_pass(input, input, mask, style, first, net, options);
    result = pass1->output;
  }
  if (cfg.pass == "2" || cfg.pass == "both") {
    pass2 = single_pass(result, input, mask, style, second, net, options);
    result = pass2->output;
  }

  if (!cfg.debug_dir.empty()) {
    const std::filesystem::path dir(cfg.debug_dir);
    std::vector<std::pair<int, const PassResult*>> traces;
    if (pass1) {
      save_image((dir / "pass1.png").string(), pass1->output);
      traces.emplace_back(1, &*pass1);
    }
    if (pass2) {
      save_image((dir / "pass2.png").string(), pass2->output);
      std::ofstream(dir / ("mapping_" + second.reference_layer + ".json")) << mapping_to_json(pass2->mapping).dump();
      traces.emplace_back(2, &*pass2);
    }
    write_loss_trace((dir / "loss_trace.csv").string(), traces);
  }

  if (cfg.postprocess) {
    PostprocessOptions post;
    post.synthesis_options.seed = cfg.seed;
    result = postprocess(result, style, dilate(mask, cfg.dilate), post);
  }
  save_image(cfg.out, result);
  return ok;
}

inline int run(int argc, const char* const argv[], std::ostream& log = std::cerr) {
  CLI::App app{"Harmonize a pasted element into a painting"};
  RunConfig cfg;
  app.option_defaults()->always_capture_default();
  app.add_option("--input", cfg.input, "cut-and-paste composite (PNG)")->required();
  app.add_option("--mask", cfg.mask, "mask of the pasted element (PNG, nonzero = inside)")->required();
  app.add_option("--style", cfg.style, "background painting (PNG)")->required();
  app.add_option("--out", cfg.out, "output PNG")->required();
  app.add_option("--weights", cfg.weights, "NPHW weight file")->required();
  app.add_option("--style-probs", cfg.style_probs, "JSON {\"styles\": {name: probability}}");
  app.add_option("--style-table", cfg.style_table, "JSON style strength table (default: built-in)");
  app.add_option("--style-class", cfg.style_class, "one-hot shortcut for --style-probs")->excludes("--style-probs");
  app.add_option("--size", cfg.size, "max processing dimension")->check(CLI::PositiveNumber);
  app.add_option("--iters1", cfg.iters1, "L-BFGS iterations, pass 1")->check(CLI::NonNegativeNumber);
  app.add_option("--iters2", cfg.iters2, "L-BFGS iterations, pass 2")->check(CLI::NonNegativeNumber);
  app.add_option("--pass", cfg.pass, "passes to run")->check(CLI::IsMember({"1", "2", "both"}));
  app.add_flag("--no-postprocess", [&cfg](std::int64_t) { cfg.postprocess = false; }, "skip denoising and patch synthesis");
  app.add_option("--dilate", cfg.dilate, "radius of the optimized region around the mask")->check(CLI::NonNegativeNumber);
  app.add_option("--seed", cfg.seed, "PatchMatch seed");
  app.add_option("--debug-dir", cfg.debug_dir, "write intermediate results here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    log << "error: " << e.what() << '\n' << app.help();
    return usage;
  }

  try {
    return execute(cfg, log);
  } catch (const ConfigError& e) {
    log << "error: " << e.what() << '\n';
    return usage;
  } catch (const IoError& e) {
    log << "I/O error: " << e.what() << '\n';
    return io;
  } catch (const FormatError& e) {
    log << "I/O error: " << e.what() << '\n';
    return io;
  } catch (const std::filesystem::filesystem_error& e) {
    log << "I/O error: " << e.what() << '\n';
    return io;
  } catch (const NumericError& e) {
    log << "numerical failure: " << e.what() << '\n';
    return numeric;
  }
}

}  // namespace painterly::cli
