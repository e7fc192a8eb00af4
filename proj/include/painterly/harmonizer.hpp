#pragma once

// Two-pass harmonization: robust coarse pass with independent per-layer
// matching and Gram reconstruction, then a refinement pass with consistent
// matching, unique-vector Gram, histogram and TV terms.

#include <algorithm>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "painterly/backbone.hpp"
#include "painterly/errors.hpp"
#include "painterly/estimator.hpp"
#include "painterly/lbfgs.hpp"
#include "painterly/losses.hpp"
#include "painterly/mapping.hpp"
#include "painterly/tensor.hpp"

namespace painterly {

enum class MappingKind { independent, consistent };

struct PassConfig {
  LayerWeights content;
  LayerWeights style;
  LayerWeights histogram;
  std::string reference_layer;
  MappingKind mapping = MappingKind::independent;
  TargetMode target_mode = TargetMode::all;
  double style_weight = 1.0;
  double histogram_weight = 0.0;
  double tv_weight = 0.0;
  int iterations = 1000;
  int history = 10;
  double gradient_tolerance = 1e-7;
  bool normalize_gram = true;

  Pass pass() const { return mapping == MappingKind::independent ? Pass::first : Pass::second; }

  /// content conv4_1; style conv3_1, conv4_1, conv5_1 at 1/3 each.
  static PassConfig first_pass() {
    PassConfig c;
    c.content = {{"conv4_1", 1.0}};
    c.style = {{"conv3_1", 1.0 / 3.0}, {"conv4_1", 1.0 / 3.0}, {"conv5_1", 1.0 / 3.0}};
    c.mapping = MappingKind::independent;
    c.target_mode = TargetMode::all;
    return c;
  }

  /// content conv4_1; style conv1_1..conv4_1; histogram conv1_1, conv4_1 at
  /// 1/2 each; reference layer conv4_1.
  static PassConfig second_pass() {
    PassConfig c;
    c.content = {{"conv4_1", 1.0}};
    c.style = {{"conv1_1", 0.25}, {"conv2_1", 0.25}, {"conv3_1", 0.25}, {"conv4_1", 0.25}};
    c.histogram = {{"conv1_1", 0.5}, {"conv4_1", 0.5}};
    c.reference_layer = "conv4_1";
    c.mapping = MappingKind::consistent;
    c.target_mode = TargetMode::unique;
    c.histogram_weight = 1.0;
    return c;
  }

  void apply(const EstimatedWeights& w) {
    style_weight = w.style_weight;
    if (pass() == Pass::second) {
      histogram_weight = w.histogram_weight;
      tv_weight = w.tv_weight;
    }
  }

  /// Layers whose style matches are needed.
  std::set<std::string> mapped_layers() const {
    std::set<std::string> out;
    for (const auto& [name, w] : style) out.insert(name);
    if (pass() == Pass::second) {
      for (const auto& [name, w] : histogram) out.insert(name);
    }
    if (mapping == MappingKind::consistent) out.insert(reference_layer);
    return out;
  }

  LossConfig loss_config() const {
    LossConfig l;
    l.content = content;
    l.style = style;
    if (pass() == Pass::second) l.histogram = histogram;
    l.style_weight = style_weight;
    l.histogram_weight = pass() == Pass::second ? histogram_weight : 0.0;
    l.tv_weight = pass() == Pass::second ? tv_weight : 0.0;
    l.normalize_gram = normalize_gram;
    return l;
  }

  void validate(const WeightBank& bank) const {
    loss_config().validate();
    if (mapping == MappingKind::consistent && reference_layer.empty()) {
      throw ConfigError("consistent mapping needs a reference layer");
    }
    auto layers = loss_config().layers();
    if (!reference_layer.empty()) layers.insert(reference_layer);
    for (const auto& name : layers) {
      if (!bank.has(name)) throw ConfigError("layer '" + name + "' is not in the weight bank");
    }
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
  }
};

struct HarmonizeOptions {
  int dilation = 8;  // optimized region = mask dilated by this radius
  std::function<void(int pass, int iteration, const LossBreakdown&)> progress;
};

struct PassResult {
  Image output;
  OptimizeReport report;
  MappingField mapping;
  LossBreakdown initial;
  LossBreakdown final;
  std::vector<LossBreakdown> trace;  // one per entry of report.trace
};

/// Composite: `inside` where region is set, `outside` elsewhere.
inline Image composite(const Image& inside, const Image& outside, const Mask& region) {
  Image out = outside;
  for (int c = 0; c < out.channels(); ++c) {
    for (int y = 0; y < out.height(); ++y) {
      for (int x = 0; x < out.width(); ++x) {
        if (region(0, y, x)) out(c, y, x) = inside(c, y, x);
      }
    }
  }
  return out;
}

/// The reconstruction problem of one pass, set up from its images.
template <typename Real>
class PassProblem {
 public:
  PassProblem(const Image& start, const Image& content, const Mask& mask, const Image& style, const PassConfig& cfg,
              const Backbone<Real>& net, int dilation)
      : cfg_(cfg), net_(net), loss_(cfg.loss_config()) {
    if (!start.same_shape(content) || !start.same_shape(style) || start.channels() != 3) {
      throw ConfigError("single_pass: input, content and style images must be 3-channel and equally sized");
    }
    if (mask.height() != start.height() || mask.width() != start.width()) {
      throw ConfigError("single_pass: mask size differs from image size");
    }
    cfg.validate(net.bank());
    region_ = dilate(mask, dilation);

    std::set<std::string> layers = loss_.layers();
    if (!cfg.reference_layer.empty() && cfg.mapping == MappingKind::consistent) layers.insert(cfg.reference_layer);
    for (const auto& name : layers) {
      Mask m = resize_mask(mask, name);
      if (mask_count(m) == 0) throw ConfigError("mask is empty at layer '" + name + "'");
      targets_.masks.emplace(name, std::move(m));
    }

    const auto mapped = cfg.mapped_layers();
    const auto f_start = net.forward(start, mapped);
    const auto f_style = net.forward(style, mapped);
    mapping_ = cfg.mapping == MappingKind::independent
                   ? independent_mapping(f_start, mask, f_style)
                   : consistent_mapping(f_start, mask, f_style, cfg.reference_layer);
    std::set<std::string> content_layers;
    for (const auto& [name, a] : cfg.content) content_layers.insert(name);
    targets_.content = net.forward(content, content_layers);
    targets_.style = build_style_targets(f_style, mapping_, cfg.target_mode, cfg.normalize_gram);
  }

  LossBreakdown evaluate(const Image& output, Image* grad = nullptr) const {
    return total_loss(output, cfg_.pass(), targets_, loss_, net_, region_, grad);
  }

  const Mask& region() const { return region_; }
  const MappingField& mapping() const { return mapping_; }
  const ReconstructionTargets<Real>& targets() const { return targets_; }
  const LossConfig& loss_config() const { return loss_; }

 private:
  PassConfig cfg_;
  const Backbone<Real>& net_;
  LossConfig loss_;
  Mask region_;
  MappingField mapping_;
  ReconstructionTargets<Real> targets_;
};

/// One harmonization pass. `start` is the optimization's initial image and
/// the source of the input activations that get matched; `content` supplies
/// the content target. Returns `start` optimized inside the dilated mask and
/// clamped to [0,1], over `style` outside it.
template <typename Real>
PassResult single_pass(const Image& start, const Image& content, const Mask& mask, const Image& style,
                       const PassConfig& cfg, const Backbone<Real>& net, const HarmonizeOptions& options = {}) {
  const PassProblem<Real> problem(start, content, mask, style, cfg, net, options.dilation);
  const Mask& region = problem.region();

  PassResult result;
  result.mapping = problem.mapping();

  std::vector<std::uint8_t> active(start.size());
  for (int c = 0; c < 3; ++c) {
    std::copy(region.data().begin(), region.data().end(), active.begin() + static_cast<std::ptrdiff_t>(c * start.plane_size()));
  }

  Image work = start;
  LossBreakdown last;
  const auto objective = [&](std::span<const double> x, std::span<double> g) {
    std::copy(x.begin(), x.end(), work.data().begin());
    Image grad;
    last = problem.evaluate(work, &grad);
    std::copy(grad.data().begin(), grad.data().end(), g.begin());
    return last.total;
  };
  const int pass_number = cfg.pass() == Pass::first ? 1 : 2;
  const auto progress = [&](int iteration, double) {
    result.trace.push_back(last);
    if (options.progress) options.progress(pass_number, iteration, last);
  };

  LbfgsOptions lbfgs;
  lbfgs.max_iterations = cfg.iterations;
  lbfgs.history = cfg.history;
  lbfgs.gradient_tolerance = cfg.gradient_tolerance;

  result.initial = problem.evaluate(start);
  result.trace.push_back(result.initial);
  auto [x, report] = lbfgs_minimize(objective, start.data(), lbfgs, active, progress);
  if (report.reason == Termination::non_finite) throw NumericError("non-finite loss or gradient in pass " + std::to_string(pass_number));
  result.report = std::move(report);
  result.final = result.trace.back();

  std::copy(x.begin(), x.end(), work.data().begin());
  for (double& v : work.data()) v = std::clamp(v, 0.0, 1.0);
  result.output = composite(work, style, region);
  return result;
}

template <typename Real>
PassResult single_pass(const Image& input, const Mask& mask, const Image& style, const PassConfig& cfg,
                       const Backbone<Real>& net, const HarmonizeOptions& options = {}) {
  return single_pass(input, input, mask, style, cfg, net, options);
}

struct TwoPassResult {
  PassResult first;   // output is I'
  PassResult second;  // output is O
};

/// Pass 1 from the composite I, pass 2 from I' with the content target still
/// taken from I.
template <typename Real>
TwoPassResult two_pass(const Image& input, const Mask& mask, const Image& style, PassConfig first, PassConfig second,
                       const Backbone<Real>& net, const HarmonizeOptions& options = {}) {
  first.mapping = MappingKind::independent;
  second.mapping = MappingKind::consistent;
  TwoPassResult out;
  out.first = single_pass(input, input, mask, style, first, net, options);
  out.second = single_pass(out.first.output, input, mask, style, second, net, options);
  return out;
}

}  // namespace painterly
